"""Learnable components and their parameter store.

Per task i the store carries the image-domain prox net G_i, the k-space prox
net K_i, the coil combiner J_i, the distribution head Z_i, a k-space
initializer net, and the per-iteration step sizes rho_i. The shared (meta)
group holds the mixing network H and the inner-loop step sizes delta. All
nets are plain conv stacks applied functionally, so task-specific and shared
weights can be updated by different optimizers without module surgery.

Complex stacks (..., C, H, W, 2) are flattened to 2C real channels before a
net and restored after; channel order is (re_0, im_0, re_1, im_1, ...).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .errors import (
    BadMagicError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from .mri_physics import mask_array, rss
from .numerics import DTYPE, Tensor, conv2d, fft2c, ifft2c

ConvNet = list  # [(weight, bias), ...]

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


@dataclass
class NetSpec:
    """Sizes for one model instance; the synonymous fields of RunConfig map here."""

    m: int = 4
    c: int = 4
    d: int = 32
    width: int = 32
    kernel: int = 3
    layers: int = 3
    h_layers: int = 4
    T: int = 5
    r: int = 5
    rho0: float = 0.5
    delta0: float = 0.5
    meta: bool = True  # False builds a single-task store: G/K/init/rho only
    residual: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.kernel}")
        if min(self.width, self.d, self.m, self.c, self.layers) < 1:
            raise ShapeError("width, d, m, c, layers must all be >= 1")


@dataclass
class TaskWeights:
    G: ConvNet
    K: ConvNet
    init: ConvNet
    rho: Tensor  # (T,)
    J: ConvNet | None = None
    Z: ConvNet | None = None


@dataclass
class MetaWeights:
    H: ConvNet
    delta: Tensor  # (T, r)


@dataclass
class ParamStore:
    spec: NetSpec
    base: list  # [TaskWeights] * m
    meta: MetaWeights | None = None


def to_channels(x: Tensor) -> Tensor:
    """(..., C, H, W, 2) -> (..., 2C, H, W)."""
    xp = x.movedim(-1, -3)  # (..., C, 2, H, W)
    s = xp.shape
    return xp.reshape(*s[:-4], s[-4] * 2, s[-2], s[-1])


def from_channels(y: Tensor) -> Tensor:
    """(..., 2C, H, W) -> (..., C, H, W, 2)."""
    s = y.shape
    yp = y.reshape(*s[:-3], s[-3] // 2, 2, s[-2], s[-1])
    return yp.movedim(-3, -1)


# module-level so gradient-verification code can swap in a recording wrapper
relu = torch.relu


def apply_net(net: ConvNet, x: Tensor) -> Tensor:
    """Conv stack with ReLU between layers and a linear final layer."""
    for i, (w, b) in enumerate(net):
        x = conv2d(x, w, b)
        if i < len(net) - 1:
            x = relu(x)
    return x


def _with_batch(x: Tensor, want_dims: int):
    if x.ndim == want_dims - 1:
        return x[None], True
    if x.ndim == want_dims:
        return x, False
    raise ShapeError(f"expected {want_dims - 1}- or {want_dims}-dim input, got {tuple(x.shape)}")


def _check_channels(net: ConvNet, x: Tensor, name: str) -> None:
    cin = net[0][0].shape[1]
    if x.shape[-3] != cin:
        raise ShapeError(f"{name} expects {cin} channels, got {x.shape[-3]}")


def prox_image_apply(G: ConvNet, b: Tensor) -> Tensor:
    """Image-domain proximal map: b + R_G(b) on the stacked real channels."""
    xb, squeeze = _with_batch(b, 5)
    ch = to_channels(xb)
    _check_channels(G, ch, "G")
    out = from_channels(ch + apply_net(G, ch))
    return out[0] if squeeze else out


def prox_kspace_apply(K: ConvNet, xbar: Tensor) -> Tensor:
    """Frequency-domain proximal map: F^H (F x + R_K(F x))."""
    xb, squeeze = _with_batch(xbar, 5)
    k = to_channels(fft2c(xb))
    _check_channels(K, k, "K")
    out = ifft2c(from_channels(k + apply_net(K, k)))
    return out[0] if squeeze else out


def coil_combine(J: ConvNet, x: Tensor) -> Tensor:
    """Collapse a coil stack to one complex image, (.., c, H, W, 2) -> (.., H, W, 2).

    The network refines a fixed rss combination carried in the real channel;
    with the zero-initialized final layer this is exactly (rss(x), 0) at the
    start, so the whole pipeline begins from a sensible combined image.
    """
    xb, squeeze = _with_batch(x, 5)
    ch = to_channels(xb)
    _check_channels(J, ch, "J")
    skip = torch.stack([rss(xb), torch.zeros_like(xb[:, 0, ..., 0])], dim=-1)
    out = skip + from_channels(apply_net(J, ch))[:, 0]
    return out[0] if squeeze else out


def meta_forward(H: ConvNet, combined: list) -> Tensor:
    """Mix the m combined images into a shared feature map (B, d, H, W).

    Feature slot k passes through the real plane of task k mod m (the plane
    that carries the rss magnitude) plus the network's learned mixing, so the
    routing is exact until the zero-initialized final layer trains away from
    zero. All 2m input planes still feed the convolution stack.
    """
    cin = H[0][0].shape[1]
    if 2 * len(combined) != cin:
        raise ShapeError(f"meta net expects {cin // 2} task images, got {len(combined)}")
    chans = []
    squeeze = False
    for img in combined:
        xb, squeeze = _with_batch(img, 4)  # (B, H, W, 2)
        chans.append(to_channels(xb[:, None]))  # (B, 2, H, W)
    cat = torch.cat(chans, dim=1)
    d = H[-1][0].shape[0]
    route = cat[:, [2 * (k % (cin // 2)) for k in range(d)]]
    feat = route + apply_net(H, cat)
    return feat[0] if squeeze else feat


def meta_distribute(Z: ConvNet, feat: Tensor, slot: int = 0) -> Tensor:
    """Project features to one task image, (B, d, H, W) -> (B, H, W).

    Reads the task's routed feature slot and adds the network's refinement;
    zero-initialized final layers make the output exactly that slot at the
    start of training. The relu keeps the output nonnegative like its rss
    regression target without disturbing the identity (rss is nonnegative).
    """
    xb, squeeze = _with_batch(feat, 4)
    _check_channels(Z, xb, "Z")
    out = relu(xb[:, slot % xb.shape[-3]] + apply_net(Z, xb)[:, 0])
    return out[0] if squeeze else out


def init_recon(init_net: ConvNet, f: Tensor, P) -> Tensor:
    """Estimate x0 by filling unsampled k-space with a residual net.

    Acquired samples pass through untouched, so F x0 equals f exactly on the
    mask regardless of the net weights.
    """
    mask = mask_array(P)
    fb, squeeze = _with_batch(f, 5)
    if mask.shape != fb.shape[-3:-1]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match k-space {tuple(fb.shape)}")
    ch = to_channels(fb)
    _check_channels(init_net, ch, "init")
    fill = from_channels(apply_net(init_net, ch))
    x0 = ifft2c(fb + (1.0 - mask)[..., None] * fill)
    return x0[0] if squeeze else x0


def _xavier_conv(cout: int, cin: int, k: int, gen: torch.Generator):
    fan = (cin + cout) * k * k
    bound = math.sqrt(6.0 / fan)
    w = (torch.rand(cout, cin, k, k, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound
    w.requires_grad_(True)
    b = torch.zeros(cout, dtype=DTYPE, requires_grad=True)
    return w, b


def _make_net(cin: int, cout: int, width: int, layers: int, k: int, gen) -> ConvNet:
    chain = [cin] + [width] * (layers - 1) + [cout]
    net = [_xavier_conv(chain[i + 1], chain[i], k, gen) for i in range(layers)]
    # zero final layer: every net starts as a no-op refinement of its skip
    # path, so the untrained model reproduces its classical baseline exactly
    with torch.no_grad():
        net[-1][0].zero_()
    return net


def init_params(spec: NetSpec, seed: int = 0) -> ParamStore:
    """Fresh parameter store: Xavier-uniform hidden conv weights, zero final
    layers and biases, rho and delta at their configured starting values.
    Deterministic in seed."""
    gen = torch.Generator().manual_seed(seed)
    cc = 2 * spec.c
    base = []
    for _ in range(spec.m):
        tw = TaskWeights(
            G=_make_net(cc, cc, spec.width, spec.layers, spec.kernel, gen),
            K=_make_net(cc, cc, spec.width, spec.layers, spec.kernel, gen),
            init=_make_net(cc, cc, spec.width, spec.layers, spec.kernel, gen),
            rho=torch.full((spec.T,), spec.rho0, dtype=DTYPE, requires_grad=True),
        )
        if spec.meta:
            tw.J = _make_net(cc, 2, spec.width, spec.layers, spec.kernel, gen)
            tw.Z = _make_net(spec.d, 1, spec.width, spec.layers, spec.kernel, gen)
        base.append(tw)
    meta = None
    if spec.meta:
        meta = MetaWeights(
            H=_make_net(2 * spec.m, spec.d, spec.width, spec.h_layers, spec.kernel, gen),
            delta=torch.full((spec.T, spec.r), spec.delta0, dtype=DTYPE, requires_grad=True),
        )
    return ParamStore(spec=spec, base=base, meta=meta)


def _net_items(prefix: str, net: ConvNet):
    for l, (w, b) in enumerate(net):
        yield f"{prefix}{l}.weight", w
        yield f"{prefix}{l}.bias", b


def task_param_dict(store: ParamStore, i: int) -> dict:
    """Flat name -> tensor map of task i's weights w_i."""
    tw = store.base[i]
    out = {}
    for fam in ("G", "K", "J", "Z", "init"):
        net = getattr(tw, fam)
        if net is not None:
            out.update(_net_items(f"task{i}.{fam}", net))
    out[f"task{i}.rho"] = tw.rho
    return out


def meta_param_dict(store: ParamStore) -> dict:
    """Flat name -> tensor map of the shared weights (H net and delta)."""
    if store.meta is None:
        return {}
    out = dict(_net_items("meta.H", store.meta.H))
    out["meta.delta"] = store.meta.delta
    return out


def flatten_params(store: ParamStore) -> dict:
    out = {}
    for i in range(len(store.base)):
        out.update(task_param_dict(store, i))
    out.update(meta_param_dict(store))
    return out


_SPEC_FIELDS = (
    "m", "c", "d", "width", "kernel", "layers", "h_layers", "T", "r",
    "rho0", "delta0", "meta", "residual",
)


def save_checkpoint(path, store: ParamStore, extra: Mapping[str, Tensor] | None = None) -> None:
    """Write the store (plus optional extra records such as optimizer moments).

    Layout: magic, version u32, record count u32, then per record a
    length-prefixed UTF-8 name, u32 rank, u32 extents, and the raw
    little-endian f64 payload.
    """
    records = {}
    for name in _SPEC_FIELDS:
        records[f"spec.{name}"] = torch.tensor(float(getattr(store.spec, name)), dtype=DTYPE)
    records.update(flatten_params(store))
    if extra:
        records.update(extra)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(records)))
        for name, tensor in records.items():
            _write_record(fh, name, tensor)


def load_checkpoint(path):
    """Read a checkpoint back into a fresh ParamStore.

    Returns (store, extra) where extra holds any records beyond the store's
    own parameters (optimizer moments, step counters).
    """
    records = _read_records(path, CKPT_MAGIC, CKPT_VERSION)
    spec_kwargs = {}
    for name in _SPEC_FIELDS:
        val = records.pop(f"spec.{name}").item()
        spec_kwargs[name] = bool(val) if name in ("meta", "residual") else (
            float(val) if name in ("rho0", "delta0") else int(val)
        )
    spec = NetSpec(**spec_kwargs)
    store = init_params(spec, seed=0)
    for name, param in flatten_params(store).items():
        stored = records.pop(name, None)
        if stored is None:
            raise TruncatedFileError(f"checkpoint is missing record {name}")
        if stored.shape != param.shape:
            raise ShapeError(
                f"record {name} has shape {tuple(stored.shape)}, expected {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(stored)
    return store, records


def _write_record(fh, name: str, tensor: Tensor) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    shape = tuple(tensor.shape)
    fh.write(struct.pack("<I", len(shape)))
    for extent in shape:
        fh.write(struct.pack("<I", extent))
    fh.write(tensor.detach().numpy().astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ended while reading {what}")
    return buf


def _read_records(path, magic: bytes, version: int) -> dict:
    records = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != magic:
            raise BadMagicError(f"{path} is not a {magic.decode()} file")
        got_version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if got_version != version:
            raise VersionMismatchError(f"format version {got_version}, expected {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "record name length"))
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "record rank"))
            shape = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, "record extents")
            )
            numel = 1
            for extent in shape:
                numel *= extent
            raw = _read_exact(fh, 8 * numel, f"record {name} payload")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            records[name] = torch.from_numpy(arr)
    return records
