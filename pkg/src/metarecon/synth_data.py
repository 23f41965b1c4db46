"""Synthetic multi-contrast phantom pipeline and dataset files.

A phantom slice is a stack of piecewise-constant ellipse images, one per
contrast, sharing geometry (identical support) while tissue intensities
vary per contrast. Coil sensitivities are smooth Gaussian lobes with linear
phase ramps, normalized to unit sum-of-squares so that rss recovers the
phantom magnitude. Acquisition applies the row mask in k-space and adds
complex Gaussian noise. Everything is a pure function of (spec, seed).

Datasets serialize to a small binary container (magic ``MRDS``) holding the
per-slice coil images, measured k-space, mask, and ground-truth rss image
as little-endian float64, complex values interleaved (re, im).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BadMagicError, ParameterError, ShapeError, TruncatedFileError, VersionMismatchError
from .mri_physics import KSpaceData, MultiCoilImage, SamplingMask, make_mask, rss
from .numerics import DTYPE, Tensor, fft2c

MRDS_MAGIC = b"MRDS"
MRDS_VERSION = 1

# Default task order pairs two orientations with two contrast weightings.
DEFAULT_TASK_NAMES = ("sag_pd", "sag_t2", "cor_pd", "cor_t2")


@dataclass
class Ellipse:
    """One tissue region: geometry shared by all contrasts, intensity per contrast."""

    center: tuple  # (cy, cx) in [-1, 1] normalized coordinates
    axes: tuple  # (ay, ax) semi-axes, normalized
    angle: float  # radians
    intensity: tuple  # one value per contrast, each in [0, 1]


@dataclass
class PhantomSpec:
    """Geometry and per-contrast intensities for one phantom family."""

    H: int
    W: int
    m: int
    ellipses: list
    seed: int = 0
    wobble: float = 0.05  # center perturbation amplitude across slices
    period: float = 16.0  # slices per wobble cycle

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ParameterError(f"need at least one contrast, got m={self.m}")
        for k, e in enumerate(self.ellipses):
            if min(e.axes) <= 0:
                raise ParameterError(f"ellipse {k} has a degenerate axis {e.axes}")
            if len(e.intensity) != self.m:
                raise ParameterError(
                    f"ellipse {k} carries {len(e.intensity)} intensities, expected m={self.m}"
                )
            if not all(0.0 <= v <= 1.0 for v in e.intensity):
                raise ParameterError(f"ellipse {k} intensities {e.intensity} leave [0, 1]")


@dataclass
class SliceData:
    """Everything stored for one acquired slice."""

    coils: MultiCoilImage
    kspace: KSpaceData
    mask: SamplingMask
    xstar: Tensor  # (H, W) ground-truth rss image


@dataclass
class TaskDataset:
    """All slices of one contrast/orientation task plus acquisition metadata."""

    task_id: int
    name: str
    slices: list = field(default_factory=list)
    ar: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0


def default_spec(H: int = 48, W: int = 48, seed: int = 0) -> PhantomSpec:
    """Four-contrast knee-flavored phantom.

    Contrast order matches DEFAULT_TASK_NAMES. Orientation pairs share every
    ellipse with its axis-swapped twin so supports stay identical while the
    bright structures differ between sag- and cor-flavored contrasts; the
    t2-flavored contrasts invert the fluid/tissue brightness ordering.
    """
    #                 (sag_pd, sag_t2, cor_pd, cor_t2)
    ell = [
        Ellipse((0.00, 0.00), (0.86, 0.70), 0.12, (0.50, 0.30, 0.50, 0.30)),
        Ellipse((0.10, 0.12), (0.52, 0.38), -0.30, (0.62, 0.44, 0.58, 0.40)),
        Ellipse((-0.30, -0.22), (0.26, 0.14), 0.60, (0.72, 0.92, 0.40, 0.55)),
        Ellipse((-0.22, -0.30), (0.14, 0.26), -0.60, (0.40, 0.55, 0.72, 0.92)),
        Ellipse((0.32, -0.05), (0.12, 0.20), 0.20, (0.88, 0.20, 0.52, 0.33)),
        Ellipse((-0.05, 0.32), (0.20, 0.12), -0.20, (0.52, 0.33, 0.88, 0.20)),
        Ellipse((0.05, -0.38), (0.10, 0.08), 0.00, (0.18, 0.65, 0.25, 0.75)),
        Ellipse((-0.12, 0.35), (0.09, 0.07), 0.90, (0.95, 0.80, 0.90, 0.70)),
    ]
    return PhantomSpec(H=H, W=W, m=4, ellipses=ell, seed=seed)


def gen_phantom(spec: PhantomSpec, slice_index) -> Tensor:
    """Rasterize one slice -> (m, H, W) float64, later ellipses overwriting earlier.

    ``slice_index`` shifts every ellipse center along a per-ellipse circular
    orbit (amplitude ``spec.wobble``), so adjacent indices give smoothly
    deforming geometry. Deterministic in (spec, slice_index).
    """
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(len(spec.ellipses), 2))

    ys = torch.linspace(-1.0, 1.0, spec.H, dtype=DTYPE)
    xs = torch.linspace(-1.0, 1.0, spec.W, dtype=DTYPE)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")

    imgs = torch.zeros((spec.m, spec.H, spec.W), dtype=DTYPE)
    arc = 2.0 * math.pi * float(slice_index) / spec.period
    for e, (py, px) in zip(spec.ellipses, phases):
        cy = e.center[0] + spec.wobble * math.sin(arc + py)
        cx = e.center[1] + spec.wobble * math.cos(arc + px)
        ca, sa = math.cos(e.angle), math.sin(e.angle)
        u = ca * (xx - cx) + sa * (yy - cy)
        v = -sa * (xx - cx) + ca * (yy - cy)
        inside = (u / e.axes[1]) ** 2 + (v / e.axes[0]) ** 2 <= 1.0
        for i in range(spec.m):
            imgs[i] = torch.where(inside, torch.as_tensor(e.intensity[i], dtype=DTYPE), imgs[i])
    return imgs


def gen_sensitivities(c: int, H: int, W: int, seed: int = 0) -> Tensor:
    """c smooth complex coil maps (c, H, W, 2) with unit sum-of-squares magnitude.

    Gaussian magnitude lobes sit on a ring around the field of view and each
    coil carries a linear phase ramp; the stack is normalized pixelwise so
    sum_j |s_j|^2 = 1 exactly.
    """
    if c < 1:
        raise ParameterError(f"need at least one coil, got c={c}")
    rng = np.random.default_rng(seed)
    ys = np.linspace(-1.0, 1.0, H)
    xs = np.linspace(-1.0, 1.0, W)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    maps = np.empty((c, H, W), dtype=np.complex128)
    for j in range(c):
        ang = 2.0 * math.pi * (j + rng.uniform(-0.15, 0.15)) / c
        cy, cx = 0.55 * math.sin(ang), 0.55 * math.cos(ang)
        width = 0.55 + 0.15 * rng.uniform()
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        ramp = rng.uniform(-1.5, 1.5) * yy + rng.uniform(-1.5, 1.5) * xx + rng.uniform(0.0, 2.0 * math.pi)
        maps[j] = mag * np.exp(1j * ramp)

    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0, keepdims=True))
    return torch.view_as_real(torch.from_numpy(maps)).contiguous()


def simulate_acquisition(img: Tensor, sens: Tensor, mask, noise_sigma: float, seed: int = 0):
    """Acquire one slice: coil images x_j = img * s_j, then f_j = P(F x_j + n_j).

    The noise n is i.i.d. complex Gaussian with standard deviation
    ``noise_sigma`` (sigma / sqrt(2) per real component), drawn before
    masking so the retained samples carry it. Returns (MultiCoilImage,
    KSpaceData); deterministic in ``seed``.
    """
    if img.ndim != 2 or sens.ndim != 4 or sens.shape[1:3] != img.shape or sens.shape[-1] != 2:
        raise ShapeError(
            f"phantom {tuple(img.shape)} and sensitivities {tuple(sens.shape)} disagree"
        )
    coils = img[None, :, :, None] * sens  # (c, H, W, 2)
    kfull = fft2c(coils)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma / math.sqrt(2.0), size=tuple(kfull.shape))
        kfull = kfull + torch.from_numpy(noise)

    marr = mask.array if isinstance(mask, SamplingMask) else mask
    if marr.shape != img.shape:
        raise ShapeError(f"mask {tuple(marr.shape)} does not match image {tuple(img.shape)}")
    f = kfull * marr[..., None]
    smask = mask if isinstance(mask, SamplingMask) else SamplingMask(marr, 1.0, marr.shape[0], 0)
    return MultiCoilImage(coils), KSpaceData(f, smask, float(noise_sigma))


def build_dataset(
    spec: PhantomSpec,
    contrast: int,
    task_id: int,
    name: str,
    c: int = 4,
    ar: float = 4.0,
    noise_sigma: float = 0.005,
    n_slices: int = 8,
    seed: int = 0,
    acs_lines: int | None = None,
    slice_offset: int = 0,
) -> TaskDataset:
    """Assemble one task's dataset: shared mask, per-slice phantom/coils/k-space.

    ``slice_offset`` selects a disjoint run of slice indices so train and
    test splits never share geometry. Coil maps are fixed per task (one
    scanner); noise is re-drawn per slice.
    """
    if not 0 <= contrast < spec.m:
        raise ParameterError(f"contrast {contrast} out of range for m={spec.m}")
    if n_slices < 1:
        raise ParameterError(f"need at least one slice, got {n_slices}")
    mask = make_mask(spec.H, spec.W, ar, acs_lines=acs_lines, seed=seed)
    sens = gen_sensitivities(c, spec.H, spec.W, seed=seed + 17)

    ds = TaskDataset(task_id=task_id, name=name, ar=float(ar), noise_sigma=float(noise_sigma), seed=seed)
    for s in range(n_slices):
        img = gen_phantom(spec, slice_offset + s)[contrast]
        coils, ksp = simulate_acquisition(img, sens, mask, noise_sigma, seed=seed * 1000 + 31 * s)
        ds.slices.append(SliceData(coils=coils, kspace=ksp, mask=mask, xstar=rss(coils.data)))
    return ds


def default_datasets(
    H: int = 48,
    W: int = 48,
    c: int = 4,
    ar: float = 4.0,
    noise_sigma: float = 0.005,
    n_slices: int = 8,
    seed: int = 0,
    slice_offset: int = 0,
) -> list:
    """The standard four tasks, one per contrast of the default phantom."""
    spec = default_spec(H, W, seed=seed)
    return [
        build_dataset(
            spec,
            contrast=i,
            task_id=i,
            name=name,
            c=c,
            ar=ar,
            noise_sigma=noise_sigma,
            n_slices=n_slices,
            seed=seed + i,
            slice_offset=slice_offset,
        )
        for i, name in enumerate(DEFAULT_TASK_NAMES)
    ]


def _write_run(fh, t: Tensor) -> None:
    fh.write(t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())


def _read_run(fh, shape, what: str) -> Tensor:
    n = int(np.prod(shape)) * 8
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"dataset ends inside {what}")
    return torch.from_numpy(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())


def write_dataset(ds: TaskDataset, path) -> None:
    """Serialize to the MRDS container; float64 payloads round-trip bitwise."""
    n = len(ds.slices)
    if n == 0:
        raise ParameterError("refusing to write an empty dataset")
    c, H, W = ds.slices[0].coils.data.shape[-4:-1]
    name_raw = ds.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MRDS_MAGIC)
        fh.write(struct.pack("<I", MRDS_VERSION))
        fh.write(struct.pack("<I", len(name_raw)))
        fh.write(name_raw)
        fh.write(struct.pack("<IIII", n, c, H, W))
        fh.write(struct.pack("<dd", ds.ar, ds.noise_sigma))
        for s in ds.slices:
            _write_run(fh, s.coils.data)
            _write_run(fh, s.kspace.data)
            _write_run(fh, s.mask.array)
            _write_run(fh, s.xstar)


def read_dataset(path) -> TaskDataset:
    """Load an MRDS container written by write_dataset.

    The task id and generator seeds are not part of the format; loaded
    datasets carry task_id = 0 and seed = 0, with mask seeds likewise reset.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise TruncatedFileError("dataset shorter than its magic")
        if magic != MRDS_MAGIC:
            raise BadMagicError(f"not a dataset file (magic {magic!r})")
        head = fh.read(8)
        if len(head) < 8:
            raise TruncatedFileError("dataset ends inside the header")
        version, name_len = struct.unpack("<II", head)
        if version != MRDS_VERSION:
            raise VersionMismatchError(f"dataset version {version}, expected {MRDS_VERSION}")
        name_raw = fh.read(name_len)
        if len(name_raw) < name_len:
            raise TruncatedFileError("dataset ends inside the task name")
        counts = fh.read(16 + 16)
        if len(counts) < 32:
            raise TruncatedFileError("dataset ends inside the counts block")
        n, c, H, W = struct.unpack("<IIII", counts[:16])
        ar, noise_sigma = struct.unpack("<dd", counts[16:])

        ds = TaskDataset(task_id=0, name=name_raw.decode("utf-8"), ar=ar, noise_sigma=noise_sigma, seed=0)
        for k in range(n):
            coils = _read_run(fh, (c, H, W, 2), f"slice {k} coil images")
            f = _read_run(fh, (c, H, W, 2), f"slice {k} k-space")
            marr = _read_run(fh, (H, W), f"slice {k} mask")
            xstar = _read_run(fh, (H, W), f"slice {k} rss image")
            mask = SamplingMask(array=marr, ar=ar, acs_lines=0, seed=0)
            ds.slices.append(
                SliceData(
                    coils=MultiCoilImage(coils),
                    kspace=KSpaceData(f, mask, noise_sigma),
                    mask=mask,
                    xstar=xstar,
                )
            )
    return ds
