"""Cartesian acquisition model f = P F x + n and its building blocks.

Coil stacks are (..., c, H, W, 2) real-pair tensors; masks are (H, W) {0,1}
matrices applied row-wise in k-space. All operations are pure and
differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError, ShapeError
from .numerics import Tensor, fft2c, ifft2c

RSS_EPS = 1e-24


@dataclass
class SamplingMask:
    """Binary row-undersampling pattern with its acquisition metadata."""

    array: Tensor  # (H, W) of {0., 1.}
    ar: float
    acs_lines: int
    seed: int


@dataclass
class MultiCoilImage:
    """Coil image stack for one slice."""

    data: Tensor  # (c, H, W, 2)

    def __post_init__(self) -> None:
        if self.data.ndim < 4 or self.data.shape[-1] != 2 or self.data.shape[-4] < 1:
            raise ShapeError(
                f"coil stack must be (..., c, H, W, 2) with c >= 1, got {tuple(self.data.shape)}"
            )


@dataclass
class KSpaceData:
    """Measured k-space for one slice: zero at unsampled locations."""

    data: Tensor  # (c, H, W, 2)
    mask: SamplingMask
    noise_sigma: float


def mask_array(P) -> Tensor:
    return P.array if isinstance(P, SamplingMask) else P


def coil_stack(x) -> Tensor:
    """Accept MultiCoilImage / KSpaceData wrappers wherever a stack is expected."""
    if isinstance(x, (MultiCoilImage, KSpaceData)):
        return x.data
    return x


def _check_mask_shapes(x: Tensor, P: Tensor, name: str) -> None:
    if x.ndim < 3 or x.shape[-1] != 2:
        raise ShapeError(f"{name} must be (..., H, W, 2), got {tuple(x.shape)}")
    if P.ndim != 2 or P.shape != x.shape[-3:-1]:
        raise ShapeError(
            f"mask shape {tuple(P.shape)} does not match image extents {tuple(x.shape[-3:-1])}"
        )


def encode(x: Tensor, P) -> Tensor:
    """Forward acquisition P F x per coil: k-space, zero where unsampled."""
    x = coil_stack(x)
    m = mask_array(P)
    _check_mask_shapes(x, m, "x")
    return fft2c(x) * m[..., None]


def encode_adjoint(f: Tensor, P) -> Tensor:
    """Adjoint F^H P^T f per coil (P is its own transpose on the grid)."""
    f = coil_stack(f)
    m = mask_array(P)
    _check_mask_shapes(f, m, "f")
    return ifft2c(f * m[..., None])


def zero_filled(f: Tensor, P) -> Tensor:
    """Classical baseline: inverse FFT of the zero-filled measurements."""
    return encode_adjoint(f, P)


def dc_step(x: Tensor, f: Tensor, P, rho) -> Tensor:
    """Data-consistency gradient step b = x - rho F^H P^T (P F x - f).

    ``rho`` may be a learnable scalar tensor; the step is differentiable in
    both ``x`` and ``rho``. For 0 < rho <= 1 the k-space residual on the
    sampled locations shrinks by the factor (1 - rho).
    """
    x, f = coil_stack(x), coil_stack(f)
    if x.shape != f.shape:
        raise ShapeError(f"x {tuple(x.shape)} and f {tuple(f.shape)} disagree")
    return x - rho * encode_adjoint(encode(x, P) - f, P)


def rss(x: Tensor) -> Tensor:
    """Root sum-of-squares coil combination, (..., c, H, W, 2) -> (..., H, W).

    A small epsilon inside the root keeps the gradient finite at
    zero-magnitude pixels.
    """
    x = coil_stack(x)
    if x.ndim < 4 or x.shape[-1] != 2:
        raise ShapeError(f"expected (..., c, H, W, 2), got {tuple(x.shape)}")
    return torch.sqrt((x * x).sum(dim=(-4, -1)) + RSS_EPS)


def make_mask(
    H: int,
    W: int,
    ar: float,
    acs_lines: int | None = None,
    seed: int = 0,
    q: float = 2.0,
) -> SamplingMask:
    """Variable-density random row mask at acceleration rate ``ar``.

    The ``acs_lines`` central rows are always kept; the remaining budget
    (round(H / ar) rows in total) is drawn without replacement with density
    proportional to (1 - |row - H/2| / (H/2))^q. Deterministic given ``seed``.
    """
    if ar < 1:
        raise ParameterError(f"acceleration rate must be >= 1, got {ar}")
    if acs_lines is None:
        acs_lines = math.ceil(0.08 * H)
    if not 0 <= acs_lines < H:
        raise ParameterError(f"acs_lines={acs_lines} out of range for H={H}")

    n_rows = int(round(H / ar))
    if acs_lines > n_rows:
        raise ParameterError(
            f"acs_lines={acs_lines} exceeds the row budget {n_rows} at ar={ar}"
        )

    mask = np.zeros((H, W))
    start = (H - acs_lines) // 2
    mask[start : start + acs_lines] = 1.0

    extra = n_rows - acs_lines
    if extra > 0:
        center = H // 2
        others = np.array([r for r in range(H) if not start <= r < start + acs_lines])
        density = (1.0 - np.abs(others - center) / (H / 2.0)) ** q
        if np.count_nonzero(density) < extra:
            density = density + 1e-12  # admit edge rows when the budget is large
        rng = np.random.default_rng(seed)
        chosen = rng.choice(others, size=extra, replace=False, p=density / density.sum())
        mask[chosen] = 1.0

    return SamplingMask(
        array=torch.from_numpy(mask).to(torch.float64),
        ar=float(ar),
        acs_lines=acs_lines,
        seed=seed,
    )
