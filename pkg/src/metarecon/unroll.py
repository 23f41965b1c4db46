"""The unrolled forward solver.

Each outer iteration t first takes r gradient-descent steps on the coupled
consistency constraint (every task's distributed image must match its own RSS
combination), then applies a data-consistency step and the two proximal
networks. Inner-loop gradients are taken with ``create_graph=True`` so that
training losses can differentiate through them into the network weights and
the step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ParameterError, ShapeError
from .mri_physics import dc_step, mask_array, rss
from .networks import (
    ParamStore,
    coil_combine,
    meta_distribute,
    meta_forward,
    init_recon,
    prox_image_apply,
    prox_kspace_apply,
)
from .numerics import Tensor


@dataclass
class ReconConfig:
    T: int = 5
    r: int = 5
    m: int = 4

    def __post_init__(self):
        if self.T < 0 or self.r < 0 or self.m < 1:
            raise ParameterError(f"need T >= 0, r >= 0, m >= 1, got {self}")


@dataclass
class ReconOutput:
    x_T: list  # per task (B, c, H, W, 2)
    xhat: list  # per task (B, H, W), distributed image of x_T
    xhat0: list  # per task (B, H, W), distributed image of x0


def distributed_images(params: ParamStore, xs: list) -> list:
    """Z_i(H([J_1(x_1), ..., J_m(x_m)])) for every task."""
    if params.meta is None:
        raise ParameterError("store has no shared weights; built for single-task use")
    combined = [coil_combine(tw.J, x) for tw, x in zip(params.base, xs)]
    feat = meta_forward(params.meta.H, combined)
    # task i reads the slot its combined image's magnitude was routed into
    return [meta_distribute(tw.Z, feat, i) for i, tw in enumerate(params.base)]


def constraint_residual(xs: list, params: ParamStore) -> list:
    """Per-task 1/2 ||Z_i(H([J(x)])) - rss(x_i)||^2, summed over any batch."""
    if len(xs) != len(params.base):
        raise ShapeError(f"{len(xs)} task images for {len(params.base)} tasks")
    zs = distributed_images(params, xs)
    return [0.5 * ((z - rss(x)) ** 2).sum() for z, x in zip(zs, xs)]


def lower_level_gd(xs: list, params: ParamStore, r: int, t: int = 0) -> list:
    """r simultaneous descent steps of all task images on the summed constraint.

    Steps use delta[t, tau]; gradients of the constraint w.r.t. every task
    image are evaluated jointly at the current iterate (the tasks couple
    through the shared mixing net), then applied at once.
    """
    if r == 0:
        return list(xs)
    delta = params.meta.delta
    if t >= delta.shape[0] or r > delta.shape[1]:
        raise ParameterError(
            f"step-size table {tuple(delta.shape)} too small for t={t}, r={r}"
        )
    xs = [x if x.requires_grad else x.clone().requires_grad_(True) for x in xs]
    for tau in range(r):
        total = sum(constraint_residual(xs, params))
        grads = torch.autograd.grad(total, xs, create_graph=True)
        xs = [x - delta[t, tau] * g for x, g in zip(xs, grads)]
    return xs


def outer_iteration(xs: list, fs: list, masks: list, params: ParamStore, t: int) -> list:
    """Data consistency then the image- and k-space-domain proximal nets."""
    out = []
    for x, f, mask, tw in zip(xs, fs, masks, params.base):
        if t >= tw.rho.shape[0]:
            raise ParameterError(f"rho holds {tw.rho.shape[0]} iterations, got t={t}")
        b = dc_step(x, f, mask, tw.rho[t])
        out.append(prox_kspace_apply(tw.K, prox_image_apply(tw.G, b)))
    return out


def _normalize_inputs(fs: list, masks: list, m: int):
    if len(fs) != m or len(masks) != m:
        raise ShapeError(f"expected {m} k-space stacks and masks, got {len(fs)}/{len(masks)}")
    squeeze = fs[0].ndim == 4
    fs = [f[None] if f.ndim == 4 else f for f in fs]
    if any(f.ndim != 5 for f in fs):
        raise ShapeError("k-space stacks must be (c, H, W, 2) or (B, c, H, W, 2)")
    return fs, [mask_array(p) for p in masks], squeeze


def reconstruct(fs: list, masks: list, params: ParamStore, cfg: ReconConfig) -> ReconOutput:
    """Run the full solver; returns x_T plus the distributed images of x_T and x0."""
    fs, masks, squeeze = _normalize_inputs(fs, masks, cfg.m)
    if len(params.base) != cfg.m:
        raise ShapeError(f"store has {len(params.base)} tasks, config wants {cfg.m}")
    x0s = [init_recon(tw.init, f, p) for tw, f, p in zip(params.base, fs, masks)]
    xs = x0s
    for t in range(cfg.T):
        xs = lower_level_gd(xs, params, cfg.r, t)
        xs = outer_iteration(xs, fs, masks, params, t)
    xhat = distributed_images(params, xs)
    xhat0 = distributed_images(params, x0s)
    if squeeze:
        return ReconOutput(
            x_T=[x[0] for x in xs], xhat=[x[0] for x in xhat], xhat0=[x[0] for x in xhat0]
        )
    return ReconOutput(x_T=xs, xhat=xhat, xhat0=xhat0)


def reconstruct_stl(fs: list, masks: list, params: ParamStore, cfg: ReconConfig) -> list:
    """Single-task variant: initializer plus T data-consistency/prox iterations.

    No inner loop and no cross-task mixing; the magnitude reconstruction for
    metrics is rss of each returned stack.
    """
    fs, masks, squeeze = _normalize_inputs(fs, masks, cfg.m)
    if len(params.base) != cfg.m:
        raise ShapeError(f"store has {len(params.base)} tasks, config wants {cfg.m}")
    xs = [init_recon(tw.init, f, p) for tw, f, p in zip(params.base, fs, masks)]
    for t in range(cfg.T):
        xs = outer_iteration(xs, fs, masks, params, t)
    return [x[0] for x in xs] if squeeze else xs
