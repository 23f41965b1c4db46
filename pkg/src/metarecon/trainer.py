"""Bi-level training loop: shared meta-knowledge vs per-task weights.

Each epoch samples one volume (a window of consecutive slices) per task,
takes ``k_inner`` optimizer steps on the shared parameters against the
summed loss while the per-task weights stay frozen, then one step per task
on its own loss with the shared parameters frozen. The per-task outer step
uses its own backward pass: the tasks are coupled through the shared
feature net, so the gradient of the summed loss w.r.t. one task's weights
is not the gradient that task's own loss prescribes.

The optimizer is a self-contained bias-corrected ADAM over named parameter
dicts, so its moments serialize into checkpoints alongside the weights and
training resumes bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ParameterError, ShapeError
from .metrics import nmse, psnr, ssim
from .mri_physics import rss
from .networks import ParamStore, meta_param_dict, task_param_dict
from .numerics import DTYPE, Tensor, backward
from .unroll import ReconConfig, reconstruct, reconstruct_stl

CSV_HEADER = "epoch,task,loss,psnr,ssim,nmse"


@dataclass
class TrainConfig:
    """Knobs of the alternating training loop."""

    epochs: int = 100
    k_inner: int = 10
    beta: float = 1e-4  # shared-parameter learning rate
    alphas: tuple = (5e-4, 2e-4, 5e-4, 2e-4)  # per-task learning rates
    lam: float = 1e-4  # weight of the initializer fidelity term
    mu: float = 1.0  # weight of the SSIM term
    batch: int = 4  # slices per sampled volume
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.k_inner < 0:
            raise ParameterError("epochs and k_inner must be nonnegative")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        # zero is allowed per-task so frozen baselines can share the loop
        if any(a < 0 for a in self.alphas):
            raise ParameterError(f"negative task learning rate in {self.alphas}")
        if self.lam < 0 or self.mu < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.batch < 1:
            raise ParameterError(f"batch must be at least 1, got {self.batch}")


@dataclass
class AdamState:
    """First/second moments plus step counter for one named parameter group."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={n: torch.zeros_like(p) for n, p in params.items()},
        v={n: torch.zeros_like(p) for n, p in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One in-place bias-corrected ADAM update; returns the advanced state."""
    for n, p in params.items():
        if n not in grads:
            raise ShapeError(f"gradient missing for parameter {n}")
        if grads[n].shape != p.shape:
            raise ShapeError(
                f"gradient shape {tuple(grads[n].shape)} mismatches {n} {tuple(p.shape)}"
            )
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for n, p in params.items():
            g = grads[n]
            state.m[n].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[n].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (state.v[n] / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(state.m[n] / bc1, denom, value=-lr)
    return state


@dataclass
class TrainState:
    """Optimizer states: one for the shared group, one per task group."""

    meta: AdamState | None
    tasks: list = field(default_factory=list)


def init_train_state(store: ParamStore) -> TrainState:
    meta = init_adam(meta_param_dict(store)) if store.meta is not None else None
    tasks = [init_adam(task_param_dict(store, i)) for i in range(len(store.base))]
    return TrainState(meta=meta, tasks=tasks)


def _per_sample_l2(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"images {tuple(a.shape)} vs {tuple(b.shape)} disagree")
    flat = (a - b).reshape(-1, a.shape[-2] * a.shape[-1])
    return flat.norm(dim=1).mean()


def base_loss(xhat: Tensor, xhat0: Tensor, xstar: Tensor, lam: float, mu: float) -> Tensor:
    """Reconstruction + initializer fidelity minus SSIM, averaged over slices."""
    out = _per_sample_l2(xhat, xstar)
    if lam != 0:
        out = out + lam * _per_sample_l2(xhat0, xstar)
    if mu != 0:
        out = out - mu * ssim(xhat, xstar)
    return out


def stl_loss(xrecon: Tensor, xstar: Tensor, mu: float) -> Tensor:
    """Single-task loss on the combined magnitude image; no initializer term."""
    out = _per_sample_l2(xrecon, xstar)
    if mu != 0:
        out = out - mu * ssim(xrecon, xstar)
    return out


def total_loss(losses) -> Tensor:
    """Sum of the per-task losses."""
    if len(losses) == 0:
        raise ParameterError("no per-task losses to sum")
    out = losses[0]
    for l in losses[1:]:
        out = out + l
    return out


def sample_volume(ds, batch: int, rng) -> tuple:
    """A window of consecutive slices: (f (B,c,H,W,2), mask, xstar (B,H,W))."""
    n = len(ds.slices)
    if n == 0:
        raise ParameterError(f"dataset {ds.name!r} has no slices")
    b = min(batch, n)
    start = int(rng.integers(0, n - b + 1))
    window = ds.slices[start : start + b]
    f = torch.stack([s.kspace.data for s in window])
    xstar = torch.stack([s.xstar for s in window])
    return f, window[0].mask, xstar


def _recon_cfg(store: ParamStore) -> ReconConfig:
    return ReconConfig(T=store.spec.T, r=store.spec.r, m=len(store.base))


def _forward_losses(batches, store: ParamStore, cfg: TrainConfig):
    fs = [b[0] for b in batches]
    masks = [b[1] for b in batches]
    out = reconstruct(fs, masks, store, _recon_cfg(store))
    losses = [
        base_loss(out.xhat[i], out.xhat0[i], batches[i][2], cfg.lam, cfg.mu)
        for i in range(len(batches))
    ]
    return out, losses


def meta_inner_phase(batches, store: ParamStore, state: TrainState, cfg: TrainConfig) -> None:
    """k_inner ADAM steps on the shared parameters; task weights untouched."""
    shared = meta_param_dict(store)
    for _ in range(cfg.k_inner):
        _, losses = _forward_losses(batches, store, cfg)
        grads = backward(total_loss(losses), shared)
        adam_step(shared, grads, state.meta, cfg.beta)


def meta_outer_phase(batches, store: ParamStore, state: TrainState, cfg: TrainConfig):
    """One ADAM step per task on its own loss; shared parameters untouched.

    A single forward serves all tasks, then each task's loss gets its own
    backward pass restricted to that task's parameters. Returns the metric
    rows evaluated at the pre-update forward.
    """
    out, losses = _forward_losses(batches, store, cfg)
    m = len(batches)
    # gradients first (the graph is shared), in-place updates afterwards
    grads = [
        backward(losses[i], task_param_dict(store, i), retain_graph=i < m - 1)
        for i in range(m)
    ]
    rows = []
    for i in range(m):
        adam_step(task_param_dict(store, i), grads[i], state.tasks[i], cfg.alphas[i])
        xhat = out.xhat[i].detach()
        xstar = batches[i][2]
        rows.append(
            {
                "loss": float(losses[i].detach()),
                "psnr": psnr(xhat, xstar),
                "ssim": float(ssim(xhat, xstar).detach()),
                "nmse": nmse(xhat, xstar),
            }
        )
    return rows


def meta_train_epoch(
    datasets, store: ParamStore, state: TrainState, cfg: TrainConfig, epoch: int = 0
):
    """One alternating epoch over freshly sampled volumes; returns metric rows."""
    if store.meta is None or state.meta is None:
        raise ParameterError("store was built without shared parameters")
    if len(datasets) != len(store.base):
        raise ShapeError(f"{len(datasets)} datasets for {len(store.base)} task slots")
    if len(cfg.alphas) < len(datasets):
        raise ParameterError("fewer task learning rates than tasks")
    rng = np.random.default_rng((cfg.seed, epoch))
    batches = [sample_volume(ds, cfg.batch, rng) for ds in datasets]
    meta_inner_phase(batches, store, state, cfg)
    rows = meta_outer_phase(batches, store, state, cfg)
    for ds, row in zip(datasets, rows):
        row["task"] = ds.name
    return rows


def stl_train_epoch(
    dataset, store: ParamStore, state: TrainState, cfg: TrainConfig, epoch: int = 0
):
    """One step on the single-task baseline: combined image vs ground truth."""
    if len(store.base) != 1:
        raise ParameterError("single-task training expects exactly one task slot")
    rng = np.random.default_rng((cfg.seed, epoch))
    f, mask, xstar = sample_volume(dataset, cfg.batch, rng)
    (x_T,) = reconstruct_stl([f], [mask], store, _recon_cfg(store))
    xrecon = rss(x_T)
    loss = stl_loss(xrecon, xstar, cfg.mu)
    params = task_param_dict(store, 0)
    grads = backward(loss, params)
    adam_step(params, grads, state.tasks[0], cfg.alphas[0])
    xr = xrecon.detach()
    return {
        "task": dataset.name,
        "loss": float(loss.detach()),
        "psnr": psnr(xr, xstar),
        "ssim": float(ssim(xr, xstar).detach()),
        "nmse": nmse(xr, xstar),
    }


def append_metrics_csv(path, epoch: int, rows) -> None:
    """Append one line per task, creating the file with its header first."""
    import os

    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if fresh:
            fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{epoch},{r['task']},{r['loss']:.10g},{r['psnr']:.10g},"
                f"{r['ssim']:.10g},{r['nmse']:.10g}\n"
            )


def _group_records(prefix: str, params: dict, st: AdamState, recs: dict) -> None:
    for n in params:
        recs[n + ".m"] = st.m[n]
        recs[n + ".v"] = st.v[n]
    recs[f"adam.{prefix}.step"] = torch.tensor([float(st.step)], dtype=DTYPE)


def optstate_records(store: ParamStore, state: TrainState) -> dict:
    """Flatten optimizer moments into named records for checkpointing."""
    recs: dict = {}
    if state.meta is not None:
        _group_records("meta", meta_param_dict(store), state.meta, recs)
    for i, st in enumerate(state.tasks):
        _group_records(f"task{i}", task_param_dict(store, i), st, recs)
    return recs


def _restore_group(prefix: str, params: dict, st: AdamState, recs: dict) -> None:
    for n, p in params.items():
        if n + ".m" in recs:
            st.m[n] = recs[n + ".m"].reshape(p.shape).clone()
            st.v[n] = recs[n + ".v"].reshape(p.shape).clone()
    key = f"adam.{prefix}.step"
    if key in recs:
        st.step = int(round(float(recs[key].reshape(-1)[0])))


def restore_train_state(store: ParamStore, records: dict) -> TrainState:
    """Rebuild optimizer states from checkpoint records (zeros where absent)."""
    state = init_train_state(store)
    if state.meta is not None:
        _restore_group("meta", meta_param_dict(store), state.meta, records)
    for i, st in enumerate(state.tasks):
        _restore_group(f"task{i}", task_param_dict(store, i), st, records)
    return state
