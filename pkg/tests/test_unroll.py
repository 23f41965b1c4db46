from dataclasses import replace

import numpy as np
import pytest
import torch

from metarecon.errors import ParameterError
from metarecon.mri_physics import encode, make_mask, rss
from metarecon.networks import (
    NetSpec,
    ParamStore,
    TaskWeights,
    flatten_params,
    init_params,
)
from metarecon.numerics import fft2c, finite_diff_gradient
from metarecon.unroll import (
    ReconConfig,
    ReconOutput,
    constraint_residual,
    distributed_images,
    lower_level_gd,
    outer_iteration,
    reconstruct,
    reconstruct_stl,
)

SPEC = NetSpec(m=2, c=2, d=4, width=4, T=2, r=2)


def tiny_problem(seed=0, m=2, c=2, n=8, noiseless_full=False):
    rng = np.random.default_rng(seed)
    xs_true, fs, masks = [], [], []
    for i in range(m):
        z = rng.random((c, n, n)) + 1j * rng.random((c, n, n))
        x = torch.from_numpy(np.stack([z.real, z.imag], -1))
        if noiseless_full:
            mask = torch.ones(n, n, dtype=torch.float64)
        else:
            mask = make_mask(n, n, ar=2, acs_lines=2, seed=seed + i).array
        xs_true.append(x)
        fs.append(fft2c(x) * mask[..., None])
        masks.append(mask)
    return xs_true, fs, masks


def zero_all(net):
    with torch.no_grad():
        for w, b in net:
            w.zero_()
            b.zero_()


def test_constraint_residual_nonnegative_and_composed():
    store = init_params(SPEC, seed=0)
    xs, _, _ = tiny_problem(0)
    res = constraint_residual(xs, store)
    assert len(res) == 2 and all(v.item() >= 0 for v in res)
    zs = distributed_images(store, xs)
    for v, z, x in zip(res, zs, xs):
        manual = 0.5 * ((z - rss(x)) ** 2).sum()
        assert abs(v.item() - manual.item()) < 1e-12


def test_lower_level_gd_noop_cases():
    store = init_params(SPEC, seed=1)
    xs, _, _ = tiny_problem(1)
    assert all(torch.equal(a, b) for a, b in zip(lower_level_gd(xs, store, 0), xs))
    with torch.no_grad():
        store.meta.delta.zero_()
    out = lower_level_gd(xs, store, 2, t=0)
    for a, b in zip(out, xs):
        assert (a - b).abs().max() == 0


def test_lower_level_gd_single_step_matches_fd_oracle():
    spec = replace(SPEC, c=1)
    store = init_params(spec, seed=2)
    xs, _, _ = tiny_problem(2, c=1, n=8)
    params = {"x0": xs[0].clone(), "x1": xs[1].clone()}

    def total():
        return sum(constraint_residual([params["x0"], params["x1"]], store))

    fd = finite_diff_gradient(total, params, h=1e-5)
    delta = store.meta.delta[0, 0].item()
    got = lower_level_gd([params["x0"], params["x1"]], store, 1, t=0)
    for key, x, g in zip(("x0", "x1"), (params["x0"], params["x1"]), (fd["x0"], fd["x1"])):
        want = x - delta * g
        rel = (got[0 if key == "x0" else 1].detach() - want).abs().max() / want.abs().max()
        assert rel < 1e-5


def test_lower_level_gd_descends_for_small_steps():
    store = init_params(SPEC, seed=3)
    xs, _, _ = tiny_problem(3)
    before = sum(v.item() for v in constraint_residual(xs, store))
    ok = False
    for scale in [0.5 / (2**k) for k in range(12)]:
        with torch.no_grad():
            store.meta.delta.fill_(scale)
        out = lower_level_gd(xs, store, 1, t=0)
        after = sum(v.item() for v in constraint_residual(out, store))
        if after <= before:
            ok = True
            break
    assert ok, "no step size in the halving schedule decreased the residual"


def test_outer_iteration_identity_when_disabled():
    store = init_params(SPEC, seed=4)
    xs, fs, masks = tiny_problem(4)
    for tw in store.base:
        zero_all(tw.G)
        zero_all(tw.K)
        with torch.no_grad():
            tw.rho.zero_()
    out = outer_iteration(xs, fs, masks, store, t=0)
    for a, b in zip(out, xs):
        assert (a - b).abs().max() < 1e-12


def test_outer_iteration_fixed_point_on_full_data():
    store = init_params(SPEC, seed=5)
    xs, fs, masks = tiny_problem(5, noiseless_full=True)
    for tw in store.base:
        zero_all(tw.G)
        zero_all(tw.K)
    out = outer_iteration(xs, fs, masks, store, t=1)
    for a, b in zip(out, xs):
        assert (a - b).abs().max() < 1e-12


def test_outer_iteration_matches_manual_composition():
    from metarecon.mri_physics import dc_step
    from metarecon.networks import prox_image_apply, prox_kspace_apply

    store = init_params(SPEC, seed=6)
    xs, fs, masks = tiny_problem(6)
    got = outer_iteration(xs, fs, masks, store, t=0)
    for i in range(2):
        tw = store.base[i]
        want = prox_kspace_apply(
            tw.K, prox_image_apply(tw.G, dc_step(xs[i], fs[i], masks[i], tw.rho[0]))
        )
        assert (got[i] - want).abs().max() < 1e-14


def test_dc_monotonicity_with_identity_prox():
    store = init_params(SPEC, seed=7)
    xs, fs, masks = tiny_problem(7)
    for tw in store.base:
        zero_all(tw.G)
        zero_all(tw.K)
        with torch.no_grad():
            tw.rho.fill_(0.7)
    cur = xs
    prev = [float((encode(x, p) - f).norm()) for x, f, p in zip(cur, fs, masks)]
    for t in range(2):
        cur = outer_iteration(cur, fs, masks, store, t)
        now = [
            float((encode(x, p) - f).detach().norm())
            for x, f, p in zip(cur, fs, masks)
        ]
        assert all(a <= b + 1e-12 for a, b in zip(now, prev))
        prev = now


def test_reconstruct_t0_and_shapes():
    store = init_params(SPEC, seed=8)
    _, fs, masks = tiny_problem(8)
    out = reconstruct(fs, masks, store, ReconConfig(T=0, r=0, m=2))
    assert isinstance(out, ReconOutput)
    for x, f in zip(out.x_T, fs):
        assert x.shape == f.shape
    for a, b in zip(out.xhat, out.xhat0):
        assert torch.equal(a, b)
        assert a.shape == (8, 8)


def test_reconstruct_deterministic():
    store = init_params(SPEC, seed=9)
    _, fs, masks = tiny_problem(9)
    cfg = ReconConfig(T=2, r=2, m=2)
    a = reconstruct(fs, masks, store, cfg)
    b = reconstruct(fs, masks, store, cfg)
    for x, y in zip(a.x_T + a.xhat + a.xhat0, b.x_T + b.xhat + b.xhat0):
        assert torch.equal(x.detach(), y.detach())


def test_reconstruct_batched_inputs():
    store = init_params(SPEC, seed=10)
    _, fs, masks = tiny_problem(10)
    batched = [torch.stack([f, f]) for f in fs]
    out = reconstruct(batched, masks, store, ReconConfig(T=1, r=1, m=2))
    assert out.x_T[0].shape == (2, 2, 8, 8, 2)
    assert out.xhat[0].shape == (2, 8, 8)
    assert torch.allclose(out.xhat[0][0], out.xhat[0][1])


def test_reconstruct_rejects_excess_iterations():
    store = init_params(SPEC, seed=11)
    _, fs, masks = tiny_problem(11)
    with pytest.raises(ParameterError):
        reconstruct(fs, masks, store, ReconConfig(T=3, r=2, m=2))
    with pytest.raises(ParameterError):
        reconstruct(fs, masks, store, ReconConfig(T=2, r=3, m=2))


def test_stl_matches_mtml_steps_when_inner_loop_off():
    store = init_params(SPEC, seed=12)
    _, fs, masks = tiny_problem(12)
    stl_spec = replace(SPEC, meta=False)
    stl_store = ParamStore(
        spec=stl_spec,
        base=[
            TaskWeights(G=tw.G, K=tw.K, init=tw.init, rho=tw.rho) for tw in store.base
        ],
    )
    cfg = ReconConfig(T=2, r=0, m=2)
    full = reconstruct(fs, masks, store, cfg)
    stl = reconstruct_stl(fs, masks, stl_store, cfg)
    for a, b in zip(full.x_T, stl):
        assert torch.equal(a, b)


def test_stl_single_task_without_meta():
    spec = NetSpec(m=1, c=2, d=4, width=4, T=2, r=2, meta=False)
    store = init_params(spec, seed=13)
    _, fs, masks = tiny_problem(13, m=1)
    out = reconstruct_stl(fs, masks, store, ReconConfig(T=2, r=0, m=1))
    assert len(out) == 1 and out[0].shape == fs[0].shape


def test_block_diagonal_mixing_equals_independent_runs():
    # Couple two tasks through H, but zero every cross-block weight; the run
    # must then match two single-task runs built from the extracted blocks.
    # Task i's feature slots are i, i+m, ... (the routing stride), and its H
    # input channels are 2i, 2i+1, so the blocks interleave.
    store = init_params(SPEC, seed=14)  # width 4 and d 4: all H layers split 2+2
    _, fs, masks = tiny_problem(14)
    feat_blk = [np.arange(i, SPEC.d, 2) for i in range(2)]  # slots per task
    chan_blk = [np.array([2 * i, 2 * i + 1]) for i in range(2)]  # H inputs per task
    with torch.no_grad():
        w0, _ = store.meta.H[0]
        for i in range(2):
            w0[np.ix_(feat_blk[i], chan_blk[1 - i])] = 0.0
        for w, _ in store.meta.H[1:]:
            for i in range(2):
                w[np.ix_(feat_blk[i], feat_blk[1 - i])] = 0.0
        for i, tw in enumerate(store.base):
            tw.Z[0][0][:, feat_blk[1 - i]] = 0.0

    cfg = ReconConfig(T=2, r=2, m=2)
    coupled = reconstruct(fs, masks, store, cfg)

    for i in range(2):
        single = init_params(replace(SPEC, m=1), seed=99)
        tw = store.base[i]
        single.base[0] = TaskWeights(
            G=tw.G,
            K=tw.K,
            init=tw.init,
            rho=tw.rho,
            J=tw.J,
            Z=[(tw.Z[0][0][:, feat_blk[i]], tw.Z[0][1])] + list(tw.Z[1:]),
        )
        h0_w, h0_b = store.meta.H[0]
        single.meta.H = [(h0_w[np.ix_(feat_blk[i], chan_blk[i])], h0_b[feat_blk[i]])] + [
            (w[np.ix_(feat_blk[i], feat_blk[i])], b[feat_blk[i]])
            for w, b in store.meta.H[1:]
        ]
        single.meta.delta = store.meta.delta

        alone = reconstruct([fs[i]], [masks[i]], single, ReconConfig(T=2, r=2, m=1))
        assert (coupled.x_T[i] - alone.x_T[0]).abs().max() < 1e-10
        assert (coupled.xhat[i] - alone.xhat[0]).abs().max() < 1e-10


def test_recon_output_gradients_match_fd():
    spec = NetSpec(m=2, c=1, d=2, width=2, T=1, r=1)
    store = init_params(spec, seed=15)
    _, fs, masks = tiny_problem(15, c=1)
    cfg = ReconConfig(T=1, r=1, m=2)

    def probe():
        out = reconstruct(fs, masks, store, cfg)
        val = sum((x**2).sum() for x in out.xhat)
        return val + 0.1 * sum((x**2).sum() for x in out.x_T)

    names = {}
    flat = flatten_params(store)
    names["task0.rho"] = [0]
    names["meta.delta"] = [0]
    names["task0.G0.weight"] = [1, 5]
    names["task1.K1.weight"] = [0, 3]
    names["meta.H0.weight"] = [2, 7]
    names["task1.Z0.weight"] = [0, 4]
    names["task0.J0.weight"] = [1]
    names["task0.init0.weight"] = [2]
    params = {n: flat[n] for n in names}
    analytic = torch.autograd.grad(probe(), list(params.values()))
    fd = finite_diff_gradient(probe, params, h=1e-5, coords=names)
    for (n, idxs), a in zip(names.items(), analytic):
        for idx in idxs:
            av = a.reshape(-1)[idx].item()
            fv = fd[n].reshape(-1)[idx].item()
            assert abs(av - fv) / max(abs(av), abs(fv), 1e-3) < 1e-5, n
