import math

import numpy as np
import pytest
import torch

from metarecon.errors import BadMagicError, ShapeError, TruncatedFileError, VersionMismatchError
from metarecon.mri_physics import make_mask, zero_filled
from metarecon.networks import (
    NetSpec,
    coil_combine,
    flatten_params,
    from_channels,
    init_params,
    init_recon,
    load_checkpoint,
    meta_distribute,
    meta_forward,
    meta_param_dict,
    prox_image_apply,
    prox_kspace_apply,
    save_checkpoint,
    task_param_dict,
    to_channels,
)
from metarecon.numerics import fft2c, finite_diff_gradient

SPEC = NetSpec(m=2, c=2, d=4, width=4, T=2, r=2)


def zero_net(net):
    with torch.no_grad():
        for w, b in net:
            w.zero_()
            b.zero_()


def rand_coils(rng, c, h, w):
    z = rng.standard_normal((c, h, w, 2))
    return torch.from_numpy(z)


def test_channel_roundtrip():
    x = torch.randn(3, 5, 8, 8, 2, dtype=torch.float64)
    assert torch.equal(from_channels(to_channels(x)), x)
    ch = to_channels(x)
    assert ch.shape == (3, 10, 8, 8)
    assert torch.equal(ch[:, 0], x[:, 0, ..., 0])  # re_0 first
    assert torch.equal(ch[:, 1], x[:, 0, ..., 1])


def test_init_params_deterministic_and_bounded():
    a = init_params(SPEC, seed=5)
    b = init_params(SPEC, seed=5)
    c = init_params(SPEC, seed=6)
    fa, fb, fc = flatten_params(a), flatten_params(b), flatten_params(c)
    assert fa.keys() == fb.keys()
    assert all(torch.equal(fa[k], fb[k]) for k in fa)
    assert any(not torch.equal(fa[k], fc[k]) for k in fa)
    for name, p in fa.items():
        if name.endswith(".weight"):
            cout, cin, k, _ = p.shape
            bound = math.sqrt(6.0 / ((cin + cout) * k * k))
            assert p.abs().max() <= bound
        elif name.endswith(".bias"):
            assert torch.all(p == 0)
    assert torch.all(fa["task0.rho"] == 0.5)
    assert torch.all(fa["meta.delta"] == 0.5)
    assert fa["meta.delta"].shape == (SPEC.T, SPEC.r)


def test_stl_store_has_no_meta_group():
    store = init_params(NetSpec(m=1, c=2, d=4, width=4, meta=False), seed=0)
    assert store.meta is None
    assert store.base[0].J is None and store.base[0].Z is None
    assert meta_param_dict(store) == {}
    names = set(task_param_dict(store, 0))
    assert "task0.rho" in names
    assert not any(".J" in n or ".Z" in n for n in names)


def test_prox_image_residual_identity_and_shape():
    store = init_params(SPEC, seed=0)
    zero_net(store.base[0].G)
    x = rand_coils(np.random.default_rng(0), 2, 8, 8)
    assert torch.equal(prox_image_apply(store.base[0].G, x), x)
    store2 = init_params(NetSpec(m=1, c=4, d=4, width=4), seed=1)
    y = rand_coils(np.random.default_rng(1), 4, 32, 32)
    assert prox_image_apply(store2.base[0].G, y).shape == y.shape


def test_prox_kspace_identity_and_parseval_at_zero_weights():
    store = init_params(SPEC, seed=2)
    zero_net(store.base[0].K)
    x = rand_coils(np.random.default_rng(2), 2, 8, 8)
    out = prox_kspace_apply(store.base[0].K, x)
    assert (out - x).abs().max() < 1e-12
    assert abs(out.norm().item() - x.norm().item()) < 1e-12


def test_coil_combine_shape_and_channel_check():
    store = init_params(SPEC, seed=3)
    x = rand_coils(np.random.default_rng(3), 2, 8, 8)
    out = coil_combine(store.base[0].J, x)
    assert out.shape == (8, 8, 2)
    with pytest.raises(ShapeError):
        coil_combine(store.base[0].J, rand_coils(np.random.default_rng(0), 3, 8, 8))


def test_meta_forward_channels_and_order_sensitivity():
    store = init_params(SPEC, seed=4)
    rng = np.random.default_rng(4)
    a = torch.from_numpy(rng.standard_normal((8, 8, 2)))
    b = torch.from_numpy(rng.standard_normal((8, 8, 2)))
    feat = meta_forward(store.meta.H, [a, b])
    assert feat.shape == (SPEC.d, 8, 8)
    swapped = meta_forward(store.meta.H, [b, a])
    assert not torch.allclose(feat, swapped)
    with pytest.raises(ShapeError):
        meta_forward(store.meta.H, [a])


def test_meta_distribute_reads_slot_plus_refinement():
    store = init_params(SPEC, seed=5)
    feat = torch.rand(SPEC.d, 8, 8, dtype=torch.float64)  # nonnegative slots
    out = meta_distribute(store.base[0].Z, feat, slot=2)
    assert out.shape == (8, 8)
    # final layer starts at zero, so the head passes its slot through exactly
    assert torch.equal(out, feat[2])
    # the head clamps at zero, matching the nonnegative rss target
    assert torch.all(meta_distribute(store.base[0].Z, -feat, slot=2) == 0)
    with torch.no_grad():
        store.base[0].Z[-1][0].uniform_(-0.1, 0.1)
    refined = meta_distribute(store.base[0].Z, feat, slot=2)
    assert not torch.allclose(refined, feat[2])


def test_composition_starts_at_rss_identity():
    # with fresh weights the J -> H -> Z chain reproduces each task's rss
    store = init_params(SPEC, seed=7)
    rng = np.random.default_rng(7)
    xs = [rand_coils(rng, 2, 8, 8) for _ in range(2)]
    from metarecon.mri_physics import rss

    combined = [coil_combine(store.base[i].J, xs[i]) for i in range(2)]
    for x, cmb in zip(xs, combined):
        assert torch.equal(cmb[..., 0], rss(x))
        assert torch.all(cmb[..., 1] == 0)
    feat = meta_forward(store.meta.H, combined)
    for i in range(2):
        assert torch.equal(meta_distribute(store.base[i].Z, feat, i), rss(xs[i]))


def test_init_recon_hard_data_fidelity():
    store = init_params(SPEC, seed=6)
    rng = np.random.default_rng(6)
    mask = make_mask(8, 8, ar=2, acs_lines=2, seed=0)
    f = fft2c(rand_coils(rng, 2, 8, 8)) * mask.array[..., None]
    x0 = init_recon(store.base[0].init, f, mask)
    resampled = fft2c(x0) * mask.array[..., None]
    assert (resampled - f).abs().max() < 1e-12


def test_init_recon_full_mask_and_zero_weights():
    store = init_params(SPEC, seed=7)
    rng = np.random.default_rng(7)
    ones = torch.ones(8, 8, dtype=torch.float64)
    x = rand_coils(rng, 2, 8, 8)
    f = fft2c(x)
    from metarecon.numerics import ifft2c

    assert (init_recon(store.base[0].init, f, ones) - ifft2c(f)).abs().max() < 1e-12
    zero_net(store.base[0].init)
    mask = make_mask(8, 8, ar=2, acs_lines=2, seed=1)
    fm = f * mask.array[..., None]
    zf = zero_filled(fm, mask)
    assert (init_recon(store.base[0].init, fm, mask) - zf).abs().max() < 1e-12


@pytest.mark.parametrize("family", ["G", "K", "J", "Z", "H"])
def test_gradients_match_finite_diff(family):
    store = init_params(SPEC, seed=8)
    rng = np.random.default_rng(8)
    xs = [rand_coils(rng, 2, 8, 8) for _ in range(2)]
    feat_fixed = torch.from_numpy(rng.standard_normal((SPEC.d, 8, 8)))

    if family == "H":
        params = {
            n: p for n, p in meta_param_dict(store).items() if n.startswith("meta.H")
        }
    else:
        net = getattr(store.base[0], family)
        params = {f"{family}{l}": w for l, (w, _) in enumerate(net)}

    def probe():
        if family == "G":
            out = prox_image_apply(store.base[0].G, xs[0])
        elif family == "K":
            out = prox_kspace_apply(store.base[0].K, xs[0])
        elif family == "J":
            out = coil_combine(store.base[0].J, xs[0])
        elif family == "Z":
            out = meta_distribute(store.base[0].Z, feat_fixed)
        else:
            combined = [coil_combine(store.base[i].J, xs[i]) for i in range(2)]
            out = meta_forward(store.meta.H, combined)
        return (out * out).sum()

    analytic = {
        n: g
        for n, g in zip(
            params,
            torch.autograd.grad(probe(), list(params.values()), allow_unused=True),
        )
    }
    coords = {}
    gen = np.random.default_rng(42)
    for n, p in params.items():
        take = min(7, p.numel())
        coords[n] = gen.choice(p.numel(), size=take, replace=False).tolist()
    fd = finite_diff_gradient(probe, params, h=1e-5, coords=coords)
    checked = 0
    for n in params:
        a = analytic[n] if analytic[n] is not None else torch.zeros_like(fd[n])
        for idx in coords[n]:
            av = a.reshape(-1)[idx].item()
            fv = fd[n].reshape(-1)[idx].item()
            assert abs(av - fv) / max(abs(av), abs(fv), 1e-3) < 1e-6
            checked += 1
    assert checked >= 20


def test_parameter_group_separation():
    store = init_params(SPEC, seed=9)
    rng = np.random.default_rng(9)
    x = rand_coils(rng, 2, 8, 8)
    base_only = (prox_image_apply(store.base[0].G, x) ** 2).sum()
    meta_grads = torch.autograd.grad(
        base_only, list(meta_param_dict(store).values()), allow_unused=True
    )
    assert all(g is None for g in meta_grads)
    combined = [torch.from_numpy(rng.standard_normal((8, 8, 2))) for _ in range(2)]
    meta_only = (meta_forward(store.meta.H, combined) ** 2).sum()
    base_grads = torch.autograd.grad(
        meta_only, list(task_param_dict(store, 0).values()), allow_unused=True
    )
    assert all(g is None for g in base_grads)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = init_params(SPEC, seed=10)
    extra = {
        "task0.rho.m": torch.randn(SPEC.T, dtype=torch.float64),
        "task0.rho.v": torch.rand(SPEC.T, dtype=torch.float64),
        "adam.meta.step": torch.tensor(7.0, dtype=torch.float64),
    }
    path = tmp_path / "model.mrck"
    save_checkpoint(path, store, extra=extra)
    loaded, rest = load_checkpoint(path)
    fa, fb = flatten_params(store), flatten_params(loaded)
    assert fa.keys() == fb.keys()
    for k in fa:
        assert torch.equal(fa[k], fb[k]), k
    for k, v in extra.items():
        assert torch.equal(rest[k], v)
    assert loaded.spec == store.spec


def test_checkpoint_error_types(tmp_path):
    store = init_params(NetSpec(m=1, c=1, d=2, width=2, T=1, r=1), seed=0)
    path = tmp_path / "model.mrck"
    save_checkpoint(path, store)
    raw = path.read_bytes()

    bad = tmp_path / "bad_magic.mrck"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)

    vers = tmp_path / "bad_version.mrck"
    vers.write_bytes(raw[:4] + b"\x63\x00\x00\x00" + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(vers)

    trunc = tmp_path / "truncated.mrck"
    trunc.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(trunc)
