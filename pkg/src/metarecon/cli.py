"""Command-line front end: synth / train / reconstruct / eval / gradcheck.

Every run reads one flat JSON config (defaults below), applies flag
overrides, validates everything up front, then echoes the effective config
into the output directory so the run can be reproduced from that file
alone. Training checkpoints land in ``checkpoints/`` (one per epoch; the
single-task mode nests one directory per task), metrics accumulate in
``metrics.csv``, and reconstructions in ``recon/`` as single-slice dataset
files plus grayscale PNG previews.
"""

from __future__ import annotations

import dataclasses
import glob
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
import torch

from . import networks
from .errors import FormatError, ParameterError, ShapeError, SizingError
from .metrics import nmse, psnr, ssim
from .mri_physics import MultiCoilImage, rss
from .networks import (
    NetSpec,
    flatten_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import _admissible_extent, gradcheck
from .synth_data import (
    DEFAULT_TASK_NAMES,
    SliceData,
    TaskDataset,
    build_dataset,
    default_spec,
    read_dataset,
    write_dataset,
)
from .trainer import (
    TrainConfig,
    append_metrics_csv,
    init_train_state,
    meta_train_epoch,
    optstate_records,
    sample_volume,
    stl_train_epoch,
    total_loss,
    _forward_losses,
)
from .unroll import ReconConfig, reconstruct, reconstruct_stl

GRADCHECK_TOL = 1e-5


@dataclass
class RunConfig:
    """Flat bag of every tunable; JSON keys match the field names."""

    T: int = 5
    r: int = 5
    k_inner: int = 10
    epochs: int = 100
    beta: float = 1e-4
    alphas: tuple = (5e-4, 2e-4, 5e-4, 2e-4)
    rho0: float = 0.5
    delta0: float = 0.5
    lam: float = 1e-4
    mu: float = 1.0
    d: int = 32
    width: int = 32
    kernel: int = 3
    ar: float = 4.0
    noise_sigma: float = 0.005
    H: int = 48
    W: int = 48
    c: int = 4
    m: int = 4
    batch: int = 4
    seed: int = 0
    train_slices: int = 8
    test_slices: int = 2
    data_dir: str = "data"
    out_dir: str = "run"


_INT_FIELDS = {
    "T", "r", "k_inner", "epochs", "d", "width", "kernel", "H", "W", "c", "m",
    "batch", "seed", "train_slices", "test_slices",
}


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file, then CLI flag overrides."""
    values = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    merged = dict(values)
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ParameterError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ParameterError(f"config {path} must hold a JSON object")
        for k, v in data.items():
            if k not in merged:
                raise ParameterError(f"unknown config key {k!r}")
            merged[k] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    for k in _INT_FIELDS:
        merged[k] = int(merged[k])
    for k in ("beta", "rho0", "delta0", "lam", "mu", "ar", "noise_sigma"):
        merged[k] = float(merged[k])
    merged["alphas"] = tuple(float(a) for a in merged["alphas"])
    return RunConfig(**merged)


def validate_config(cfg: RunConfig) -> None:
    """Fail fast on anything a module would reject later."""
    for n, label in ((cfg.H, "H"), (cfg.W, "W")):
        if not _admissible_extent(n):
            raise ParameterError(
                f"{label}={n} is not a supported FFT extent (even, factors 2 and 3 only)"
            )
    if not 1 <= cfg.m <= len(DEFAULT_TASK_NAMES):
        raise ParameterError(
            f"m={cfg.m} out of range: the built-in phantom provides up to "
            f"{len(DEFAULT_TASK_NAMES)} contrasts"
        )
    if len(cfg.alphas) < cfg.m:
        raise ParameterError(f"{len(cfg.alphas)} task learning rates for m={cfg.m} tasks")
    if cfg.train_slices < 1 or cfg.test_slices < 1:
        raise ParameterError("train_slices and test_slices must be positive")
    if cfg.ar < 1:
        raise ParameterError(f"acceleration rate must be >= 1, got {cfg.ar}")
    if cfg.noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be nonnegative, got {cfg.noise_sigma}")
    if cfg.epochs < 1:
        raise ParameterError(f"epochs must be positive, got {cfg.epochs}")
    net_spec(cfg, meta=True)  # raises on bad T/r/d/width/kernel combinations
    train_config(cfg)


def net_spec(cfg: RunConfig, meta: bool) -> NetSpec:
    return NetSpec(
        m=cfg.m if meta else 1,
        c=cfg.c,
        d=cfg.d,
        width=cfg.width,
        kernel=cfg.kernel,
        T=cfg.T,
        r=cfg.r,
        rho0=cfg.rho0,
        delta0=cfg.delta0,
        meta=meta,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        k_inner=cfg.k_inner,
        beta=cfg.beta,
        alphas=cfg.alphas,
        lam=cfg.lam,
        mu=cfg.mu,
        batch=cfg.batch,
        seed=cfg.seed,
    )


def task_names(cfg: RunConfig):
    return DEFAULT_TASK_NAMES[: cfg.m]


def echo_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = dataclasses.asdict(cfg)
    payload["alphas"] = list(payload["alphas"])
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_png(path, img) -> None:
    """8-bit grayscale preview, normalized to the image's own range."""
    from PIL import Image

    a = np.asarray(img.detach().cpu(), dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------- subcommands


def _synth_datasets(cfg: RunConfig, split: str):
    """Regenerate a split (pure function of the config)."""
    offset = 0 if split == "train" else cfg.train_slices
    n = cfg.train_slices if split == "train" else cfg.test_slices
    phantom = default_spec(cfg.H, cfg.W, seed=cfg.seed)
    return [
        build_dataset(
            phantom, contrast=i, task_id=i, name=name, c=cfg.c, ar=cfg.ar,
            noise_sigma=cfg.noise_sigma, n_slices=n, seed=cfg.seed + i,
            slice_offset=offset,
        )
        for i, name in enumerate(task_names(cfg))
    ]


def _test_datasets_at(cfg: RunConfig, ar: float):
    sub = dataclasses.replace(cfg, ar=float(ar))
    return _synth_datasets(sub, "test")


def cmd_synth(cfg: RunConfig) -> int:
    os.makedirs(cfg.data_dir, exist_ok=True)
    echo_config(cfg, cfg.data_dir)
    for split in ("train", "test"):
        for ds in _synth_datasets(cfg, split):
            path = os.path.join(cfg.data_dir, f"{ds.name}_{split}.mrds")
            write_dataset(ds, path)
            print(f"wrote {path} ({len(ds.slices)} slices, ar={ds.ar})")
    return 0


def _load_train_sets(cfg: RunConfig):
    sets = []
    for i, name in enumerate(task_names(cfg)):
        path = os.path.join(cfg.data_dir, f"{name}_train.mrds")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} (run `metarecon synth` first)")
        ds = read_dataset(path)
        ds.task_id = i
        sets.append(ds)
    return sets


def cmd_train(cfg: RunConfig, mode: str) -> int:
    datasets = _load_train_sets(cfg)
    echo_config(cfg, cfg.out_dir)
    ck_root = os.path.join(cfg.out_dir, "checkpoints")
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")
    tcfg = train_config(cfg)

    if mode == "mtml":
        os.makedirs(ck_root, exist_ok=True)
        store = init_params(net_spec(cfg, meta=True), seed=cfg.seed)
        state = init_train_state(store)
        for e in range(cfg.epochs):
            rows = meta_train_epoch(datasets, store, state, tcfg, epoch=e)
            append_metrics_csv(csv_path, e, rows)
            save_checkpoint(
                os.path.join(ck_root, f"epoch_{e:03d}.mrck"),
                store,
                extra=optstate_records(store, state),
            )
            loss = sum(r["loss"] for r in rows)
            print(f"epoch {e}: total loss {loss:.5f}")
        return 0

    # single-task baseline: one independent model per task
    for i, ds in enumerate(datasets):
        ck_dir = os.path.join(ck_root, ds.name)
        os.makedirs(ck_dir, exist_ok=True)
        store = init_params(net_spec(cfg, meta=False), seed=cfg.seed + i)
        state = init_train_state(store)
        task_cfg = dataclasses.replace(tcfg, alphas=(cfg.alphas[i],))
        for e in range(cfg.epochs):
            row = stl_train_epoch(ds, store, state, task_cfg, epoch=e)
            append_metrics_csv(csv_path, e, [row])
            save_checkpoint(
                os.path.join(ck_dir, f"epoch_{e:03d}.mrck"),
                store,
                extra=optstate_records(store, state),
            )
        print(f"task {ds.name}: final loss {row['loss']:.5f}")
    return 0


def _latest(pattern: str) -> str:
    hits = sorted(glob.glob(pattern))
    if not hits:
        raise FileNotFoundError(f"no checkpoint matches {pattern}")
    return hits[-1]


def load_models(checkpoint: str, names):
    """One shared store (file or run dir) or per-task stores (nested run dir).

    Returns (mode, stores): "mtml" with a single entry, or "stl" with one
    store per task name.
    """
    if os.path.isfile(checkpoint):
        store, extra = load_checkpoint(checkpoint)
        return ("mtml" if store.meta is not None else "stl"), [store]
    root = checkpoint
    if os.path.isdir(os.path.join(root, "checkpoints")):
        root = os.path.join(root, "checkpoints")
    flat = sorted(glob.glob(os.path.join(root, "epoch_*.mrck")))
    if flat:
        store, _ = load_checkpoint(flat[-1])
        return ("mtml" if store.meta is not None else "stl"), [store]
    stores = []
    for name in names:
        path = _latest(os.path.join(root, name, "epoch_*.mrck"))
        store, _ = load_checkpoint(path)
        stores.append(store)
    return "stl", stores


def _reconstruct_tasks(cfg: RunConfig, mode: str, stores, datasets):
    """Batched reconstructions of every slice: list of (x_T, xhat) per task."""
    fs = [torch.stack([s.kspace.data for s in ds.slices]) for ds in datasets]
    masks = [ds.slices[0].mask for ds in datasets]
    if mode == "mtml":
        store = stores[0]
        if len(datasets) != len(store.base):
            raise ParameterError(
                f"checkpoint holds {len(store.base)} tasks, config asks for {len(datasets)}"
            )
        out = reconstruct(fs, masks, store, ReconConfig(T=store.spec.T, r=store.spec.r, m=len(fs)))
        return [(out.x_T[i].detach(), out.xhat[i].detach()) for i in range(len(fs))]
    results = []
    for i, store in enumerate(stores):
        rcfg = ReconConfig(T=store.spec.T, r=store.spec.r, m=1)
        (x_T,) = reconstruct_stl([fs[i]], [masks[i]], store, rcfg)
        results.append((x_T.detach(), rss(x_T).detach()))
    return results


def cmd_reconstruct(cfg: RunConfig, checkpoint: str) -> int:
    names = task_names(cfg)
    mode, stores = load_models(checkpoint, names)
    datasets = _test_datasets_at(cfg, cfg.ar)
    echo_config(cfg, cfg.out_dir)
    recon_dir = os.path.join(cfg.out_dir, "recon")
    os.makedirs(recon_dir, exist_ok=True)

    results = _reconstruct_tasks(cfg, mode, stores, datasets)
    csv_path = os.path.join(recon_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write("task,slice,psnr,ssim,nmse\n")
        for ds, (x_T, xhat) in zip(datasets, results):
            for j, s in enumerate(ds.slices):
                rec = TaskDataset(
                    task_id=ds.task_id, name=ds.name, ar=ds.ar,
                    noise_sigma=ds.noise_sigma, seed=ds.seed,
                )
                rec.slices.append(
                    SliceData(
                        coils=MultiCoilImage(x_T[j]),
                        kspace=s.kspace,
                        mask=s.mask,
                        xstar=xhat[j],  # reconstruction in the image slot
                    )
                )
                stem = os.path.join(recon_dir, f"{ds.name}_{j:02d}")
                write_dataset(rec, stem + ".mrds")
                save_png(stem + ".png", xhat[j])
                save_png(stem + "_ref.png", s.xstar)
                p = psnr(xhat[j], s.xstar)
                ss = float(ssim(xhat[j], s.xstar).detach())
                nm = nmse(xhat[j], s.xstar)
                fh.write(f"{ds.name},{j},{p:.10g},{ss:.10g},{nm:.10g}\n")
                print(f"{ds.name} slice {j}: PSNR {p:.2f} dB, SSIM {ss:.4f}, NMSE {nm:.5f}")
    print(f"wrote {recon_dir}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, ars) -> int:
    names = task_names(cfg)
    mode, stores = load_models(checkpoint, names)
    echo_config(cfg, cfg.out_dir)
    csv_path = os.path.join(cfg.out_dir, "eval.csv")
    header = f"{'task':<10} {'PSNR':>8} {'SSIM':>8} {'NMSE':>9}"
    with open(csv_path, "w") as fh:
        fh.write("mode,ar,task,psnr,ssim,nmse\n")
        for ar in ars:
            datasets = _test_datasets_at(cfg, ar)
            results = _reconstruct_tasks(cfg, mode, stores, datasets)
            print(f"\n[{mode}] AR {ar:g}")
            print(header)
            for ds, (_, xhat) in zip(datasets, results):
                xstar = torch.stack([s.xstar for s in ds.slices])
                p = psnr(xhat, xstar)
                ss = float(ssim(xhat, xstar).detach())
                nm = nmse(xhat, xstar)
                print(f"{ds.name:<10} {p:8.2f} {ss:8.4f} {nm:9.5f}")
                fh.write(f"{mode},{ar:g},{ds.name},{p:.10g},{ss:.10g},{nm:.10g}\n")
    print(f"\nwrote {csv_path}")
    return 0


def gradcheck_suite(seed: int = 0, n_coords: int = 96, h: float = 1e-5) -> dict:
    """FD verification of the training gradient on a tiny two-task instance.

    Samples coordinates across the shared nets, both task weight sets, rho,
    and delta. Two safeguards keep central differences a valid oracle for
    this piecewise-smooth loss: a short warmup epoch first moves parameters
    off their init point (zero biases meet exactly-zero masked k-space rows
    there and park relu inputs on their kink), and every finite-difference
    evaluation is fingerprinted by its relu sign pattern so coordinates
    whose probe interval crosses an activation boundary are skipped rather
    than compared against a slope that does not exist.
    """
    phantom = default_spec(H=16, W=16, seed=seed)
    datasets = [
        build_dataset(
            phantom, contrast=i, task_id=i, name=DEFAULT_TASK_NAMES[i], c=2,
            ar=2.0, noise_sigma=0.01, n_slices=3, seed=seed + i,
        )
        for i in range(2)
    ]
    spec = NetSpec(m=2, c=2, d=4, width=4, T=1, r=1)
    store = init_params(spec, seed=seed)
    state = init_train_state(store)
    cfg = TrainConfig(k_inner=1, beta=1e-3, alphas=(1e-3, 1e-3), batch=2, seed=seed)
    meta_train_epoch(datasets, store, state, cfg, epoch=0)

    rng = np.random.default_rng(seed)
    batches = [sample_volume(ds, 2, rng) for ds in datasets]

    def f():
        _, losses = _forward_losses(batches, store, cfg)
        return total_loss(losses)

    params = flatten_params(store)
    pnames = sorted(params)
    coords: dict = {}
    for _ in range(n_coords):
        name = pnames[int(rng.integers(len(pnames)))]
        idx = int(rng.integers(params[name].numel()))
        coords.setdefault(name, set()).add(idx)
    coords = {n: sorted(s) for n, s in coords.items()}
    # every parameter group must be represented
    for must in ("meta.delta", "task0.rho", "meta.H0.weight", "task1.G0.weight"):
        coords.setdefault(must, [0])

    signs: list = []
    plain_relu = networks.relu

    def recording_relu(x):
        signs.append((x.detach() > 0).flatten())
        return plain_relu(x)

    def probe() -> bytes:
        pattern = torch.cat(signs).numpy().tobytes() if signs else b""
        signs.clear()
        return pattern

    networks.relu = recording_relu
    try:
        return gradcheck(f, params, coords, h=h, probe=probe)
    finally:
        networks.relu = plain_relu


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = gradcheck_suite(seed=cfg.seed)
    print(
        f"checked {report['checked']} coordinates "
        f"({len(report['skipped'])} on activation boundaries, skipped)"
    )
    print(f"max relative error: {report['max_rel']:.3e}")
    if report["worst"] is not None:
        name, i, a, n = report["worst"]
        print(f"worst: {name}[{i}] analytic {a:.6e} vs numeric {n:.6e}")
    if report["checked"] < 50:
        print("error: too few verifiable coordinates", file=sys.stderr)
        return 1
    if report["max_rel"] >= GRADCHECK_TOL:
        print(f"error: exceeds tolerance {GRADCHECK_TOL:g}", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


# ------------------------------------------------------------------ parsing


def _build_parser():
    import argparse

    p = argparse.ArgumentParser(
        prog="metarecon",
        description="multi-task MRI reconstruction: synthesize, train, evaluate",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (config out_dir)")

    sp = sub.add_parser("synth", help="write the synthetic datasets")
    common(sp)
    sp.add_argument("--ar", type=float, help="acceleration rate override")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--mode", choices=("mtml", "stl"), default="mtml")
    sp.add_argument("--ar", type=float, help="acceleration rate override")

    sp = sub.add_parser("reconstruct", help="reconstruct the test split")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint file or run directory")
    sp.add_argument("--ar", type=float, help="acceleration rate override")

    sp = sub.add_parser("eval", help="metric table on the test split")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint file or run directory")
    sp.add_argument(
        "--ar", type=float, action="append",
        help="acceleration rate (repeatable; default 4 5 6)",
    )

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp)
    return p


def run(argv) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    threads = os.environ.get("METARECON_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: METARECON_THREADS={threads!r} is not an integer", file=sys.stderr)
            return 2

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports its own diagnostics
        return int(e.code or 0)

    try:
        overrides = {"seed": getattr(args, "seed", None), "out_dir": getattr(args, "out", None)}
        ar = getattr(args, "ar", None)
        if args.command != "eval" and ar is not None:
            overrides["ar"] = ar
        cfg = load_config(args.config, overrides)
        validate_config(cfg)

        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.mode)
        if args.command == "reconstruct":
            ck = args.checkpoint or cfg.out_dir
            return cmd_reconstruct(cfg, ck)
        if args.command == "eval":
            ck = args.checkpoint or cfg.out_dir
            ars = [float(a) for a in (ar or (4.0, 5.0, 6.0))]
            return cmd_eval(cfg, ck, ars)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        print(f"error: unknown command {args.command!r}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 3
    except (ParameterError, ShapeError, SizingError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
