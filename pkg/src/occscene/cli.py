"""Command-line entry point: ``occscene <command> [flags]``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import numcore
from .config import Config, apply_overrides, load_config
from .errors import (
    ConfigHashMismatch,
    FormatError,
    InsufficientSamples,
    InvalidConfig,
    InvalidSpec,
    NonFiniteValue,
    NonPsd,
    OccSceneError,
    ShapeMismatch,
    UnknownToken,
)

log = logging.getLogger("occscene")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
METRIC_FIELDS = ("kind", "step", "epoch", "stage", "mode", "L_LDM", "L_p", "total", "miou", "config_hash")


def _config(args) -> Config:
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def _histogram_line(samples, num_classes) -> str:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += s.grid.histogram()[:num_classes]
    total = max(int(counts.sum()), 1)
    return "  ".join(f"class {c}: {n} ({100.0 * n / total:.1f}%)" for c, n in enumerate(counts))


def _read_data(path):
    from .synthworld import read_dataset

    return read_dataset(path)


# ----- gen-data


def cmd_gen_data(args) -> int:
    from .synthworld import generate_dataset, write_dataset
    from .synthworld.dataset import sample_seeds

    cfg = _config(args)
    if args.count < 0:
        raise InvalidConfig("--count must be nonnegative")
    samples = generate_dataset(cfg.world, args.count, args.seed, args.split)
    manifest = write_dataset(samples, args.out, cfg.hash(), sample_seeds(args.seed, args.count, args.split))
    print(f"wrote {manifest['count']} samples to {args.out} ({manifest['file_size']} bytes, config {cfg.hash()[:12]})")
    print(_histogram_line(samples, cfg.world.num_classes))
    return EXIT_OK


# ----- train


def _write_metrics(history, path, mode, cfg_hash):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            kind = "epoch" if "miou" in row else "step"
            out = {k: row.get(k, "") for k in METRIC_FIELDS}
            out.update(kind=kind, mode=mode, config_hash=cfg_hash)
            w.writerow(out)


def cmd_train(args) -> int:
    from .engine import Trainer, class_weights_for, load_checkpoint, make_batch

    samples = _read_data(args.data)
    if not samples:
        raise InvalidConfig("training data is empty")
    val = make_batch(_read_data(args.val)) if args.val else None
    if args.resume:
        expect = None
        if args.config or args.set or args.mode:
            cfg = _config(args)
            if args.mode:
                cfg = apply_overrides(cfg, [f"train.mode={args.mode}"])
            expect = cfg.hash()
        trainer = load_checkpoint(args.resume, expect_hash=expect, strict=True)
        cfg = trainer.cfg
        print(f"resumed at step {trainer.step}")
    else:
        cfg = _config(args)
        if args.mode:
            cfg = apply_overrides(cfg, [f"train.mode={args.mode}"])
        trainer = Trainer(cfg, class_weights_for(samples, cfg))
    data = make_batch(samples)
    spe = trainer.steps_per_epoch(len(data))

    def report(row):
        if args.verbose or (row["step"] + 1) % spe == 0:
            print(f"step {row['step']} stage {row['stage']} L_LDM {row['L_LDM']:.5f} L_p {row['L_p']:.5f} total {row['total']:.5f}")

    t0 = time.perf_counter()
    trainer.fit(data, val, max_steps=args.max_steps, on_step=report)
    trainer.save(args.out)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    _write_metrics(trainer.history, metrics, cfg.train.mode, cfg.hash())
    print(f"trained to step {trainer.step} in {time.perf_counter() - t0:.1f}s; checkpoint {args.out}, metrics {metrics}")
    return EXIT_OK


# ----- sample


def parse_spec(text: str):
    """A scene spec from an integer seed, a JSON object, or a path to a JSON file."""
    from .synthworld import SceneSpec, random_spec

    text = text.strip()
    try:
        return random_spec(int(text))
    except ValueError:
        pass
    if not text.startswith("{"):
        p = Path(text)
        if not p.is_file():
            raise InvalidSpec(f"spec {text!r} is neither a seed, a JSON object nor a file")
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"spec is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or "seed" not in data:
        raise InvalidSpec("spec object needs at least a 'seed'")
    unknown = set(data) - {"seed", "density", "object_counts"}
    if unknown:
        raise InvalidSpec(f"unknown spec keys {sorted(unknown)}")
    return SceneSpec(int(data["seed"]), data.get("object_counts", {}), data.get("density", "medium"))


def _write_png(path, img):
    from PIL import Image

    Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path, optimize=False)


def cmd_sample(args) -> int:
    from .engine import SamplingNets, load_checkpoint, sample, to_image_space
    from .synthworld import OccupancyGrid, Sample, default_camera, make_trajectory, write_dataset

    t_start = time.perf_counter()
    trainer = load_checkpoint(args.checkpoint)
    cfg = trainer.cfg
    spec = parse_spec(args.spec)
    n = cfg.world.frames if args.frames is None else args.frames
    if not 1 <= n <= cfg.world.frames:
        raise InvalidSpec(f"--frames must lie in [1, {cfg.world.frames}]")
    steps = args.steps or cfg.sample.steps
    w = cfg.world
    start = default_camera(tuple(w.grid_dims), w.voxel_size, w.image_size, w.focal, w.camera_height, w.camera_pitch)
    cams = make_trajectory(start, n, w.trajectory_step)
    flats = torch.as_tensor(np.stack([c.flat for c in cams]), dtype=torch.float32)

    nets = SamplingNets(trainer.denoiser, trainer._conditioning_net() or trainer.perception)
    times = []
    last = [time.perf_counter()]

    def tick(i):
        now = time.perf_counter()
        times.append(now - last[0])
        last[0] = now
        if not args.quiet:
            print(f"step {steps - i}/{steps} {1000 * times[-1]:.1f} ms")

    y, occ = sample(nets, spec.tokens[None], flats[None], steps, trainer.sched, args.seed, on_step=tick)
    if not numcore.is_finite(y):
        raise NonFiniteValue("sampled frames are not finite")
    frames = to_image_space(y[0]).numpy().astype(np.float32)  # (N, H, W, 3)
    labels = occ[0].argmax(0).numpy().astype(np.uint8)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames):
        if args.format == "png":
            _write_png(out / f"frame_{i:03d}.png", img)
        else:
            np.save(out / f"frame_{i:03d}.npy", img)
    grid = OccupancyGrid(labels, w.voxel_size, w.num_classes)
    write_dataset([Sample(frames, cams, grid, spec)], out / "scene.osd", cfg.hash(), [args.seed])
    meta = {
        "config_hash": cfg.hash(),
        "spec": {"seed": spec.seed, "density": spec.density, "object_counts": {str(k): v for k, v in spec.object_counts.items()}},
        "frames": n,
        "steps": steps,
        "seed": args.seed,
        "format": args.format,
    }
    (out / "sample.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    total = time.perf_counter() - t_start
    print(f"sampled {n} frame(s) in {steps} steps: {sum(times):.3f}s sampling, {total:.3f}s total; wrote {out}")
    return EXIT_OK


# ----- eval


def cmd_eval(args) -> int:
    from .engine import load_checkpoint, make_batch
    from .evaluation import FeatureExtractor, desk_fid, desk_fvd, evaluate_trainer

    cfg = _config(args)
    reference = make_batch(_read_data(args.data))
    report = {}
    if args.generated:
        gen = make_batch(_read_data(args.generated))
        fx = FeatureExtractor(cfg.eval.feature_dim, cfg.eval.seed)
        report["desk_fid"] = desk_fid(gen.frames, reference.frames, fx)
        report["desk_fvd"] = desk_fvd(gen.frames, reference.frames, fx)
        report["config_hash"] = cfg.hash()
    if args.checkpoint:
        trainer = load_checkpoint(args.checkpoint)
        if args.generated:
            report["miou"] = trainer.evaluate_miou(reference)
        else:
            m = evaluate_trainer(trainer, reference, args.steps or trainer.cfg.sample.steps, trainer.cfg.eval)
            report.update(desk_fid=m["desk_fid"], desk_fvd=m["desk_fvd"], miou=m["miou"])
        report["config_hash"] = trainer.cfg.hash()
    if not report:
        raise InvalidConfig("eval needs --checkpoint, --generated, or both")
    report["proxy_features"] = True
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# ----- ablate


def cmd_ablate(args) -> int:
    from .engine import make_batch
    from .evaluation import DEFAULT_SUITE, ordering_checks, reports_to_csv, run_ablation
    from .synthworld import generate_dataset

    cfg = _config(args)
    suite = tuple(args.suite.split(",")) if args.suite else DEFAULT_SUITE
    if args.data:
        train_samples = _read_data(args.data)
    else:
        train_samples = generate_dataset(cfg.world, cfg.data.train_count, cfg.data.seed, "train")
    if args.val:
        val_samples = _read_data(args.val)
    else:
        val_samples = generate_dataset(cfg.world, cfg.data.val_count, cfg.data.seed, "val")
    train, val = make_batch(train_samples), make_batch(val_samples)

    def progress(rep, reports):
        print(f"{rep.variant}: desk-FID {rep.desk_fid:.4f} desk-FVD {rep.desk_fvd:.4f} mIoU {rep.miou:.4f} ({rep.seconds:.1f}s)")
        reports_to_csv(reports, args.out)

    reports = run_ablation(suite, cfg, train, val, args.budget_steps, on_report=progress)
    reports_to_csv(reports, args.out)
    checks = ordering_checks(reports)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(checks.values()) else EXIT_NUMERIC


# ----- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_suite

    cfg = _config(args)
    names = args.case or None
    for n in names or ():
        if n not in CASES:
            raise InvalidConfig(f"unknown gradient case {n!r}")
    dtypes = {"both": (torch.float64, torch.float32), "float64": (torch.float64,), "float32": (torch.float32,)}[args.dtype]

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} {r.dtype:8s} max rel err {r.max_rel_err:.2e} (tol {r.tol:.0e}, {r.trials} inputs, {r.seconds:.2f}s)")

    t0 = time.perf_counter()
    results = run_suite(cfg, args.trials, args.seed, dtypes, names, on_result=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s (config {cfg.hash()[:12]})")
    return EXIT_NUMERIC if failed else EXIT_OK


# ----- parser


def _add_config(p):
    p.add_argument("--config", help="JSON config file; defaults apply to missing keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. train.seed=3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occscene", description="Occupancy-conditioned scene generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", help="split name mixed into the per-sample seeds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the generator and perception model")
    _add_config(p)
    p.add_argument("--data", required=True, help="training dataset container")
    p.add_argument("--val", help="validation container for per-epoch mIoU")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=("mutual", "independent"))
    p.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this global step (for staged runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate frames and occupancy for a scene spec")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True, help="integer seed, JSON object, or JSON file")
    p.add_argument("--frames", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "raw"), default="png")
    p.add_argument("--quiet", action="store_true", help="suppress per-step timing lines")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="desk-FID / desk-FVD / mIoU report")
    _add_config(p)
    p.add_argument("--data", required=True, help="reference dataset container")
    p.add_argument("--checkpoint")
    p.add_argument("--generated", help="container of generated clips to compare instead of sampling")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="write the JSON report here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation suite")
    _add_config(p)
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--suite", help="comma-separated variant names")
    p.add_argument("--budget-steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_config(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("both", "float64", "float32"), default="both")
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (NonFiniteValue, NonPsd)):
        return EXIT_NUMERIC
    if isinstance(exc, (InvalidConfig, InvalidSpec, UnknownToken, ShapeMismatch, ConfigHashMismatch,
                        InsufficientSamples, OccSceneError, ValueError)):
        return EXIT_INPUT
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    numcore.set_threads_from_env()
    try:
        return args.func(args)
    except Exception as exc:  # mapped to the documented exit codes
        code = exit_code_for(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
