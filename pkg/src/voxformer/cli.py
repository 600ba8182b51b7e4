"""``voxformer`` command line: scene generation, training, reconstruction, verification, benchmark."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .config import PipelineConfig, apply_thread_limit, set_deterministic, set_precision, tiny_config

log = logging.getLogger("voxformer")

CONFIG_NAME = "config.yaml"
CHECKPOINT_NAME = "checkpoint.vfck"


def _load_config(path, fallback_dir=None) -> PipelineConfig:
    if path:
        return PipelineConfig.load(path)
    if fallback_dir is not None and (Path(fallback_dir) / CONFIG_NAME).exists():
        return PipelineConfig.load(Path(fallback_dir) / CONFIG_NAME)
    return tiny_config()


def cmd_gen_scene(args) -> int:
    from .scene import default_scene, gen_scene, save_scene

    data = gen_scene(default_scene(seed=args.seed))
    root = save_scene(data, args.out)
    log.info("wrote scene with %d views to %s", len(data.views), root)
    return 0


def cmd_train_tiny(args) -> int:
    from .scene import load_scene
    from .tensorio import save_checkpoint
    from .train import train_tiny, windowed_trend

    cfg = _load_config(args.config)
    cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_scene(args.scene)
    result = train_tiny(data, cfg, log_every=args.log_every)
    save_checkpoint(result.model, out / CHECKPOINT_NAME)
    cfg.save(out / CONFIG_NAME)
    with open(out / "loss_curve.csv", "w") as fh:
        keys = list(result.parts[0]) if result.parts else []
        fh.write(",".join(["step", "total", *keys]) + "\n")
        for step, (loss, parts) in enumerate(zip(result.losses, result.parts)):
            fh.write(",".join([str(step), f"{loss:.8g}", *(f"{parts[k]:.8g}" for k in keys)]) + "\n")
    trend = windowed_trend(result.losses)
    drops = sum(b < a for a, b in zip(trend, trend[1:]))
    summary = {
        "steps": len(result.losses),
        "seconds": result.seconds,
        "first_loss": result.losses[0] if result.losses else None,
        "final_loss": result.losses[-1] if result.losses else None,
        "window_means": trend,
        "decreasing_windows": f"{drops}/{max(0, len(trend) - 1)}",
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("trained %d steps in %.1f s, loss %.4f -> %.4f", summary["steps"], result.seconds,
             summary["first_loss"] or 0.0, summary["final_loss"] or 0.0)
    return 0


def cmd_reconstruct(args) -> int:
    from .mesh import write_ply
    from .pipeline import Reconstructor
    from .scene import load_scene
    from .tensorio import load_checkpoint
    from .train import reconstruct

    ckpt = Path(args.checkpoint)
    cfg = _load_config(args.config, ckpt.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    data = load_scene(args.scene)
    load_s = time.perf_counter() - start
    model = load_checkpoint(Reconstructor(cfg), ckpt)
    model.eval()
    rec = reconstruct(model, data, samples=args.samples, seed=args.seed, tau=args.tau)
    write_ply(rec.mesh, out / "mesh.ply")
    timings = {"load_s": load_s, **rec.timings}
    with open(out / "timing.log", "w") as fh:
        for k, v in timings.items():
            fh.write(f"{k} {v:.4f}\n")
    if rec.metrics is None:
        log.warning("no surface extracted; metrics unavailable")
        (out / "metrics.json").write_text(json.dumps({"error": "empty mesh"}))
        return 1
    (out / "metrics.json").write_text(rec.metrics.to_json())
    (out / "metrics.txt").write_text(rec.metrics.to_text())
    sys.stdout.write(rec.metrics.to_text())
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_verify

    known = {module for module, _, _ in SUITES}
    unknown = sorted(set(args.module or ()) - known)
    if unknown:
        log.error("unknown module %s; choose from %s", ", ".join(unknown), ", ".join(sorted(known)))
        return 2
    report = run_verify(seed=args.seed, modules=args.module or None)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    from .bench import run_bench

    dims = args.dims if len(args.dims) == 3 else args.dims * 3
    report = run_bench(tuple(dims), args.occupancy, args.window, args.trials, seed=args.seed, time_ops=not args.no_timing)
    text = report.to_json()
    sys.stdout.write(text + "\n")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true", help="serial reductions, one thread")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voxformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common], help="render a synthetic scene to a directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train-tiny", parents=[common], help="overfit the pipeline on one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_tiny)

    p = sub.add_parser("reconstruct", parents=[common], help="mesh a scene with a trained checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--tau", type=float, default=0.05)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("verify", parents=[common], help="run the oracle and invariant suites")
    p.add_argument("--config", help="accepted for symmetry; suites build their own inputs")
    p.add_argument("--module", action="append", help="restrict to a module (repeatable)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="sparse vs dense attention pair counts")
    p.add_argument("--dims", type=int, nargs="+", default=[100])
    p.add_argument("--occupancy", type=float, default=0.1)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")
    apply_thread_limit()
    set_precision(args.precision)
    if args.deterministic:
        set_deterministic(True)
    torch.manual_seed(args.seed)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
