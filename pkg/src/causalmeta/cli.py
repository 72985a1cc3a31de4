"""Command-line entry point: ``causalmeta <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out`` and finishes by
writing ``manifest.json``; a directory without a manifest is an incomplete
run.
"""

from __future__ import annotations

import argparse
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngs
from .config import ABLATIONS, MODES, ConfigError, ExperimentConfig, dump_config, parse_config
from .io import (CheckpointError, RunManifest, emit_metrics, emit_timing, load_checkpoint,
                 save_checkpoint, write_json, write_matrix)
from .meta import meta_evaluate, meta_train, sinusoid_source
from .models import gram


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: built-in defaults)")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--mode", choices=MODES, help="override the model mode")
    common.add_argument("--ablate", choices=ABLATIONS, help="disable disentangling losses")

    parser = argparse.ArgumentParser(prog="causalmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    sub.add_parser("train", parents=[common], help="meta-train a model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on fresh tasks")
    ev.add_argument("--checkpoint", required=True)
    sub.add_parser("theorem1", parents=[common], help="least-squares weights on the joint setting")
    sub.add_parser("sweep-batch", parents=[common], help="batch size B vs 2B on a confounded world")
    gc = sub.add_parser("gradcheck", parents=[common], help="autodiff vs finite differences")
    gc.add_argument("--nets", type=int, default=50)
    eg = sub.add_parser("export-gram", parents=[common], help="write |Xi^T Xi| of a checkpoint")
    eg.add_argument("--checkpoint", required=True)
    return parser


def load_config(args) -> ExperimentConfig:
    config = parse_config(args.config)
    changes = {k: getattr(args, k) for k in ("seed", "mode", "ablate") if getattr(args, k) is not None}
    return parse_config({**config.to_dict(), **changes}) if changes else config


def _evaluation_tasks(config: ExperimentConfig):
    rng = rngs.stream(config.seed, rngs.EVAL)
    if config.task_kind == "regression":
        return sinusoid_source(config.sinusoid)(rng, config.eval_tasks)
    from .confounder import evaluation_tasks, world_for
    world = world_for(config)
    sw = config.sweep
    return evaluation_tasks(world, world.test_ids, config.eval_tasks, sw.shots, sw.queries, rng)


def cmd_train(config: ExperimentConfig, args, out: Path) -> list[str]:
    source = None
    if config.task_kind == "classification":
        from .confounder import classification_config, world_source
        config = classification_config(config)
        source = world_source(config)
    bundle, rows = meta_train(config, source)
    emit_metrics(rows, out / "metrics.csv", timing=False)
    emit_timing(rows, out / "timing.csv")
    save_checkpoint(bundle, out / "model.ckpt", config.digest())
    last = rows[-1]
    print(f"trained {len(rows)} iterations; final train loss {last.pred_loss:.4f}")
    return ["metrics.csv", "timing.csv", "model.ckpt"]


def cmd_eval(config: ExperimentConfig, args, out: Path) -> list[str]:
    if config.task_kind == "classification":
        from .confounder import classification_config
        config = classification_config(config)
    bundle = load_checkpoint(args.checkpoint, config.digest())
    if bundle.mode != config.mode:
        config = config.replace(mode=bundle.mode)
    result = meta_evaluate(bundle, _evaluation_tasks(config), config)
    write_json(result.to_dict(), out / "eval.json")
    print(f"{result.metric} {result.mean:.4f} +/- {result.half_width:.4f} over {result.n} tasks")
    return ["eval.json"]


def cmd_theorem1(config: ExperimentConfig, args, out: Path) -> list[str]:
    from .confounder import theorem1_experiment
    reports = theorem1_experiment(config)
    write_json([r.to_dict() for r in reports], out / "theorem1.json")
    for r in reports:
        s = r.setting
        print(f"q={s['q']:<4} n={s['n']!s:<10} noncausal_norm={r.noncausal_norm:.6f} "
              f"consistent={r.verdicts['consistent']}")
    return ["theorem1.json"]


def cmd_sweep(config: ExperimentConfig, args, out: Path) -> list[str]:
    from .confounder import batch_size_sweep
    modes = (args.mode,) if args.mode else None
    report = batch_size_sweep(config, modes,
                              progress=lambda c: print(f"{c.mode} seed={c.seed} B={c.batch_size} "
                                                       f"held_in={c.held_in:.3f} held_out={c.held_out:.3f}",
                                                       flush=True))
    write_json(report.to_dict(), out / "sweep.json")
    for k, v in report.verdicts().items():
        print(f"{k}: {v}")
    return ["sweep.json"]


def cmd_gradcheck(config: ExperimentConfig, args, out: Path) -> list[str]:
    from .gradcheck import run_gradcheck
    report = run_gradcheck(args.nets, seed=config.seed)
    write_json(report, out / "gradcheck.json")
    print(f"gradcheck: {report['passed']}/{report['checks']} passed, "
          f"max relative error {report['max_rel_error']:.2e}")
    if report["passed"] != report["checks"]:
        raise RuntimeError(f"{report['checks'] - report['passed']} gradient checks failed")
    return ["gradcheck.json"]


def cmd_export_gram(config: ExperimentConfig, args, out: Path) -> list[str]:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.mode != "causal":
        raise ValueError("export-gram needs a causal-mode checkpoint")
    matrix = gram(bundle)
    write_matrix(matrix, out / "gram.csv")
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} Gram matrix")
    return ["gram.csv"]


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "theorem1": cmd_theorem1,
    "sweep-batch": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "export-gram": cmd_export_gram,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse already printed usage
        return int(exc.code or 0)
    started = _now()
    try:
        config = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
        outputs = ["config.yaml"] + COMMANDS[args.command](config, args, out)
        RunManifest(args.command, config.to_dict(), config.seed, __version__, started, _now(),
                    outputs).write(out)
    except (ConfigError, CheckpointError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
