"""Command line entry point: ``pointedge <command> ...``.

Commands::

    train      --config C [--out DIR] [--epochs N] [--no-plot]
    eval       --config C --checkpoint F [--split train|test]
    ablate     --config C --axis {edge_function,message_passing,graph_mode} [--out DIR]
    gradcheck  --config C [--eps H] [--tol T]
    synth      --spec S --out F [--seed N]

``--config`` takes a path or the name of a shipped preset (``toy``,
``s3dis``, ...). Exit status is 0 on success, 1 when a run fails its own
check (gradcheck tolerance, diverged training) and 2 for bad input.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .config import PRESETS, load_config
from .geom import PointCloudParseError, read_scene_spec, save_point_cloud, synth_scene
from .pipeline import ABLATION_AXES, TrainingDiverged, ablate, evaluate, export_report, run_gradcheck, train


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    out = Path(args.out)

    def progress(s):
        print(f"epoch {s.epoch:4d}  lr {s.lr:.3g}  loss {s.total_loss:.5f}  "
              f"point {s.point_loss:.5f}  edge {s.edge_loss:.5f}  edge_acc {s.edge_acc:.4f}", flush=True)

    record = train(cfg, out, progress=progress)
    result = evaluate(cfg, record.params, "train")
    record.evals.append({"split": "train", "report": result.report(), **result.as_dict()})
    export_report(record, out, plot=not args.no_plot)
    print(result.report(), end="")
    print(f"wrote {out} ({record.wall_clock:.1f}s)")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    result = evaluate(cfg, args.checkpoint, args.split)
    print(result.report(), end="")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)

    def progress(variant, result):
        print(f"{variant}: mIoU {result.metrics.miou:.4f}", flush=True)

    report = ablate(cfg, args.axis, args.out, progress=progress)
    print(report.table(), end="")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    rep = run_gradcheck(cfg, args.eps)
    worst = max(rep.errors, key=rep.errors.get)
    print(f"parameters checked: {len(rep.errors)}  evaluations: {rep.evaluations}  kink retries: {rep.kinks}")
    print(f"max relative error: {rep.max_error:.3e}  ({worst})  in {time.perf_counter() - t0:.1f}s")
    ok = rep.max_error < args.tol
    print("PASS" if ok else f"FAIL (tolerance {args.tol:g})")
    return 0 if ok else 1


def _cmd_synth(args) -> int:
    spec = read_scene_spec(args.spec)
    cloud = synth_scene(spec, args.seed)
    save_point_cloud(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointedge", description="Point-edge segmentation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = f"config file or preset name ({', '.join(PRESETS)})"

    t = sub.add_parser("train", help="train a model and write checkpoints and a report")
    t.add_argument("--config", required=True, help=cfg_help)
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--no-plot", action="store_true", help="skip the SVG loss plot")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--config", required=True, help=cfg_help)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every variant along one axis")
    a.add_argument("--config", required=True, help=cfg_help)
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    a.add_argument("--out", default=None, help="optional directory for per-variant runs")
    a.set_defaults(func=_cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full loss gradient")
    g.add_argument("--config", required=True, help=cfg_help)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a labeled synthetic scene file")
    s.add_argument("--spec", required=True, help="scene spec (INI)")
    s.add_argument("--out", required=True, help="output point file")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PointCloudParseError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
