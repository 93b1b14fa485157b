"""Command line entry point: ``oldpf <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex

SUBCOMMANDS = ("generate-data", "pretrain", "run-online", "evaluate", "reproduce-paper")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (config_version 1)")
    common.add_argument("--kind", choices=("lgssm", "tracking"), help="model kind when no config is given")
    common.add_argument("--seed-count", type=int, help="use seeds 0..N-1")
    common.add_argument("--steps", type=int, help="online steps per seed")
    common.add_argument("--methods", help="comma-separated subset of " + ",".join(ex.METHODS))
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--full-scale", action="store_true",
                        help="50 seeds x 5000 steps, 500 pretraining trajectories")
    common.add_argument("--workers", type=int, help="worker processes for the seed loop")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oldpf", description="Online-learning differentiable particle filter experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="simulate pretraining and online datasets as CSV")
    sub.add_parser("pretrain", parents=[common], help="supervised pretraining; writes the shared checkpoint")
    sub.add_parser("run-online", parents=[common], help="run the methods on every seed from the checkpoint")
    sub.add_parser("evaluate", parents=[common], help="rebuild the summary table from metrics.csv")
    sub.add_parser("reproduce-paper", parents=[common],
                   help="both experiments end to end (desk scale unless --full-scale)")
    return parser


def build_config(args, kind: str | None = None) -> ex.ExperimentConfig:
    kind = kind or args.kind or "lgssm"
    if args.config is not None:
        cfg = ex.load_config(args.config)
        if kind != cfg.kind and args.command == "reproduce-paper":
            # one config drives both experiments; per-kind fields fall back to defaults
            shared = {k: v for k, v in vars(cfg).items() if k not in ("kind", "online_T", "rmse_scope", "out_dir")}
            cfg = ex.ExperimentConfig.desk(kind, **shared)
    elif args.full_scale:
        cfg = ex.ExperimentConfig.full_scale(kind)
    else:
        cfg = ex.ExperimentConfig.desk(kind)
    over = {}
    if args.seed_count is not None:
        over["seeds"] = list(range(args.seed_count))
    if args.steps is not None:
        over["online_T"] = args.steps
    if args.methods:
        over["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.workers is not None:
        over["workers"] = args.workers
    if args.out is not None:
        over["out_dir"] = str(args.out)
    if over:
        fields = vars(cfg).copy()
        fields.update(over)
        cfg = ex.ExperimentConfig(**fields)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "reproduce-paper":
            return _reproduce(args)
        cfg = build_config(args)
        out = Path(cfg.out_dir)
        if args.command == "generate-data":
            paths = ex.generate_data(cfg, out)
            print(f"wrote {len(paths)} dataset files under {out / 'data'}")
        elif args.command == "pretrain":
            out.mkdir(parents=True, exist_ok=True)
            ckpt = ex.pretrain_stage(cfg, out)
            cfg.save(out / "config.yaml")
            print(f"checkpoint written to {ckpt.with_suffix('.npz')}")
        elif args.command == "run-online":
            summary = ex.run_online(cfg, out)
            print(summary.table(ex._title(cfg)))
        elif args.command == "evaluate":
            summary = ex.evaluate(out)
            print(summary.table())
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def _reproduce(args) -> int:
    base = Path(args.out or "runs/reproduce")
    ok = True
    for kind in ("lgssm", "tracking"):
        args_kind = argparse.Namespace(**{**vars(args), "out": base / kind})
        cfg = build_config(args_kind, kind)
        summary = ex.run_experiment(cfg, cfg.out_dir)
        print(summary.table(ex._title(cfg)))
        for check, passed in ex.ordering_report(summary).items():
            print(f"  {'ok  ' if passed else 'FAIL'} {check}")
            ok &= passed
        print()
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
