"""Command-line entry point: ``modelbridge <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 training failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .checkpoint import CheckpointError, save_checkpoint
from .cka import DegenerateRepresentationError
from .data import write_dataset
from .models import TrainingDivergedError

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4
BASELINES = ("kd", "kd-contrast", "random", "oracle")


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.seeds is not None:
        if args.seeds < 1:
            raise ex.ConfigError("--seeds must be at least 1")
        changes["seeds"] = args.seeds
    if args.out is not None:
        changes["out"] = args.out
    return cfg.with_run(**changes) if changes else cfg


def _cache_dir(cfg: ex.ExperimentConfig) -> Path | None:
    return Path(cfg.run.out) if cfg.run.out else None


def _emit(report: ex.ExperimentReport, fmt: str) -> None:
    sys.stdout.write(ex.RENDERERS[fmt](report))


def cmd_pretrain(cfg, args) -> None:
    for seed in cfg.seed_list():
        ctx = ex.prepare_seed(cfg, seed, _cache_dir(cfg))
        if cfg.run.out:
            write_dataset(Path(cfg.run.out) / f"seed-{seed}" / "dataset.mbds", ctx.dataset, ctx.splits)
        print(f"seed {seed}: old {ctx.old.layer_shapes()} new {ctx.new.layer_shapes()}")


def cmd_select_positions(cfg, args) -> None:
    for seed in cfg.seed_list():
        ctx = ex.prepare_seed(cfg, seed, _cache_dir(cfg))
        sel = ex.select_positions(cfg, ctx)
        record = {"seed": seed, "m": sel.m, "l": sel.l, "probe_f1_macro": sel.probe_scores,
                  "cka": sel.cka_scores, "objective": sel.objective}
        if cfg.run.out:
            path = Path(cfg.run.out) / f"seed-{seed}" / "positions.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(record, sort_keys=True, indent=1))
        print(f"seed {seed}: m={sel.m} l={sel.l}")


def cmd_train_bridge(cfg, args) -> None:
    results, kd_params = [], []
    for seed in cfg.seed_list():
        ctx = ex.prepare_seed(cfg, seed, _cache_dir(cfg))
        model, history = ex.fit_bridge(cfg, ctx)
        if cfg.run.out:
            save_checkpoint(Path(cfg.run.out) / f"seed-{seed}" / "bridge.mbck", ctx.new, bridge=model.bridge)
        results.append(ex.bridge_result(ctx, "bridge", model, history))
        kd_params.append(ex.kd_student_param_count(ctx))
    row = ex.TransferReport.aggregate("bridge", results)
    ratio = row.params / max(kd_params)
    report = ex.ExperimentReport("train-bridge", [row], config=cfg.to_dict(),
                                 checks={"bridge_to_kd_param_ratio": ratio,
                                         "param_budget_ok": bool(ratio < ex.PARAM_BUDGET)})
    if cfg.run.out:
        ex.export_report(report, cfg.run.out)
    _emit(report, args.format)


def cmd_train_baseline(cfg, args) -> None:
    _emit(ex.run_experiment(cfg.with_run(methods=(args.method,)), cache_dir=_cache_dir(cfg)), args.format)


def cmd_evaluate(cfg, args) -> None:
    _emit(ex.run_experiment(cfg, cache_dir=_cache_dir(cfg)), args.format)


def cmd_ablate(cfg, args) -> None:
    _emit(ex.ABLATIONS[args.kind](cfg, cache_dir=_cache_dir(cfg)), args.format)


def cmd_report(cfg, args) -> None:
    report = ex.report_from_jsonl(Path(args.input).read_text())
    _emit(report, args.format)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="first seed")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds")
    common.add_argument("--out", help="output directory for checkpoints and reports")
    common.add_argument("--format", choices=sorted(ex.RENDERERS), default="text-table",
                        help="format printed to stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="modelbridge", description="Cross-modal model bridging experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the teacher and new-modality encoder")
    sub.add_parser("select-positions", parents=[common], help="choose bridge positions (m, l)")
    sub.add_parser("train-bridge", parents=[common], help="train and evaluate the bridge")
    p = sub.add_parser("train-baseline", parents=[common], help="train and evaluate one baseline")
    p.add_argument("--method", choices=BASELINES, default="kd")
    sub.add_parser("evaluate", parents=[common], help="run every configured method and report")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("kind", choices=sorted(ex.ABLATIONS))
    p = sub.add_parser("report", parents=[common], help="re-render a saved report.jsonl")
    p.add_argument("input", help="path to report.jsonl")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain, "select-positions": cmd_select_positions, "train-bridge": cmd_train_bridge,
    "train-baseline": cmd_train_baseline, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, DegenerateRepresentationError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
