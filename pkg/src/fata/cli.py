"""``fata pretrain|adapt|analyze``.

Exit codes: 0 success, 1 nothing to analyze, 2 configuration or checkpoint
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, config, experiment
from .adaptation import NumericalFailure, write_report
from .nn import CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_EMPTY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fata", description="Feature-augmented test-time adaptation on toy tasks.")
    p.add_argument("command", choices=("pretrain", "adapt", "analyze"))
    p.add_argument("reports", nargs="?", help="report directory (analyze only; default OUT/reports)")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    p.add_argument("--method", help="adaptation method (overrides method)")
    p.add_argument("--checkpoint", type=Path, help="checkpoint for adapt (default OUT/pretrain/seedN.ckpt.json)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> tuple[dict, config.ExperimentConfig, Path, list[int]]:
    overrides = list(args.override)
    if args.method:
        overrides.append(f"method={json.dumps(args.method)}")
    raw, cfg = config.load(args.config, overrides)
    out = args.out or Path(cfg.out_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    return raw, cfg, out, seeds


def _echo(raw: dict, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(raw, sort_keys=True, indent=2) + "\n", "utf-8")


def cmd_pretrain(args) -> int:
    raw, cfg, out, seeds = _resolve(args)
    _echo(raw, out, "pretrain.config.json")
    for seed in seeds:
        stack, summary = experiment.pretrain_source(cfg, seed)
        path = experiment.checkpoint_path(out, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(stack, path)
        path.with_name(f"seed{seed}.summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", "utf-8")
        print(f"seed {seed}: clean accuracy {summary['clean_accuracy']:.4f} -> {path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    raw, cfg, out, seeds = _resolve(args)
    _echo(raw, out, "adapt.config.json")
    variants = config.expand_sweep(raw)
    for seed in seeds:
        ckpt = args.checkpoint or experiment.checkpoint_path(out, seed)
        if not Path(ckpt).exists():
            raise CheckpointError(f"checkpoint {ckpt} not found; run `fata pretrain` first")
        stack, _ = load_checkpoint(ckpt, expect=cfg.stack_config())
        pool = experiment.test_pool(cfg, seed)
        for tag, _, vcfg in variants:
            for family in vcfg.corruptions.families:
                for severity in vcfg.corruptions.severities:
                    report = experiment.run_episode(vcfg, stack, seed, family, severity,
                                                    pool=pool, tag=tag)
                    stem = experiment.episode_stem(vcfg.method, family, severity, seed, tag)
                    write_report(report, out / "reports", stem)
                    print(f"{stem}: accuracy {report.accuracy:.4f} "
                          f"selected {report.fraction_selected:.3f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = args.out
    if out is None and args.config is not None:
        out = Path(config.load(args.config, args.override)[1].out_dir)
    out = out or Path("runs")
    report_dir = Path(args.reports) if args.reports else out / "reports"
    try:
        reports = analysis.load_reports(report_dir)
    except analysis.NoReports as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    tables = analysis.aggregate(reports)
    paths = analysis.write_tables(tables, out / "analysis")
    print(analysis.format_accuracy_table(tables["accuracy"]))
    print("tables: " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "analyze" and args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    handler = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "analyze": cmd_analyze}[args.command]
    try:
        return handler(args)
    except (config.ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
