"""Command-line entry point: ``morlbench <verb> [options]``.

Verbs share one output directory: ``generate`` writes the data splits,
``train`` the checkpoints, ``evaluate`` results.csv, ``report`` the tables
and plot data, ``calibrate`` calibration.csv; ``all`` runs every stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import (
    BenchConfig, ConfigError, calibration_report, evaluate_stage, generate_stage, load_config,
    load_models, load_split, read_results, results_csv, run_benchmark, train_stage, write_manifest,
    write_file, write_reports,
)
from .mdp import concat_datasets

VERBS = ("generate", "train", "evaluate", "report", "calibrate", "all")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morlbench", description="Offline multi-objective RL benchmark on a "
                                "synthetic ICU simulator.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config's seeds)")
    p.add_argument("--out", type=Path, default=Path("bench_out"), help="output directory")
    p.add_argument("--algorithms", type=_csv_list, help="comma-separated subset of algorithms")
    p.add_argument("--metrics", type=_csv_list, help="comma-separated subset of {wis,fqe}")
    p.add_argument("--sweep-step", type=float, help="preference grid step (must divide 1)")
    p.add_argument("--target-rtg-scale", type=float, help="decision-transformer return prompt scale")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def resolve_config(args) -> BenchConfig:
    """Config file (or the stored config of ``--out``), then command-line overrides."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif (args.out / "config.json").exists() and args.verb != "all":
        cfg = load_config(args.out / "config.json")
    else:
        cfg = BenchConfig()
    over = {}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.algorithms is not None:
        over["algorithms"] = args.algorithms
    if args.metrics is not None:
        over["metrics"] = args.metrics
    if args.sweep_step is not None:
        over["sweep_step"] = args.sweep_step
    if args.target_rtg_scale is not None:
        over["target_rtg_scale"] = args.target_rtg_scale
    return cfg.with_(**over) if over else cfg


def _save_config(cfg: BenchConfig, out: Path) -> None:
    write_file(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("morlbench")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"morlbench: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.verb == "all":
            run = run_benchmark(cfg, out)
            if not run.ok:
                log.error("%d evaluation cells failed; see manifest.json", len(run.failures))
                return 1
            return 0
        _save_config(cfg, out)
        if args.verb == "generate":
            for seed in cfg.seeds:
                generate_stage(cfg, out, seed)
        elif args.verb == "train":
            for seed in cfg.seeds:
                train, _ = load_split(out, seed)
                train_stage(cfg, out, seed, train)
        elif args.verb == "evaluate":
            rows, failures = [], []
            for seed in cfg.seeds:
                train, test = load_split(out, seed)
                r, f = evaluate_stage(cfg, seed, test, load_models(cfg, out, seed), concat_datasets(train, test))
                rows += r
                failures += f
            (out / "manifest.json").unlink(missing_ok=True)
            files = {"results.csv": write_file(out / "results.csv", results_csv(rows))}
            write_manifest(cfg, out, files, failures)
            if failures:
                log.error("%d evaluation cells failed; see manifest.json", len(failures))
                return 1
        elif args.verb == "report":
            write_manifest(cfg, out, write_reports(cfg, out, read_results(out / "results.csv")))
        elif args.verb == "calibrate":
            digest = write_file(out / "calibration.csv", calibration_report(cfg, out))
            write_manifest(cfg, out, {"calibration.csv": digest})
    except FileNotFoundError as exc:
        print(f"morlbench: missing input ({exc.filename}); run the earlier stages first", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
