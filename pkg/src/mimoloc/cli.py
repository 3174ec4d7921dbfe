"""Command-line front end for the experiment harness.

Every verb reads the same TOML config (all keys optional); ``--seed``
and ``--out`` override the config's seed and output directory.  Exit
code is 0 on success and 1 on failure, with a stage-tagged diagnostic
on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from .datasets import load_dataset
from .harness import (
    SWEEP_AXES,
    ExperimentConfig,
    StageError,
    run_pipeline,
    sweep,
)

_PIPELINE_VERBS = {
    "generate": ("generate", "synthesize the train/test datasets"),
    "calibrate": ("calibrate", "fit the phase-impairment model from the "
                               "reference grid"),
    "extract": ("extract", "run multipath extraction and dump MPC tables"),
    "train": ("train", "train the fingerprint regressors"),
    "evaluate": (None, "full pipeline with error reports"),
}


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="TOML experiment config (defaults when omitted)")
    parser.add_argument("--seed", type=int, metavar="U64",
                        help="override sampling.seed")
    parser.add_argument("--out", metavar="DIR",
                        help="override output.directory")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mimoloc",
        description="CSI simulation, calibration, multipath extraction, "
                    "and fingerprint localization experiments")
    commands = parser.add_subparsers(dest="command", required=True)
    for verb, (_, help_text) in _PIPELINE_VERBS.items():
        _add_common(commands.add_parser(verb, help=help_text))
    sweep_parser = commands.add_parser(
        "sweep", help="repeat the pipeline along one axis")
    _add_common(sweep_parser)
    sweep_parser.add_argument("--axis", choices=SWEEP_AXES,
                              help="axis to vary (default: config [sweep])")
    sweep_parser.add_argument("--values", nargs="+", metavar="V",
                              help="axis values (default: config [sweep])")
    ingest_parser = commands.add_parser(
        "ingest", help="validate a binary CSI dataset and summarize it")
    ingest_parser.add_argument("path", help="dataset file to read")
    ingest_parser.add_argument("--out", metavar="DIR",
                               help="write dataset_summary.json here")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.from_toml(args.config)
    return ExperimentConfig()


def _print_reports(reports):
    print(f"{'estimator':<30}{'mae_m':>10}{'median_m':>10}"
          f"{'p90_m':>10}{'p95_m':>10}")
    for label, report in reports.items():
        print(f"{label:<30}{report.mae:>10.4f}{report.median:>10.4f}"
              f"{report.percentile_90:>10.4f}{report.percentile_95:>10.4f}")


def _run_verb(args) -> int:
    cfg = _load_config(args)
    if args.command == "calibrate" and not cfg.resolved["calibration"]["enabled"]:
        resolved = copy.deepcopy(cfg.resolved)
        resolved["calibration"]["enabled"] = True
        cfg = ExperimentConfig(resolved)
    until = _PIPELINE_VERBS[args.command][0]
    bundle = run_pipeline(cfg, until=until, seed=args.seed, out_dir=args.out)
    counts = bundle.manifest["counts"]
    if args.command == "generate":
        print(f"generated {counts['train']} train / {counts['test']} test "
              f"samples -> {bundle.out_dir}")
    elif args.command == "calibrate":
        text = (bundle.out_dir / "calibration.json").read_text()
        print(f"calibration fit -> {bundle.out_dir / 'calibration.json'}")
        print(text, end="")
    elif args.command == "extract":
        print(f"extracted {counts['train']} + {counts['test']} samples over "
              f"{counts['subarrays']} sub-arrays -> {bundle.out_dir}")
    elif args.command == "train":
        for label, model in bundle.models.items():
            meta = model.metadata
            print(f"trained {label}: n={meta['n_train']} "
                  f"cv_mae=({meta['cv_mae_x']:.4g}, {meta['cv_mae_y']:.4g})")
    else:
        _print_reports(bundle.reports)
        print(f"report -> {bundle.out_dir / 'report.csv'}")
    return 0


def _run_sweep(args) -> int:
    cfg = _load_config(args)
    bundles = sweep(cfg, axis=args.axis, values=args.values, seed=args.seed,
                    out_dir=args.out)
    for bundle in bundles:
        print(f"run {bundle.out_dir.name}:")
        _print_reports(bundle.reports)
    root = Path(args.out or cfg.out_dir)
    print(f"summary -> {root / 'summary.csv'}")
    return 0


def _run_ingest(args) -> int:
    dataset = load_dataset(args.path)
    kind = dataset.topology.get("kind", "?")
    n, n_ant, n_sub = dataset.csi.shape
    summary = {
        "samples": n,
        "antennas": n_ant,
        "subcarriers": n_sub,
        "topology_kind": kind,
        "frequency_start_hz": float(dataset.frequencies[0]),
        "frequency_stop_hz": float(dataset.frequencies[-1]),
        "meta": dataset.meta,
    }
    print(f"{args.path}: {n} samples, {n_ant} antennas x {n_sub} "
          f"subcarriers, topology {kind}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "dataset_summary.json"
        target.write_text(json.dumps(summary, sort_keys=True, indent=2)
                          + "\n")
        print(f"summary -> {target}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            return _run_sweep(args)
        if args.command == "ingest":
            return _run_ingest(args)
        return _run_verb(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        stage = "ingest" if args.command == "ingest" else "config"
        print(f"error [{stage}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
