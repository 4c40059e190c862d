"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 every run failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .evolution import MOECovConfig
from .experiments import (
    MODES,
    DataError,
    ExperimentConfig,
    check_writable,
    emit_report,
    run_baseline,
    run_evolve,
    run_transfer,
)
from .grammar import GrammarConfig
from .hyperopt import OptBudget
from .kernels import BASELINES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("kernevo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kernevo", description="Benchmark, evolve and transfer GP kernels.")
    p.add_argument("--mode", choices=MODES, help="experiment to run (default baseline)")
    p.add_argument("--data", help="dataset: delimited text (needs --embeddings) or .npz with X, f")
    p.add_argument("--emotion", help="target column of a text dataset (default anger)")
    p.add_argument("--embeddings", help="word vectors in GloVe text format")
    p.add_argument("--folds", type=int, help="outer cross-validation folds (default 10)")
    p.add_argument("--reps", type=int, help="repetitions per fold (default 30)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--kernels", help=f"comma-separated baselines (default all of {','.join(sorted(BASELINES))})")
    p.add_argument("--archive", help="kernel archive (.jsonl) for transfer mode")
    p.add_argument("--target-data", action="append", help="transfer target dataset; repeatable")
    p.add_argument("--force", action="store_true", default=None, help="overwrite existing output files")
    p.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--clock", choices=("wall", "tick"), help="timing source; tick is deterministic")
    p.add_argument("--drop-missing", action="store_true", default=None,
                   help="skip words without a vector instead of counting them as zeros")
    p.add_argument("--no-center", dest="center", action="store_false", default=None,
                   help="fit on raw targets instead of centring them on the training mean")
    p.add_argument("--full-archive", action="store_true", default=None,
                   help="also write every evaluated individual in evolve mode")
    p.add_argument("--config", action="append", default=[],
                   help="JSON file of settings; overrides flags, later files win")
    g = p.add_argument_group("evolution")
    g.add_argument("--population", type=int, help="population size N (default 38)")
    g.add_argument("--generations", type=int, help="generations G (default 65)")
    g.add_argument("--parents", type=int, help="parents kept mu (default 9)")
    g.add_argument("--p-mutation", type=float, help="mutation probability (default 0.4)")
    g.add_argument("--beta", type=float, help="restart threshold (default 1e-5)")
    g.add_argument("--objectives", type=int, choices=(2, 3), help="objectives checked for stalls")
    g.add_argument("--max-depth", type=int, help="maximum tree depth (default 8)")
    g.add_argument("--max-evals", type=int, help="LML evaluations per tuning (default 150)")
    g.add_argument("--select-by", choices=("lml", "bic"), help="final pick criterion (default lml)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


_TOP = {"mode", "data", "emotion", "embeddings", "folds", "reps", "seed", "out", "kernels",
        "archive", "target_data", "force", "jobs", "clock", "drop_missing", "full_archive",
        "center"}
_EVO = {"population": "N", "generations": "G", "parents": "mu", "p_mutation": "p_m",
        "beta": "beta", "objectives": "O", "select_by": "select_by"}


def _settings_from_args(ns: argparse.Namespace) -> dict:
    s: dict = {k: v for k, v in vars(ns).items() if k in _TOP and v is not None}
    if isinstance(s.get("kernels"), str):
        s["kernels"] = [k for k in s["kernels"].split(",") if k]
    evo = {_EVO[k]: v for k, v in vars(ns).items() if k in _EVO and v is not None}
    if ns.max_depth is not None:
        evo["grammar"] = {"max_depth": ns.max_depth}
    if ns.max_evals is not None:
        evo["budget"] = {"max_lml_evals": ns.max_evals}
    if evo:
        s["moecov"] = evo
    return s


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_settings(s: dict) -> ExperimentConfig:
    s = dict(s)
    unknown = set(s) - _TOP - {"moecov"}
    if unknown:
        raise UsageError(f"unknown settings: {sorted(unknown)}")
    evo = dict(s.pop("moecov", {}))
    if "p_m" in evo and "p_cx" not in evo:
        evo["p_cx"] = 1.0 - evo["p_m"]
    if "grammar" in evo:
        evo["grammar"] = GrammarConfig(**evo["grammar"])
    if "budget" in evo:
        evo["budget"] = OptBudget(**evo["budget"])
    if isinstance(s.get("target_data"), str):
        s["target_data"] = [s["target_data"]]
    try:
        return ExperimentConfig(**s, moecov=MOECovConfig(**evo))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def parse_config(argv: Optional[Sequence[str]] = None) -> ExperimentConfig:
    ns = build_parser().parse_args(argv)
    settings = _settings_from_args(ns)
    for path in ns.config:
        try:
            with open(path, encoding="utf-8") as fh:
                settings = _merge(settings, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return config_from_settings(settings)


RUNNERS = {"baseline": run_baseline, "evolve": run_evolve, "transfer": run_transfer}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_config(argv)
        if cfg.out is None:
            raise UsageError("--out is required")
        check_writable(cfg.out, cfg.force)
    except UsageError as exc:
        print(f"kernevo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileExistsError as exc:
        print(f"kernevo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = RUNNERS[cfg.mode](cfg)
    except DataError as exc:
        print(f"kernevo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        written = emit_report(report, cfg.out, cfg.force)
    except OSError as exc:
        print(f"kernevo: cannot write report: {exc}", file=sys.stderr)
        return EXIT_DATA
    for path in written:
        log.info("wrote %s", path)
    for (group, target), agg in report.aggregates().items():
        label = f"{group}@{target}" if target else group
        print(f"{label}\tpcc={agg.pcc:.5f}\tnlpd={agg.nlpd:.5f}\tok={agg.n_ok}\tfailed={agg.n_failed}")
    if report.all_failed:
        print("kernevo: every run failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
