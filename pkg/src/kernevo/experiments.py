"""Cross-validated experiments: tuned baseline kernels, evolved kernels, and
frozen-kernel transfer, plus the on-disk report format.

Every (repetition, outer fold) cell draws its randomness from a seed derived
from ``(seed, repetition, fold, ...)``, so results do not depend on the order
or the process in which cells run.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .data import Dataset, FoldAssignment, load_dataset, load_embeddings, load_matrix_dataset, make_folds
from .evolution import MOECovConfig, NoViableKernel, individual_to_record, moecov_run
from .gp import NotPSD
from .grammar import parse, serialize
from .hyperopt import AllRunsFailed, optimize_hyperparams
from .kernels import BASELINES, EvaluationFault, baseline_kind
from .metrics import DegenerateInput, fold_metrics

TABLE_NAME = "folds.tsv"
SUMMARY_NAME = "summary.txt"
ARCHIVE_NAME = "archive.jsonl"
FULL_ARCHIVE_NAME = "archive_full.jsonl"
COLUMNS = ("group", "kernel", "target", "rep", "fold", "n_train", "n_test", "pcc", "nlpd", "status")
MODES = ("baseline", "evolve", "transfer")

_CELL_FAULTS = (
    AllRunsFailed, NotPSD, EvaluationFault, DegenerateInput, NoViableKernel,
    np.linalg.LinAlgError, ValueError,
)


class DataError(Exception):
    """Input files are missing or malformed."""


class TickClock:
    """Deterministic clock that advances by ``step`` seconds per reading.

    The default step is a power of two, so differences of readings are exact
    and do not depend on how far the clock has already advanced.
    """

    def __init__(self, step: float = 2.0**-10):
        self.step = step
        self.now = 0.0

    def __call__(self) -> float:
        self.now += self.step
        return self.now


@dataclass
class ExperimentConfig:
    mode: str = "baseline"
    data: Optional[str] = None
    emotion: str = "anger"
    embeddings: Optional[str] = None
    folds: int = 10
    reps: int = 30
    seed: int = 0
    out: Optional[str] = None
    kernels: list[str] = field(default_factory=lambda: sorted(BASELINES))
    archive: Optional[str] = None
    target_data: list[str] = field(default_factory=list)
    force: bool = False
    jobs: int = 1
    clock: str = "wall"
    drop_missing: bool = False
    full_archive: bool = False
    center: bool = True
    moecov: MOECovConfig = field(default_factory=MOECovConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.clock not in ("wall", "tick"):
            raise ValueError("clock must be 'wall' or 'tick'")
        self.kernels = [baseline_kind(k) for k in self.kernels]

    def echo(self) -> dict[str, Any]:
        """Plain-data copy of the configuration for the report."""
        d = asdict(self)
        d["moecov"]["budget"]["bounds"] = None if self.moecov.budget.bounds is None else self.moecov.budget.bounds.tolist()
        return d

    def make_clock(self):
        return TickClock() if self.clock == "tick" else None


@dataclass
class FoldRow:
    group: str
    kernel: str
    target: str
    rep: int
    fold: int
    n_train: int
    n_test: int
    pcc: float = math.nan
    nlpd: float = math.nan
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class Aggregate:
    pcc: float
    nlpd: float
    n_ok: int
    n_failed: int


@dataclass
class RunReport:
    mode: str
    rows: list[FoldRow] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    wall_clock: float = 0.0
    archive: Optional[str] = None
    # best kernel records of an evolve run, written next to the table
    best_records: list[dict] = field(default_factory=list, repr=False)
    full_archive: list = field(default_factory=list, repr=False)

    def groups(self) -> list[tuple[str, str]]:
        seen: dict[tuple[str, str], None] = {}
        for r in self.rows:
            seen.setdefault((r.group, r.target), None)
        return list(seen)

    def aggregates(self) -> dict[tuple[str, str], Aggregate]:
        """Mean PCC and NLPD over the successful rows of each (group, target)."""
        out = {}
        for key in self.groups():
            rows = [r for r in self.rows if (r.group, r.target) == key]
            ok = [r for r in rows if r.ok]
            out[key] = Aggregate(
                float(np.mean([r.pcc for r in ok])) if ok else math.nan,
                float(np.mean([r.nlpd for r in ok])) if ok else math.nan,
                len(ok),
                len(rows) - len(ok),
            )
        return out

    @property
    def all_failed(self) -> bool:
        return bool(self.rows) and not any(r.ok for r in self.rows)


# ----------------------------------------------------------------------------
# data loading

def load_data(path: Union[str, Path], emotion: str = "anger", embeddings=None,
              drop_missing: bool = False) -> Dataset:
    """Load a pre-embedded ``.npz`` or a text table embedded with ``embeddings``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        if path.suffix == ".npz":
            return load_matrix_dataset(path)
        if embeddings is None:
            raise DataError(f"{path}: text data needs an embeddings file")
        return load_dataset(path, embeddings, emotion, drop_missing=drop_missing)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_embeddings(cfg: ExperimentConfig, paths: Sequence[str]):
    if all(str(p).endswith(".npz") for p in paths):
        return None
    if cfg.embeddings is None:
        raise DataError("text data needs --embeddings")
    if not Path(cfg.embeddings).exists():
        raise DataError(f"embedding file not found: {cfg.embeddings}")
    try:
        return load_embeddings(cfg.embeddings)
    except ValueError as exc:
        raise DataError(f"{cfg.embeddings}: {exc}") from exc


def load_primary(cfg: ExperimentConfig) -> Dataset:
    if cfg.data is None:
        raise DataError("no --data given")
    if not Path(cfg.data).exists():
        raise DataError(f"data file not found: {cfg.data}")
    table = _load_embeddings(cfg, [cfg.data])
    return load_data(cfg.data, cfg.emotion, table, cfg.drop_missing)


# ----------------------------------------------------------------------------
# cells

def _cell_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _split(dataset: Dataset, folds: FoldAssignment, k: int, center: bool = True):
    """Training/test arrays, targets optionally centred on the training mean."""
    train, test = folds.split(k)
    offset = float(dataset.f[train].mean()) if center else 0.0
    return dataset.X[train], dataset.f[train] - offset, dataset.X[test], dataset.f[test] - offset


def _fault_status(exc: Exception) -> str:
    msg = str(exc).replace("\t", " ").replace("\n", " ")
    return f"failed: {type(exc).__name__}: {msg}" if msg else f"failed: {type(exc).__name__}"


def _baseline_cell(args) -> FoldRow:
    kernel, ki, rep, k, dataset, folds, budget, seed, center = args
    Xtr, ftr, Xte, fte = _split(dataset, folds, k, center)
    row = FoldRow(kernel, kernel, "", rep, k, len(ftr), len(fte))
    try:
        opt = optimize_hyperparams(kernel, Xtr, ftr, budget, _cell_rng(seed, rep, k, ki))
        row.pcc, row.nlpd = fold_metrics(kernel, opt.theta, Xtr, ftr, Xte, fte)
    except _CELL_FAULTS as exc:
        row.status = _fault_status(exc)
    return row


def _evolve_cell(args):
    rep, k, dataset, folds, mcfg, seed, clock, full, center = args
    Xtr, ftr, Xte, fte = _split(dataset, folds, k, center)
    cell_seed = int(_cell_rng(seed, rep, k).integers(2**31))
    cfg = MOECovConfig(**{**mcfg.__dict__, "seed": cell_seed})
    row = FoldRow("MOECov", "", "", rep, k, len(ftr), len(fte))
    record, archive = None, []
    try:
        result = moecov_run(cfg, Dataset(Xtr, ftr), clock=clock)
        archive = result.archive if full else []
        expr = result.best.expr
        row.kernel = serialize(expr)
        # refit the selected structure on the whole outer training part
        opt = optimize_hyperparams(expr, Xtr, ftr, cfg.budget, _cell_rng(cell_seed, 1))
        row.pcc, row.nlpd = fold_metrics(expr, opt.theta, Xtr, ftr, Xte, fte)
        record = individual_to_record(result.best)
        record.update(theta=[float(t) for t in opt.theta], rep=rep, fold=k, dim=dataset.dim,
                      refit_lml=opt.best_lml)
    except _CELL_FAULTS as exc:
        row.status = _fault_status(exc)
    return row, record, [(rep, k, ind) for ind in archive]


def _mapper(jobs: int) -> tuple[Callable, Optional[ProcessPoolExecutor]]:
    if jobs <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=jobs)
    return pool.map, pool


def _run_cells(fn, cells: list, jobs: int) -> list:
    mapper, pool = _mapper(jobs)
    try:
        return list(mapper(fn, cells))
    finally:
        if pool is not None:
            pool.shutdown()


def run_baseline(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> RunReport:
    """Tune each baseline kernel on every outer training part and score the held-out part."""
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else load_primary(cfg)
    folds = make_folds(len(dataset), cfg.folds, cfg.seed)
    budget = cfg.moecov.budget
    cells = [
        (kernel, ki, rep, k, dataset, folds, budget, cfg.seed, cfg.center)
        for ki, kernel in enumerate(cfg.kernels)
        for rep in range(cfg.reps)
        for k in range(cfg.folds)
    ]
    rows = _run_cells(_baseline_cell, cells, cfg.jobs)
    return RunReport("baseline", rows, cfg.echo(), time.perf_counter() - t0)


def run_evolve(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> RunReport:
    """Evolve a kernel on each outer training part and score it on the held-out part.

    The structure chosen by the evolution gets its hyperparameters re-tuned on
    the complete outer training part before testing.
    """
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else load_primary(cfg)
    folds = make_folds(len(dataset), cfg.folds, cfg.seed)
    cells = [
        (rep, k, dataset, folds, cfg.moecov, cfg.seed, cfg.make_clock(), cfg.full_archive,
         cfg.center)
        for rep in range(cfg.reps)
        for k in range(cfg.folds)
    ]
    results = _run_cells(_evolve_cell, cells, cfg.jobs)
    report = RunReport("evolve", [r for r, _, _ in results], cfg.echo(), time.perf_counter() - t0)
    report.best_records = [rec for _, rec, _ in results if rec is not None]
    report.full_archive = [entry for _, _, arch in results for entry in arch]
    report.archive = ARCHIVE_NAME
    return report


def load_kernel_records(path: Union[str, Path]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"archive not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        for rec in records:
            parse(rec["expr"])
            rec["theta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return records


def run_transfer(
    cfg: ExperimentConfig,
    source_archive: Optional[Union[str, Sequence[dict]]] = None,
    target_datasets: Optional[dict[str, Dataset]] = None,
) -> RunReport:
    """Score archived kernels with their frozen hyperparameters on other datasets.

    Only the posterior is refitted on each target training part; the
    hyperparameter optimizer is never called.
    """
    t0 = time.perf_counter()
    source_archive = source_archive if source_archive is not None else cfg.archive
    if source_archive is None:
        raise DataError("transfer needs --archive")
    records = (
        load_kernel_records(source_archive)
        if isinstance(source_archive, (str, Path))
        else list(source_archive)
    )
    if target_datasets is None:
        paths = cfg.target_data or ([cfg.data] if cfg.data else [])
        if not paths:
            raise DataError("transfer needs --target-data or --data")
        table = _load_embeddings(cfg, paths)
        target_datasets = {
            Path(p).stem: load_data(p, cfg.emotion, table, cfg.drop_missing) for p in paths
        }
    rows = []
    for ri, rec in enumerate(records):
        expr = parse(rec["expr"])
        theta = np.array([math.nan if t is None else t for t in rec["theta"]], dtype=float)
        group = f"k{ri}"
        for name, ds in target_datasets.items():
            folds = make_folds(len(ds), cfg.folds, cfg.seed)
            for k in range(cfg.folds):
                Xtr, ftr, Xte, fte = _split(ds, folds, k, cfg.center)
                row = FoldRow(group, rec["expr"], name, int(rec.get("rep", 0)), k, len(ftr), len(fte))
                try:
                    dim = rec.get("dim")
                    if dim is not None and dim != ds.dim:
                        raise ValueError(f"kernel learned on dimension {dim}, data has {ds.dim}")
                    if not np.all(np.isfinite(theta)):
                        raise ValueError("archived hyperparameters are not finite")
                    row.pcc, row.nlpd = fold_metrics(expr, theta, Xtr, ftr, Xte, fte)
                except _CELL_FAULTS as exc:
                    row.status = _fault_status(exc)
                rows.append(row)
    return RunReport("transfer", rows, cfg.echo(), time.perf_counter() - t0)


# ----------------------------------------------------------------------------
# report files

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def report_paths(out_dir: Union[str, Path]) -> list[Path]:
    d = Path(out_dir)
    return [d / TABLE_NAME, d / SUMMARY_NAME, d / ARCHIVE_NAME, d / FULL_ARCHIVE_NAME]


def check_writable(out_dir: Union[str, Path], force: bool = False) -> None:
    existing = [p for p in report_paths(out_dir) if p.exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass --force to overwrite")


def emit_report(report: RunReport, out_dir: Union[str, Path], force: bool = False) -> list[Path]:
    """Write the per-fold table, the key=value summary and any kernel archive."""
    out = Path(out_dir)
    check_writable(out, force)
    out.mkdir(parents=True, exist_ok=True)
    for stale in report_paths(out):
        if stale.exists():
            stale.unlink()
    written = [out / TABLE_NAME, out / SUMMARY_NAME]
    with open(written[0], "w", encoding="utf-8") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for r in report.rows:
            fh.write("\t".join(_fmt(getattr(r, c)) for c in COLUMNS) + "\n")
    lines = [f"mode={report.mode}", f"wall_clock_s={report.wall_clock!r}"]
    if report.archive:
        lines.append(f"archive={report.archive}")
    for key, value in sorted(report.config.items()):
        lines.append(f"config.{key}={json.dumps(value, sort_keys=True)}")
    for (group, target), agg in report.aggregates().items():
        prefix = f"aggregate.{group}" + (f"@{target}" if target else "")
        lines += [
            f"{prefix}.pcc={agg.pcc!r}",
            f"{prefix}.nlpd={agg.nlpd!r}",
            f"{prefix}.n_ok={agg.n_ok}",
            f"{prefix}.n_failed={agg.n_failed}",
        ]
    written[1].write_text("\n".join(lines) + "\n", encoding="utf-8")
    if report.mode == "evolve":
        path = out / ARCHIVE_NAME
        with open(path, "w", encoding="utf-8") as fh:
            for rec in report.best_records:
                fh.write(json.dumps(rec) + "\n")
        written.append(path)
        if report.full_archive:
            path = out / FULL_ARCHIVE_NAME
            with open(path, "w", encoding="utf-8") as fh:
                for rep, k, ind in report.full_archive:
                    rec = individual_to_record(ind)
                    rec.update(rep=rep, fold=k)
                    fh.write(json.dumps(rec) + "\n")
            written.append(path)
    return written


def _parse_cell(column: str, text: str):
    if column in ("rep", "fold", "n_train", "n_test"):
        return int(text)
    if column in ("pcc", "nlpd"):
        return float(text)
    return text


def read_table(path: Union[str, Path]) -> list[FoldRow]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != COLUMNS:
            raise DataError(f"{path}: unexpected columns {header}")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            cells = line.rstrip("\n").split("\t")
            rows.append(FoldRow(**{c: _parse_cell(c, v) for c, v in zip(COLUMNS, cells)}))
    return rows


def read_summary(path: Union[str, Path]) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.rstrip("\n").split("=", 1)
                out[key] = value
    return out


def load_report(out_dir: Union[str, Path]) -> RunReport:
    """Rebuild a report from its files; the config echo comes back as plain data."""
    out = Path(out_dir)
    summary = read_summary(out / SUMMARY_NAME)
    config = {k[len("config."):]: json.loads(v) for k, v in summary.items() if k.startswith("config.")}
    report = RunReport(
        summary["mode"],
        read_table(out / TABLE_NAME),
        config,
        float(summary.get("wall_clock_s", "0")),
        summary.get("archive"),
    )
    if report.archive and (out / report.archive).exists():
        report.best_records = load_kernel_records(out / report.archive)
    return report


def summary_aggregates(out_dir: Union[str, Path]) -> dict[str, float]:
    """The ``aggregate.*`` entries of a summary file as numbers."""
    summary = read_summary(Path(out_dir) / SUMMARY_NAME)
    return {k: float(v) for k, v in summary.items() if k.startswith("aggregate.")}
