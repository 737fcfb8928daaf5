"""Benchmark harness, performance profiles and thresholding statistics.

CSV schemas (first line is a versioned comment):

* results table: ``task_id,method,iterations,stop_reason,c_cont,c_thresh``
* profile curve: ``method,tau,fraction``
* run record: ``row,iteration,loss,volume,stop_reason,c_cont,c_thresh``
  with one ``iter`` row per iteration and a final ``summary`` row
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import SingularSystemError, SolverNonConvergenceError
from .filters import BisectionError
from .network import NetworkParameters
from .optim import NonFiniteError, OptimConfig, RunRecord, network_initial_design, neural_optimize, standard_optimize
from .taskgen import Task

log = logging.getLogger(__name__)

RESULTS_HEADER = "# metato results-table v1"
PROFILE_HEADER = "# metato profile-curve v1"
RUN_RECORD_HEADER = "# metato run-record v1"
RESULT_FIELDS = ("task_id", "method", "iterations", "stop_reason", "c_cont", "c_thresh")
METRICS = ("iterations", "c_cont", "c_thresh")


class EmptyTableError(ValueError):
    pass


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass(frozen=True)
class ResultRow:
    task_id: str
    method: str
    iterations: int | None
    stop_reason: str
    c_cont: float
    c_thresh: float

    @property
    def failed(self) -> bool:
        return self.stop_reason == "failed"

    def metric(self, name: str) -> float:
        if self.failed:
            return math.inf
        value = float(getattr(self, name))
        return value if value > 0 and math.isfinite(value) else math.inf


class ResultsTable:
    def __init__(self, rows=()):
        self.rows: list[ResultRow] = list(rows)

    def __len__(self):
        return len(self.rows)

    @property
    def tasks(self) -> list[str]:
        return list(dict.fromkeys(r.task_id for r in self.rows))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def keys(self) -> set[tuple[str, str]]:
        return {(r.task_id, r.method) for r in self.rows}

    def get(self, task_id: str, method: str) -> ResultRow:
        for r in self.rows:
            if r.task_id == task_id and r.method == method:
                return r
        raise KeyError((task_id, method))

    def column(self, method: str, metric: str) -> np.ndarray:
        return np.array([r.metric(metric) for r in self.rows if r.method == method])

    def sorted(self, task_order: list[str], method_order: list[str]) -> ResultsTable:
        ti = {t: i for i, t in enumerate(task_order)}
        mi = {m: i for i, m in enumerate(method_order)}
        return ResultsTable(sorted(self.rows, key=lambda r: (ti[r.task_id], mi[r.method])))

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(RESULTS_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_FIELDS)
            for r in self.rows:
                w.writerow(_result_cells(r))

    @classmethod
    def load(cls, path: str | Path) -> ResultsTable:
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if first != RESULTS_HEADER:
                raise ValueError(f"{path}: unsupported results header {first!r}")
            reader = csv.DictReader(fh)
            rows = [
                ResultRow(
                    d["task_id"], d["method"],
                    int(d["iterations"]) if d["iterations"] else None,
                    d["stop_reason"],
                    float(d["c_cont"]) if d["c_cont"] else math.nan,
                    float(d["c_thresh"]) if d["c_thresh"] else math.nan,
                )
                for d in reader
            ]
        return cls(rows)


def _result_cells(r: ResultRow) -> list[str]:
    return [r.task_id, r.method, "" if r.iterations is None else str(r.iterations), r.stop_reason,
            _fmt(r.c_cont), _fmt(r.c_thresh)]


# ---------------------------------------------------------------- profiles

@dataclass(frozen=True, eq=False)
class ProfileCurve:
    method: str
    metric: str
    taus: np.ndarray  # sorted distinct finite ratios
    fractions: np.ndarray  # fraction of tasks with ratio <= tau, at each breakpoint
    n_tasks: int

    def __call__(self, tau: float) -> float:
        """Right-continuous step function; 0 below the first breakpoint."""
        i = np.searchsorted(self.taus, tau, side="right")
        return 0.0 if i == 0 else float(self.fractions[i - 1])


def performance_ratios(table: ResultsTable, metric: str) -> tuple[list[str], list[str], np.ndarray]:
    """(tasks, methods, ratio matrix); failures and all-failed tasks get +inf."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if not table.rows:
        raise EmptyTableError("results table is empty")
    tasks, methods = table.tasks, table.methods
    if len(table.keys()) != len(table.rows) or len(table.rows) != len(tasks) * len(methods):
        raise ValueError("results table is not rectangular (every method needs every task once)")
    ti = {t: i for i, t in enumerate(tasks)}
    mi = {m: i for i, m in enumerate(methods)}
    values = np.empty((len(tasks), len(methods)))
    for r in table.rows:
        values[ti[r.task_id], mi[r.method]] = r.metric(metric)
    best = values.min(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        ratios = np.where(np.isfinite(best), values / best, np.inf)
    return tasks, methods, ratios


def performance_profile(table: ResultsTable, metric: str) -> dict[str, ProfileCurve]:
    tasks, methods, ratios = performance_ratios(table, metric)
    curves = {}
    for j, method in enumerate(methods):
        r = ratios[:, j]
        finite = np.sort(r[np.isfinite(r)])
        taus, counts = np.unique(finite, return_counts=True)
        curves[method] = ProfileCurve(method, metric, taus, np.cumsum(counts) / len(tasks), len(tasks))
    return curves


def save_profiles(curves: dict[str, ProfileCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(PROFILE_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "tau", "fraction"))
        for c in curves.values():
            for tau, frac in zip(c.taus, c.fractions):
                w.writerow((c.method, repr(float(tau)), repr(float(frac))))


# ---------------------------------------------------------------- thresholding impact

@dataclass(frozen=True)
class ThresholdStats:
    mean_change: float  # percent; negative means thresholding lowered compliance
    n_used: int
    n_excluded: int


def percent_change(c_cont: float, c_thresh: float) -> float:
    return 100.0 * (c_thresh - c_cont) / c_cont


def threshold_stats(table: ResultsTable, limit: float = 50.0) -> dict[str, ThresholdStats]:
    out = {}
    for method in table.methods:
        changes = [
            percent_change(r.c_cont, r.c_thresh)
            for r in table.rows
            if r.method == method and not r.failed
        ]
        kept = [c for c in changes if abs(c) <= limit]
        mean = float(np.mean(kept)) if kept else math.nan
        out[method] = ThresholdStats(mean, len(kept), len(changes) - len(kept))
    return out


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True, eq=False)
class Method:
    """A (name, initializer, optimizer) triple.

    ``kind`` is "neural" (Adam on ``params``) or "mma"; an MMA method with
    ``params`` starts from that network's initial design.
    """

    name: str
    kind: str
    params: NetworkParameters | None = None

    def __post_init__(self):
        if self.kind not in ("neural", "mma"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "neural" and self.params is None:
            raise ValueError(f"neural method {self.name!r} needs network parameters")

    def run(self, task: Task, cfg: OptimConfig) -> RunRecord:
        if self.kind == "neural":
            record, _ = neural_optimize(task, self.params, cfg)
            return record
        init = None if self.params is None else network_initial_design(task, self.params, cfg)
        return standard_optimize(task, cfg, init)


RUN_FAILURES = (SingularSystemError, SolverNonConvergenceError, NonFiniteError, BisectionError, FloatingPointError)


def _run_pair(args) -> ResultRow:
    task, method, cfg = args
    try:
        rec = method.run(task, cfg)
    except RUN_FAILURES as exc:
        log.warning("%s on %s failed: %s", method.name, task.task_id, exc)
        return ResultRow(task.task_id, method.name, None, "failed", math.nan, math.nan)
    return ResultRow(task.task_id, method.name, rec.iterations, rec.stop_reason, rec.c_cont, rec.c_thresh)


def run_benchmark(
    tasks: list[Task],
    methods: list[Method],
    cfg: OptimConfig | None = None,
    results_path: str | Path | None = None,
    jobs: int = 1,
) -> ResultsTable:
    """Run every (task, method) pair not already present in ``results_path``.

    Rows are appended as they finish, so an interrupted run resumes where it
    stopped; the file is rewritten in canonical order at the end.
    """
    cfg = cfg or OptimConfig()
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError("method names must be unique")
    path = Path(results_path) if results_path else None
    done = ResultsTable()
    if path and path.exists():
        done = ResultsTable.load(path)
    else:
        if path:
            ResultsTable().save(path)
    finished = done.keys()
    todo = [(t, m, cfg) for t in tasks for m in methods if (t.task_id, m.name) not in finished]
    log.info("benchmark: %d pairs done, %d to run", len(finished), len(todo))

    def append(row):
        done.rows.append(row)
        if path:
            with open(path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_result_cells(row))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            for row in ex.map(_run_pair, todo):
                append(row)
    else:
        for args in todo:
            append(_run_pair(args))

    table = done.sorted([t.task_id for t in tasks], names)
    if path:
        table.save(path)
    return table


# ---------------------------------------------------------------- run records

def save_run_record(record: RunRecord, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(RUN_RECORD_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "iteration", "loss", "volume", "stop_reason", "c_cont", "c_thresh"))
        for i, (loss, vol) in enumerate(zip(record.losses, record.volumes), start=1):
            w.writerow(("iter", i, repr(loss), repr(vol), "", "", ""))
        w.writerow(("summary", record.iterations, repr(record.losses[-1]), repr(record.volumes[-1]),
                    record.stop_reason, _fmt(record.c_cont), _fmt(record.c_thresh)))


def load_run_record(path: str | Path) -> RunRecord:
    rec = RunRecord()
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != RUN_RECORD_HEADER:
            raise ValueError(f"{path}: unsupported run-record header {first!r}")
        for d in csv.DictReader(fh):
            if d["row"] == "iter":
                rec.losses.append(float(d["loss"]))
                rec.volumes.append(float(d["volume"]))
            else:
                rec.iterations = int(d["iteration"])
                rec.stop_reason = d["stop_reason"]
                rec.c_cont = float(d["c_cont"]) if d["c_cont"] else math.nan
                rec.c_thresh = float(d["c_thresh"]) if d["c_thresh"] else math.nan
    return rec
