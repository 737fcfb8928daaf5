import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metato.evaluation import (
    EmptyTableError,
    Method,
    ResultRow,
    ResultsTable,
    load_run_record,
    performance_profile,
    run_benchmark,
    save_profiles,
    save_run_record,
    threshold_stats,
)
from metato.fem import Discretization
from metato.network import NetworkConfig, init_standard
from metato.optim import OptimConfig, neural_optimize
from metato.taskgen import build_dataset


def table_from(values, metric="iterations", failed=()):
    """values[t][m] -> ResultsTable; ``failed`` holds (t, m) pairs."""
    rows = []
    for t, row in enumerate(values):
        for m, v in enumerate(row):
            bad = (t, m) in failed
            rows.append(ResultRow(f"t{t}", f"m{m}", None if bad else int(v) if metric == "iterations" else 50,
                                  "failed" if bad else "criterion",
                                  float(v) if metric == "c_cont" else 1.0, 1.0))
    return ResultsTable(rows)


def brute_force_profile(values, failed, taus):
    """Quadratic enumeration: compare every cell with every other cell of its task."""
    n_t, n_m = len(values), len(values[0])
    out = {}
    for m in range(n_m):
        fr, ratios = [], set()
        for tau in taus:
            hits = 0
            for t in range(n_t):
                if (t, m) in failed:
                    continue
                best = values[t][m]
                for k in range(n_m):
                    if (t, k) not in failed and values[t][k] < best:
                        best = values[t][k]
                ratios.add(values[t][m] / best)
                if values[t][m] / best <= tau:
                    hits += 1
            fr.append(hits / n_t)
        out[f"m{m}"] = (fr, sorted(ratios))
    return out


@st.composite
def random_tables(draw):
    n_t = draw(st.integers(1, 20))
    n_m = draw(st.integers(1, 4))
    values = [[draw(st.integers(10, 200)) for _ in range(n_m)] for _ in range(n_t)]
    failed = {(t, m) for t in range(n_t) for m in range(n_m) if draw(st.floats(0, 1)) < 0.1}
    return values, failed


@settings(max_examples=100)
@given(random_tables())
def test_profile_matches_brute_force(case):
    values, failed = case
    curves = performance_profile(table_from(values, failed=failed), "iterations")
    probe = brute_force_profile(values, failed, [1.0])
    breakpoints = sorted({r for _, rs in probe.values() for r in rs})
    # evaluate on every breakpoint, just around each, and far out
    taus = sorted({1.0, 1e6} | set(breakpoints) | {np.nextafter(r, 0) for r in breakpoints})
    oracle = brute_force_profile(values, failed, taus)
    for name, curve in curves.items():
        fractions, ratios = oracle[name]
        assert [curve(tau) for tau in taus] == fractions
        assert curve.taus.tolist() == ratios
        assert np.all(np.diff(curve.fractions) > 0)
        assert curve.fractions.size == 0 or curve.fractions[-1] <= 1.0
    wins = sum(c(1.0) for c in curves.values()) * len(values)
    solved = sum(any((t, m) not in failed for m in range(len(values[0]))) for t in range(len(values)))
    assert wins >= solved - 1e-9


def test_worked_two_method_example():
    curves = performance_profile(table_from([[10, 20], [30, 15], [12, 12]]), "iterations")
    a, b = curves["m0"], curves["m1"]
    assert a(1.0) == pytest.approx(2 / 3) and b(1.0) == pytest.approx(2 / 3)
    # both methods have one ratio of exactly 2.0, which <= includes
    assert a(2.0) == 1.0 and b(2.0) == 1.0
    assert a(1.999) == pytest.approx(2 / 3) and b(1.999) == pytest.approx(2 / 3)
    assert a(0.99) == 0.0
    # ties over-count: wins sum to more than the number of tasks
    assert a(1.0) + b(1.0) > 1.0


def test_explanatory_reading():
    # method A is within 1.5x of the best on 9 of 10 tasks, and 2x off on the last
    values = [[15, 10]] * 9 + [[20, 10]]
    curves = performance_profile(table_from(values), "iterations")
    assert curves["m0"](1.5) == pytest.approx(0.9)
    assert curves["m0"](1.4999) == 0.0
    assert curves["m1"](1.0) == 1.0


def test_single_method_and_failures():
    curves = performance_profile(table_from([[12], [40], [100]]), "iterations")
    assert all(curves["m0"](tau) == 1.0 for tau in (1.0, 1.5, 10.0))
    curves = performance_profile(table_from([[12, 20], [40, 30]], failed={(0, 0), (1, 0)}), "iterations")
    assert curves["m0"](1e9) == 0.0 and curves["m1"](1.0) == 1.0


def test_profile_errors():
    with pytest.raises(EmptyTableError):
        performance_profile(ResultsTable(), "iterations")
    t = table_from([[1, 2], [3, 4]])
    t.rows.pop()
    with pytest.raises(ValueError):
        performance_profile(t, "iterations")
    with pytest.raises(ValueError):
        performance_profile(table_from([[1]]), "wall")


def test_threshold_stats_examples():
    rows = [ResultRow(f"t{i}", "A", 20, "criterion", 100.0, 100.0 + d) for i, d in enumerate((-10, -4, 80))]
    rows += [ResultRow(f"t{i}", "B", 20, "criterion", 50.0, 50.0) for i in range(3)]
    stats = threshold_stats(ResultsTable(rows))
    assert stats["A"].mean_change == pytest.approx(-7.0) and stats["A"].n_excluded == 1
    assert stats["B"].mean_change == 0.0 and stats["B"].n_excluded == 0


def test_table_and_profile_files(tmp_path):
    t = table_from([[10, 20], [30, 15]], failed={(1, 0)})
    t.save(tmp_path / "r.csv")
    back = ResultsTable.load(tmp_path / "r.csv")
    assert back.rows == t.rows
    first = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert first.startswith("# ") and "v1" in first
    save_profiles(performance_profile(back, "iterations"), tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[1] == "method,tau,fraction" and len(lines) == 2 + 3


@pytest.fixture(scope="module")
def bench_setup():
    tasks = build_dataset("in-dist", 3, 4, Discretization(10, 10)).tasks
    params = init_standard(NetworkConfig(hidden=16, hidden_layers=2, omega0=30.0), 0)
    methods = [Method("neural", "neural", params), Method("mma", "mma"), Method("mma-net", "mma", params)]
    return tasks, methods, OptimConfig(max_iters=30)


def test_benchmark_resumes(bench_setup, tmp_path, monkeypatch):
    tasks, methods, cfg = bench_setup
    path = tmp_path / "results.csv"
    full = run_benchmark(tasks, methods, cfg, path)
    assert len(full) == 9
    for r in full.rows:
        if r.stop_reason == "criterion":
            assert 10 <= r.iterations <= 30
    # simulate an interruption after four pairs
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2 + 4]) + "\n")
    calls = []
    real = Method.run

    def counting(self, task, cfg):
        calls.append((task.task_id, self.name))
        return real(self, task, cfg)

    monkeypatch.setattr(Method, "run", counting)
    resumed = run_benchmark(tasks, methods, cfg, path)
    assert len(calls) == 5
    assert resumed.rows == full.rows
    before = path.read_bytes()
    calls.clear()
    again = run_benchmark(tasks, methods, cfg, path)
    assert calls == [] and again.rows == full.rows and path.read_bytes() == before


def test_benchmark_parallel_matches_serial(bench_setup, tmp_path):
    tasks, methods, cfg = bench_setup
    a = run_benchmark(tasks, methods, cfg, tmp_path / "a.csv", jobs=1)
    b = run_benchmark(tasks, methods, cfg, tmp_path / "b.csv", jobs=2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.rows == b.rows


def test_run_record_round_trip(bench_setup, tmp_path):
    tasks, methods, cfg = bench_setup
    rec, _ = neural_optimize(tasks[0], methods[0].params, cfg)
    save_run_record(rec, tmp_path / "run.csv")
    back = load_run_record(tmp_path / "run.csv")
    assert back.losses == rec.losses and back.volumes == rec.volumes
    assert back.iterations == rec.iterations and back.stop_reason == rec.stop_reason
    assert back.c_cont == rec.c_cont and back.c_thresh == rec.c_thresh


def test_method_validation():
    with pytest.raises(ValueError):
        Method("x", "lbfgs")
    with pytest.raises(ValueError):
        Method("x", "neural")
    assert math.isinf(ResultRow("t", "m", None, "failed", math.nan, math.nan).metric("c_cont"))
