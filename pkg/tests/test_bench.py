import importlib.util
from pathlib import Path

import numpy as np

from cropr import bench, kernels


def load_script():
    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_time_calls_excludes_warmup():
    calls = []
    times = bench.time_calls(lambda: calls.append(1), reps=4, warmup=2)
    assert len(calls) == 6 and times.shape == (4,) and np.all(times >= 0)


def test_best_rows_pick_max_throughput():
    rows = [bench.row("m", "eager", b, "float64", np.array([t])) for b, t in [(1, 0.1), (8, 0.2)]]
    best = bench.best_rows(rows)
    assert len(best) == 1 and best[0]["config"] == "m/best" and best[0]["batch"] == 8


def test_router_bench_is_deterministic_in_its_analytic_part():
    a = bench.bench_router(256, 16, reps=2, seed=1)
    b = bench.bench_router(256, 16, reps=2, seed=1)
    assert [r["config"] for r in a] == [r["config"] for r in b]
    assert {r["mode"] for r in a} == {"cropr_folded", "random"}


def test_kernel_script_covers_both_backends(tmp_path, capsys):
    rows = load_script().main(["--tokens", "64", "--batch", "2", "--reps", "2", "--out", str(tmp_path / "k.csv")])
    assert {r["mode"] for r in rows} == set(kernels.available_backends())
    assert len(rows) == 6 * len(kernels.available_backends())
    assert (tmp_path / "k.csv").read_text().startswith("# cropr kernel benchmark")
