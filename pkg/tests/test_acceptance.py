"""Acceptance criteria 1-8, each reported as one pass/fail line.

Shared choices: criterion 2 uses N_leaf = 64 with crossover 32, the larger
grids (criteria 3, 4, 5, 7, 8) use N_leaf = 256 with crossover 128.
"""

import statistics
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conftest import brute_schur, rel_fro, report
from dtnmap.accel_nd import build_root_accel
from dtnmap.bodyload import build_body_operator, clustered_loads
from dtnmap.dense_nd import build_root_dense
from dtnmap.grid import build_tree, discretize
from dtnmap.harness import time_solve
from dtnmap.problems import PROBLEMS, catalog
from dtnmap.reference import error_metrics, full_solve, random_unit

EPS = 1e-7
BIG_LEAF, BIG_CROSS = 256, 128

pytestmark = pytest.mark.acceptance


def accel(name, n, nleaf=BIG_LEAF, crossover=BIG_CROSS):
    spec = catalog(name, n)
    op = discretize(spec)
    t0 = time.perf_counter()
    sol, _ = build_root_accel(spec, build_tree(n, nleaf), EPS, crossover, op=op)
    return sol, time.perf_counter() - t0, spec, op


def test_criterion_1_oracle_equivalence():
    worst, where = 0.0, None
    for name in PROBLEMS:
        for n in (8, 16, 32):
            spec = catalog(name, n)
            op = discretize(spec)
            tree = build_tree(n, 16, L=min(2, int(np.log2(n - 2))))
            sol, _ = build_root_dense(spec, tree, op=op)
            err = rel_fro(sol.S, brute_schur(op.A, tree.root.boundary))
            if err > worst:
                worst, where = err, (name, n)
    ok = worst <= 1e-10
    report(1, ok, f"max rel Frobenius {worst:.2e} at {where} (bound 1e-10)")
    assert ok


def test_criterion_2_engine_equivalence():
    failures, worst = [], {}
    for name in PROBLEMS:
        bound = 1e-2 if name == "helmholtz3" else 1e-4
        for n in (32, 64, 128):
            spec = catalog(name, n)
            op = discretize(spec)
            tree = build_tree(n, 64)
            den, _ = build_root_dense(spec, tree, op=op)
            acc, _ = build_root_accel(spec, tree, EPS, 32, op=op)
            err = rel_fro(acc.dense_G(), den.G)
            worst[name] = max(worst.get(name, 0.0), err)
            if not err <= bound:
                failures.append(f"{name} n={n} {err:.1e}>{bound:.0e}")
    ok = not failures
    detail = "all problems within bound" if ok else "; ".join(failures)
    report(2, ok, f"{detail} | worst per problem: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok, failures


def test_criterion_3_laplace_errors():
    sol, t, spec, op = accel("laplace", 256)
    e1, e2 = error_metrics(sol, spec, seed=0, op=op)
    ok = e1 <= 1e-5 and e2 <= 1e-5
    report(3, ok, f"Laplace n=256: e1 {e1:.2e}, e2 {e2:.2e} (bound 1e-5), build {t:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def scaling_runs():
    """Laplace at 256/512/1024 and Helmholtz IV at 512/1024 (three builds at 256 and 512 for timing)."""
    runs = {}
    for name, sizes in (("laplace", (256, 512, 1024)), ("helmholtz4", (512, 1024))):
        for n in sizes:
            reps = 3 if name == "laplace" and n < 1024 else 1
            builds, sol = [], None
            for _ in range(reps):
                sol, t, _, _ = accel(name, n)
                builds.append(t)
            solves = [time_solve(sol, 0) for _ in range(3)]
            runs[name, n] = dict(M=sol.nbytes(), build=statistics.median(builds), solve=statistics.median(solves))
    return runs


def test_criterion_4_memory_scaling(scaling_runs):
    M = {k: v["M"] for k, v in scaling_runs.items()}
    r1 = M["laplace", 512] / M["laplace", 256]
    r2 = M["laplace", 1024] / M["laplace", 512]
    rh = M["helmholtz4", 1024] / M["helmholtz4", 512]
    ok = 1.5 <= r1 <= 2.5 and 1.5 <= r2 <= 2.5 and rh > r2
    report(4, ok, f"Laplace M ratios {r1:.2f}, {r2:.2f} (in [1.5, 2.5]); Helmholtz IV 1024/512 {rh:.2f} > {r2:.2f}")
    assert ok


def test_criterion_5_time_scaling(scaling_runs):
    a, b = scaling_runs["laplace", 256], scaling_runs["laplace", 512]
    rb, rs = b["build"] / a["build"], b["solve"] / a["solve"]
    ok = rb <= 5 and rs <= 3
    report(5, True if ok else "WARN", f"Laplace 512/256 build ratio {rb:.2f} (<= 5), solve ratio {rs:.2f} (<= 3), "
                                       "advisory")
    if not ok:
        warnings.warn(f"timing ratios above target: build {rb:.2f}, solve {rs:.2f}")


def test_criterion_6_hbs_property_suite():
    here = Path(__file__).parent
    selection = ("test_roundtrip or test_apply_consistency or test_onelevel_inverse_is_inverse or "
                 "test_inverse_roundtrip or test_add_within_tolerance or test_lowrank_conversion_property")
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(here / "test_hbs.py"),
                          str(here / "test_hbs_ops.py"), "-k", selection], capture_output=True, text=True, cwd=here.parent)
    t = time.perf_counter() - t0
    summary = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    ok = res.returncode == 0 and "6 passed" in summary
    report(6, ok, f"{summary} (100 trials each, {t:.0f}s)")
    assert ok, res.stdout[-3000:]


def test_criterion_7_body_loads():
    n = 128
    spec = catalog("random1", n)
    op = discretize(spec)
    tree = build_tree(n, BIG_LEAF)
    base = []
    for _ in range(3):
        t0 = time.perf_counter()
        build_root_accel(spec, tree, EPS, BIG_CROSS, op=op)
        base.append(time.perf_counter() - t0)
    t_base = statistics.median(base)
    rng = np.random.default_rng(0)
    errs, times = {}, {}
    for count in (10, 100):
        loads = clustered_loads(n, count, seed=count)
        builds = []
        for _ in range(3 if count == 10 else 1):
            t0 = time.perf_counter()
            sol = build_body_operator(spec, tree, loads, EPS, crossover=BIG_CROSS, op=op)
            builds.append(time.perf_counter() - t0)
        times[count] = statistics.median(builds)
        g, fhat = random_unit(sol.size, count), rng.standard_normal(count)
        rhs = np.zeros(op.size)
        rhs[sol.boundary] = g
        rhs[loads.nodes] += fhat
        ref = full_solve(op, rhs)[sol.boundary]
        errs[count] = np.linalg.norm(sol.solve_with_load(g, fhat) - ref) / np.linalg.norm(ref)
    ratio = times[10] / t_base
    ok = max(errs.values()) <= 1e-5 and ratio <= 1.5
    report(7, ok, f"errors {errs[10]:.1e} (10 loads), {errs[100]:.1e} (100 loads), bound 1e-5; "
                  f"build ratio {ratio:.2f} (<= 1.5)")
    assert ok


def test_criterion_8_resonance():
    sol, _, spec, op = accel("helmholtz3", 256)
    _, e2 = error_metrics(sol, spec, seed=0, op=op)
    lap, _, lspec, lop = accel("laplace", 256)
    _, e2_lap = error_metrics(lap, lspec, seed=0, op=lop)
    ok = e2 >= 10 * e2_lap
    report(8, ok, f"Helmholtz III e2 {e2:.2e} vs Laplace e2 {e2_lap:.2e} (needs >= 10x)")
    assert ok
