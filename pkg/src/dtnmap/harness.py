"""Benchmark CLI: build operators, time them, measure memory and accuracy.

One CSV row per (problem, n, engine) with the columns in ``COLUMNS``.
Exit codes: 0 success, 2 bad arguments, 3 build failure, 4 accuracy check
failure (with ``--check``) or a reference solve that did not converge.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from typing import Optional

import numpy as np

from .grid import build_tree, discretize
from .problems import PROBLEMS, catalog, load_config

log = logging.getLogger("dtnmap")

COLUMNS = ["problem", "n", "N", "engine", "epsilon", "crossover", "T_build_s", "T_solve_s", "M_bytes",
           "M_over_n", "e1", "e2", "max_rank", "status"]
DEFAULT_SWEEP = [64, 128, 256, 512]
EXIT_OK, EXIT_ARGS, EXIT_BUILD, EXIT_CHECK = 0, 2, 3, 4


def build(problem: str, n: int, engine: str, eps: float, crossover: int, nleaf: int, seed: int = 0,
          threads: int = 1, bodyloads: Optional[str] = None, op=None):
    """Build one operator; returns (SolutionOperator, seconds, discretized operator)."""
    from .accel_nd import build_root_accel
    from .bodyload import build_body_operator, read_load_file
    from .dense_nd import build_root_dense

    spec = catalog(problem, n, seed)
    op = discretize(spec) if op is None else op
    tree = build_tree(n, nleaf)
    t0 = time.perf_counter()
    if bodyloads:
        loads = read_load_file(bodyloads, n)
        sol = build_body_operator(spec, tree, loads, eps, engine=engine, crossover=crossover, threads=threads, op=op)
    elif engine == "dense":
        sol, _ = build_root_dense(spec, tree, threads=threads, op=op)
    else:
        sol, _ = build_root_accel(spec, tree, eps, crossover, threads=threads, op=op)
    return sol, time.perf_counter() - t0, op


def time_solve(sol, seed: int = 0, reps: int = 5) -> float:
    g = np.random.default_rng(seed).standard_normal(sol.size)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sol.apply_dtn(g)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_case(problem, n, engine, args) -> dict:
    from .dense_nd import FactorizationError
    from .reference import OracleError, error_metrics

    row = dict(problem=problem, n=n, N=n * n, engine=engine, epsilon=args.epsilon, crossover=args.crossover,
               T_build_s="", T_solve_s="", M_bytes="", M_over_n="", e1="", e2="", max_rank="", status="ok")
    builds = []
    try:
        for _ in range(max(1, args.repeat)):
            sol, tb, op = build(problem, n, engine, args.epsilon, args.crossover, args.nleaf, args.seed,
                                args.threads, args.bodyloads)
            builds.append(tb)
    except (FactorizationError, np.linalg.LinAlgError) as exc:
        log.error("%s n=%d %s: %s", problem, n, engine, exc)
        row["status"] = "build_failed"
        return row
    M = sol.nbytes()
    row.update(T_build_s=f"{statistics.median(builds):.6g}", T_solve_s=f"{time_solve(sol, args.seed):.6g}",
               M_bytes=M, M_over_n=f"{M / n:.6g}", max_rank=sol.max_rank())
    if not args.skip_errors:
        try:
            e1, e2 = error_metrics(sol, None, seed=args.seed, op=op)
        except OracleError as exc:
            log.error("%s n=%d %s: reference solve failed: %s", problem, n, engine, exc)
            row["status"] = "oracle_failed"
        else:
            row.update(e1=f"{e1:.3e}", e2=f"{e2:.3e}")
            if args.check and max(e1, e2) > args.check_tol:
                row["status"] = "check_failed"
    if args.diagnostics:
        from .accel_nd import write_level_csv

        write_level_csv(sol.levels, f"{args.diagnostics}_{problem}_{n}_{engine}.csv")
    return row


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtnmap", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file (problem, n, nleaf, epsilon, seed, crossover)")
    p.add_argument("--problem", nargs="+", choices=PROBLEMS, help="catalog problem(s)")
    p.add_argument("--n", nargs="+", type=int, help=f"grid size(s); default sweep {DEFAULT_SWEEP}")
    p.add_argument("--engine", choices=("dense", "accel", "both"), default="accel")
    p.add_argument("--epsilon", type=float, default=None, help="compression tolerance (default 1e-7)")
    p.add_argument("--crossover", type=int, default=None, help="boundary size where HBS arithmetic starts (default 1024)")
    p.add_argument("--nleaf", type=int, default=None, help="grid points per leaf box (default 4096)")
    p.add_argument("--seed", type=int, default=None, help="seed for conductivities and test vectors")
    p.add_argument("--threads", type=int, default=1, help="workers per tree level")
    p.add_argument("--repeat", type=int, default=1, help="builds per case; the median time is reported")
    p.add_argument("--check", action="store_true", help="exit 4 if e1 or e2 exceeds --check-tol")
    p.add_argument("--check-tol", type=float, default=1e-5)
    p.add_argument("--skip-errors", action="store_true", help="do not run the full-system oracle")
    p.add_argument("--bodyloads", metavar="FILE", help="body-load node list, one 'i j' per line")
    p.add_argument("--csv", metavar="PATH", help="write rows here instead of stdout")
    p.add_argument("--diagnostics", metavar="PREFIX", help="write per-level CSVs to PREFIX_<case>.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args, parser) -> argparse.Namespace:
    cfg = load_config(args.config) if args.config else {}
    defaults = dict(epsilon=1e-7, crossover=1024, nleaf=4096, seed=0)
    for key, val in defaults.items():
        if getattr(args, key) is None:
            setattr(args, key, cfg.get(key, val))
    if args.problem is None:
        args.problem = [cfg["problem"]] if "problem" in cfg else ["laplace"]
    if args.n is None:
        args.n = [cfg["n"]] if "n" in cfg else DEFAULT_SWEEP
    if any(n < 4 for n in args.n):
        parser.error("--n must be at least 4")
    if args.nleaf < 16:
        parser.error("--nleaf must be at least 16")
    if not args.epsilon > 0 or args.crossover < 1 or args.threads < 1:
        parser.error("--epsilon, --crossover and --threads must be positive")
    return args


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = resolve(parser.parse_args(argv), parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"dtnmap: {exc}", file=sys.stderr)
        return EXIT_ARGS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    engines = ["dense", "accel"] if args.engine == "both" else [args.engine]
    out = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else sys.stdout
    code = EXIT_OK
    try:
        writer = csv.DictWriter(out, fieldnames=COLUMNS)
        writer.writeheader()
        for problem in args.problem:
            for n in args.n:
                for engine in engines:
                    try:
                        row = run_case(problem, n, engine, args)
                    except ValueError as exc:
                        print(f"dtnmap: {exc}", file=sys.stderr)
                        return EXIT_ARGS
                    writer.writerow(row)
                    out.flush()
                    if row["status"] == "build_failed":
                        code = EXIT_BUILD
                    elif row["status"] in ("check_failed", "oracle_failed") and code == EXIT_OK:
                        code = EXIT_CHECK
    finally:
        if args.csv:
            out.close()
    return code


def read_rows(path) -> list[dict]:
    """Parse a CSV written by :func:`main`."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
