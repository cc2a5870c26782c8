"""Catalog of test operators and the discrete Laplacian spectrum."""

from __future__ import annotations

from functools import partial
from pathlib import Path

import numpy as np

from .grid import ProblemSpec

PROBLEMS = (
    "laplace",
    "diffconv1",
    "diffconv2",
    "diffconv3",
    "diffconv4",
    "helmholtz1",
    "helmholtz2",
    "helmholtz3",
    "helmholtz4",
    "random1",
    "random2",
)


def _const(value, x, y):
    return np.full_like(x, value, dtype=float)


def discrete_eigenvalue(p: int, q: int, n: int) -> float:
    """Eigenvalue (p, q) of the assembled Dirichlet Laplacian on an n x n grid."""
    if not (1 <= p <= n - 2 and 1 <= q <= n - 2):
        raise ValueError(f"mode ({p}, {q}) out of range for n={n}")
    h = 1.0 / (n - 1)
    # evaluate with the indices sorted so that (p, q) and (q, p) agree bitwise
    a, b = sorted((p, q))
    return (4.0 - 2.0 * np.cos(a * np.pi / (n - 1)) - 2.0 * np.cos(b * np.pi / (n - 1))) / h**2


def sorted_eigenvalues(n: int, count: int | None = None) -> list[tuple[float, int, int]]:
    """(lambda, p, q) ascending, ties broken by (p, q), multiplicity counted."""
    m = n - 2
    lam = [(discrete_eigenvalue(p, q, n), p, q) for p in range(1, m + 1) for q in range(1, m + 1)]
    lam.sort()
    return lam if count is None else lam[:count]


def tenth_eigenvalue(n: int) -> float:
    lam = sorted_eigenvalues(n)
    if len(lam) < 10:
        raise ValueError(f"n={n} has fewer than 10 interior modes")
    return lam[9][0]


def catalog(name: str, n: int, seed: int = 0) -> ProblemSpec:
    """ProblemSpec for one of the named test problems."""
    kw = dict(n=n, seed=seed, name=name)
    if name == "laplace":
        return ProblemSpec(**kw)
    if name == "diffconv1":
        return ProblemSpec(coeff_b=partial(_const, 100.0), **kw)
    if name == "diffconv2":
        return ProblemSpec(coeff_b=partial(_const, 1000.0), **kw)
    if name == "diffconv3":
        return ProblemSpec(
            coeff_b=lambda x, y: 125.0 * np.cos(4 * np.pi * y),
            coeff_c=lambda x, y: 125.0 * np.sin(4 * np.pi * x),
            **kw,
        )
    if name == "diffconv4":
        return ProblemSpec(
            coeff_b=lambda x, y: 125.0 * np.cos(4 * np.pi * x),
            coeff_c=lambda x, y: 125.0 * np.sin(4 * np.pi * y),
            **kw,
        )
    if name == "helmholtz1":
        return ProblemSpec(coeff_d=partial(_const, -100.0), **kw)
    if name == "helmholtz2":
        return ProblemSpec(coeff_d=partial(_const, -4005.0), **kw)
    if name == "helmholtz3":
        shift = -tenth_eigenvalue(n) + 1e-5
        return ProblemSpec(coeff_d=partial(_const, shift), **kw)
    if name == "helmholtz4":
        return ProblemSpec(coeff_d=partial(_const, -((2 * np.pi * n / 40) ** 2)), **kw)
    if name == "random1":
        return ProblemSpec(mode="network", conductivity_range=(1.0, 2.0), **kw)
    if name == "random2":
        return ProblemSpec(mode="network", conductivity_range=(1.0, 1000.0), **kw)
    raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")


CONFIG_KEYS = {"problem": str, "n": int, "nleaf": int, "epsilon": float, "seed": int, "crossover": int}


def load_config(path: str | Path) -> dict:
    """Read ``key=value`` lines (``#`` comments allowed).

    Recognised keys: problem, n, nleaf, epsilon (alias tolerance), seed, crossover.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower().replace("n_leaf", "nleaf").replace("tolerance", "epsilon")
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = CONFIG_KEYS[key](value)
    if "problem" in out and out["problem"] not in PROBLEMS:
        raise ValueError(f"{path}: unknown problem {out['problem']!r}")
    return out
