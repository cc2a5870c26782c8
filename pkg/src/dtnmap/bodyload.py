"""Sparse body loads: boundary response to loads at a few fixed interior nodes.

With loads ``fhat`` at ``N_body`` nodes and a boundary load ``g`` the root
boundary solution is ``v = G g + F fhat``.  Column j of ``F`` is the root
response to a unit load at node j, obtained by carrying the load columns
through the same bottom-up sweep that builds ``S`` and applying ``G`` at the
root.  ``F`` is then truncated to low rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .hbs import LowRankFactors


@dataclass(frozen=True)
class BodyLoadSet:
    """Global unknown indices of the load nodes on an ``n x n`` grid."""

    n: int
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).ravel()
        object.__setattr__(self, "nodes", nodes)
        m = self.n - 2
        if len(np.unique(nodes)) != len(nodes):
            raise ValueError("body-load nodes must be distinct")
        i, j = nodes % m, nodes // m
        bad = (nodes < 0) | (nodes >= m * m) | (i == 0) | (j == 0) | (i == m - 1) | (j == m - 1)
        if np.any(bad):
            raise ValueError(f"body-load nodes {nodes[bad].tolist()} are not strictly interior")

    @property
    def count(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_grid(cls, n: int, coords) -> "BodyLoadSet":
        """From ``(i, j)`` coordinates on the full ``n x n`` grid (ring included)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        m = n - 2
        i, j = coords[:, 0] - 1, coords[:, 1] - 1
        if np.any((i < 0) | (j < 0) | (i >= m) | (j >= m)):
            raise ValueError("body-load coordinates fall on or outside the Dirichlet ring")
        return cls(n, j * m + i)

    def matrix(self) -> sp.csr_matrix:
        """Unknowns x N_body indicator matrix (one unit load per column)."""
        N = (self.n - 2) ** 2
        k = self.count
        return sp.csr_matrix((np.ones(k), (self.nodes, np.arange(k))), shape=(N, k))


def read_load_file(path, n: int) -> BodyLoadSet:
    """Plain text, one ``i j`` (or ``i,j``) grid coordinate per line; ``#`` comments."""
    coords = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].replace(",", " ").split()
        if not line:
            continue
        if len(line) != 2:
            raise ValueError(f"{path}:{lineno}: expected two integers, got {raw!r}")
        coords.append((int(line[0]), int(line[1])))
    return BodyLoadSet.from_grid(n, np.array(coords, dtype=np.int64).reshape(-1, 2))


def clustered_loads(n: int, count: int, seed: int = 0, radius: Optional[int] = None) -> BodyLoadSet:
    """``count`` distinct nodes drawn near the grid center."""
    rng = np.random.default_rng(seed)
    m = n - 2
    radius = max(2, int(np.ceil(np.sqrt(count)))) if radius is None else radius
    c = m // 2
    lo, hi = max(1, c - radius), min(m - 1, c + radius + 1)
    ii, jj = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi))
    cand = (jj * m + ii).ravel()
    if count > len(cand):
        raise ValueError(f"cannot place {count} loads within radius {radius}")
    return BodyLoadSet(n, rng.choice(cand, size=count, replace=False))


def build_body_operator(spec, tree, loads: BodyLoadSet, eps: float = 1e-7, engine: str = "accel", **kw):
    """Build the solution operator together with ``F`` (low rank, truncated at ``eps``).

    Returns the operator with ``body`` and ``body_nodes`` filled in.
    """
    from .accel_nd import build_root_accel
    from .dense_nd import build_root_dense

    if loads.n != spec.n:
        raise ValueError(f"load set is for n={loads.n}, problem has n={spec.n}")
    f = loads.matrix() if loads.count else None
    if engine == "dense":
        kw = {k: v for k, v in kw.items() if k in ("threads", "op")}
        sol, rhs = build_root_dense(spec, tree, loads=f, **kw)
    else:
        sol, rhs = build_root_accel(spec, tree, eps, loads=f, **kw)
    if loads.count == 0:
        F = LowRankFactors.zeros(sol.size, 0)
    else:
        F = LowRankFactors.from_dense(sol.apply_dtn(rhs), eps)
    sol.body = F
    sol.body_nodes = loads.nodes
    return sol


def solve_with_load(sol, g: np.ndarray, fhat: np.ndarray, F: Optional[LowRankFactors] = None) -> np.ndarray:
    """``v = G g + F fhat``."""
    F = sol.body if F is None else F
    if F is None:
        raise ValueError("operator was built without body loads")
    g = np.asarray(g, dtype=float)
    fhat = np.asarray(fhat, dtype=float)
    if g.shape[0] != sol.size:
        raise ValueError(f"boundary vector has length {g.shape[0]}, expected {sol.size}")
    if fhat.shape[0] != F.shape[1]:
        raise ValueError(f"load vector has length {fhat.shape[0]}, expected {F.shape[1]}")
    return sol.apply_dtn(g) + F.L @ (F.R @ fhat)
