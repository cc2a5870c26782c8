"""Nested dissection with dense Schur complements.

Every box carries the Schur complement of the operator onto its boundary.
Leaves eliminate their interior directly; parents merge two children at a
time (west pair, east pair, then west | east).  Optional load columns ride
along as boundary right-hand sides.
"""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import Box, BoxTree, DiscreteOperator, box_perimeter, discretize, submatrix
from .solution import SolutionOperator

log = logging.getLogger(__name__)

COND_WARN = 1e12


class FactorizationError(np.linalg.LinAlgError):
    """A block that must be inverted during the build is singular."""

    def __init__(self, what: str, box=None, level=None, cond: Optional[float] = None):
        self.what, self.box, self.level, self.cond = what, box, level, cond
        where = [] if box is None else [f"box {box}"]
        if level is not None:
            where.append(f"level {level}")
        msg = f"singular {what}" + (f" ({', '.join(where)})" if where else "")
        if cond is not None:
            msg += f", condition estimate {cond:.3e}"
        super().__init__(msg)


@dataclass
class SchurData:
    box: int
    boundary: np.ndarray
    S: np.ndarray
    rhs: Optional[np.ndarray] = None  # |P_b| x n_loads

    def __post_init__(self):
        nb = len(self.boundary)
        if self.S.shape != (nb, nb):
            raise ValueError(f"S has shape {self.S.shape} but the boundary has {nb} nodes")


# ---------------------------------------------------------------------------
# leaves


def leaf_schur(box: Box, op: DiscreteOperator, loads: Optional[sp.spmatrix] = None) -> SchurData:
    """``S = A_bb - A_bi A_ii^{-1} A_ib`` and ``rhs = f_b - A_bi A_ii^{-1} f_i``."""
    A = op.A
    b, i = box.boundary, box.interior
    Abb = submatrix(A, b, b).toarray()
    fb = fi = None
    if loads is not None:
        fb = loads[b].toarray()
        fi = loads[i].toarray()
    if len(i) == 0:
        return SchurData(box.id, b.copy(), Abb, fb)
    Aii = submatrix(A, i, i).tocsc()
    Aib = submatrix(A, i, b).toarray()
    Abi = submatrix(A, b, i)
    try:
        lu = splu(Aii)
    except RuntimeError:
        raise FactorizationError("interior block A_ii", box.id, box.level) from None
    rhs_cols = Aib if fi is None else np.hstack([Aib, fi])
    sol = lu.solve(rhs_cols)
    if not np.all(np.isfinite(sol)):
        raise FactorizationError("interior block A_ii", box.id, box.level)
    S = Abb - Abi @ sol[:, : len(b)]
    rhs = None if fb is None else fb - Abi @ sol[:, len(b) :]
    return SchurData(box.id, b.copy(), S, rhs)


# ---------------------------------------------------------------------------
# merges


def _block(A: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return submatrix(A, rows, cols).toarray()


def merge_two(a: SchurData, b: SchurData, A: sp.csr_matrix, union_boundary: np.ndarray,
              box: int = -1, level: Optional[int] = None) -> SchurData:
    """Schur complement of the union of two adjacent boxes.

    ``P_1``/``P_2`` are the nodes of ``a``/``b`` on the union boundary,
    ``P_3``/``P_4`` the remaining (interface) nodes, which are eliminated:

        S = [S11 A12; A21 S22] - [S13 A14; A23 S24] K^{-1} [S31 A32; A41 S42],
        K = [S33 A34; A43 S44].

    The result is ordered as ``union_boundary``.
    """
    in_a = np.isin(a.boundary, union_boundary)
    in_b = np.isin(b.boundary, union_boundary)
    i1, i3 = np.flatnonzero(in_a), np.flatnonzero(~in_a)
    i2, i4 = np.flatnonzero(in_b), np.flatnonzero(~in_b)
    P1, P3, P2, P4 = a.boundary[i1], a.boundary[i3], b.boundary[i2], b.boundary[i4]
    order = np.concatenate([P1, P2])
    if len(order) != len(union_boundary) or not np.array_equal(np.sort(order), np.sort(union_boundary)):
        raise ValueError("children boundaries do not cover the union boundary")

    top = np.block([[a.S[np.ix_(i1, i1)], _block(A, P1, P2)], [_block(A, P2, P1), b.S[np.ix_(i2, i2)]]])
    has_rhs = a.rhs is not None
    if has_rhs:
        r12 = np.vstack([a.rhs[i1], b.rhs[i2]])
    if len(P3) + len(P4) == 0:
        S, rhs = top, (r12 if has_rhs else None)
    else:
        K = np.block([[a.S[np.ix_(i3, i3)], _block(A, P3, P4)], [_block(A, P4, P3), b.S[np.ix_(i4, i4)]]])
        left = np.block([[a.S[np.ix_(i1, i3)], _block(A, P1, P4)], [_block(A, P2, P3), b.S[np.ix_(i2, i4)]]])
        right = np.block([[a.S[np.ix_(i3, i1)], _block(A, P3, P2)], [_block(A, P4, P1), b.S[np.ix_(i4, i2)]]])
        if has_rhs:
            right = np.hstack([right, np.vstack([a.rhs[i3], b.rhs[i4]])])
        lu, piv = sla.lu_factor(K, check_finite=False)
        if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0):
            raise FactorizationError("interface block [S33 A34; A43 S44]", box, level)
        X = sla.lu_solve((lu, piv), right, check_finite=False)
        nu = len(order)
        upd = left @ X
        S = top - upd[:, :nu]
        rhs = r12 - upd[:, nu:] if has_rhs else None

    pos = np.argsort(order)
    perm = pos[np.searchsorted(order[pos], union_boundary)]
    S = S[np.ix_(perm, perm)]
    if rhs is not None:
        rhs = rhs[perm]
    return SchurData(box, union_boundary.copy(), S, rhs)


def rect_boundary(cols, rows, m) -> np.ndarray:
    return box_perimeter(cols[0], cols[1], rows[0], rows[1], m)


def west_east_rects(tree: BoxTree, parent: Box):
    """Column/row ranges of the west and east halves of ``parent``."""
    sw, se, nw, ne = (tree.boxes[c] for c in parent.children)
    west = (sw.cols, (sw.rows[0], nw.rows[1]))
    east = (se.cols, (se.rows[0], ne.rows[1]))
    return west, east


def merge_four(children: list, A: sp.csr_matrix, tree: BoxTree, parent: Box) -> SchurData:
    """Merge (SW, SE, NW, NE) children: west pair, east pair, then west | east."""
    sw, se, nw, ne = children
    m = tree.m
    (wc, wr), (ec, er) = west_east_rects(tree, parent)
    west = merge_two(sw, nw, A, rect_boundary(wc, wr, m), parent.id, parent.level)
    east = merge_two(se, ne, A, rect_boundary(ec, er, m), parent.id, parent.level)
    return merge_two(west, east, A, parent.boundary, parent.id, parent.level)


# ---------------------------------------------------------------------------
# driver


def map_level(fn: Callable, items: list, threads: int = 1) -> list:
    """Run ``fn`` over the boxes of one level; returns once all are done."""
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def eliminate(op: DiscreteOperator, tree: BoxTree, loads: Optional[sp.spmatrix] = None, threads: int = 1,
              stop_level: int = 0, stats: Optional[list] = None) -> dict:
    """Bottom-up dense sweep; returns SchurData for every box at ``stop_level``."""
    A = op.A
    data: dict[int, SchurData] = {}
    t0 = time.perf_counter()
    leaves = tree.level(tree.L)
    for box, sd in zip(leaves, map_level(lambda bx: leaf_schur(bx, op, loads), leaves, threads)):
        data[box.id] = sd
    _record(stats, tree.L, leaves, t0, "dense")
    for level in range(tree.L - 1, stop_level - 1, -1):
        t0 = time.perf_counter()
        boxes = tree.level(level)

        def work(p):
            return merge_four([data[c] for c in p.children], A, tree, p)

        merged = map_level(work, boxes, threads)
        for p, sd in zip(boxes, merged):
            for c in p.children:
                del data[c]  # children are no longer needed
            data[p.id] = sd
        _record(stats, level, boxes, t0, "dense")
    return data


def _record(stats, level, boxes, t0, kind, **extra):
    if stats is None:
        return
    row = dict(level=level, boxes=len(boxes), max_boundary=max(len(b.boundary) for b in boxes),
               kind=kind, seconds=time.perf_counter() - t0, max_rank=0, bytes=0)
    row.update(extra)
    stats.append(row)


def invert_root(S: np.ndarray, box: int = 0) -> tuple[np.ndarray, float]:
    """``G = S^{-1}`` and the 1-norm condition estimate of ``S``."""
    try:
        G = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise FactorizationError("root Schur complement", box, 0, np.inf) from None
    if not np.all(np.isfinite(G)):
        raise FactorizationError("root Schur complement", box, 0, np.inf)
    cond = float(np.linalg.norm(S, 1) * np.linalg.norm(G, 1))
    if cond > COND_WARN:
        log.warning("root Schur complement is nearly singular: condition estimate %.3e", cond)
    else:
        log.info("root condition estimate %.3e", cond)
    return G, cond


def build_root_dense(spec, tree: BoxTree, loads: Optional[sp.spmatrix] = None, threads: int = 1,
                     op: Optional[DiscreteOperator] = None) -> tuple[SolutionOperator, Optional[np.ndarray]]:
    """Dense engine: root ``S`` and ``G = S^{-1}``.

    Returns the operator and the propagated root right-hand side (``None``
    without loads).
    """
    op = discretize(spec) if op is None else op
    stats: list = []
    root = eliminate(op, tree, loads, threads, 0, stats)[tree.root.id]
    G, cond = invert_root(root.S, tree.root.id)
    sol = SolutionOperator(root.boundary, "dense", root.S, G, cond=cond, levels=stats)
    return sol, root.rhs


# ---------------------------------------------------------------------------
# debugging dump


def write_schur(path, S: np.ndarray):
    """int64 rows, int64 cols (little-endian), then row-major float64 values."""
    S = np.ascontiguousarray(S, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2q", *S.shape))
        fh.write(S.tobytes())


def read_schur(path) -> np.ndarray:
    data = Path(path).read_bytes()
    r, c = struct.unpack("<2q", data[:16])
    return np.frombuffer(data[16:], dtype="<f8", count=r * c).reshape(r, c).copy()
