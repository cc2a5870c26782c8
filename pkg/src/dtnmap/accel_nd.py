"""Nested dissection with HBS-compressed Schur complements.

Below the crossover the dense engine runs unchanged.  From the crossover
level up, a box's Schur complement is held segment by segment: the boundary
is split into four corners and four side interiors (counterclockwise from the
southwest corner), each side's diagonal block is an HBS matrix and every
block between two different segments is a low-rank product.  A merge then
only has to re-group segments:

    horizontal (west | east)            vertical (south over north)
    S  = a.S a.SE b.SW b.S              E = a.E a.NE b.SE b.E
    N  = b.N b.NW a.NE a.N              W = b.W b.SW a.NW a.W

and the interface sides (a.E/b.W or a.N/b.S) are eliminated.  Side trees are
built geometrically (N and W as mirror images of S and E), so the interface
pair always lives on mirrored trees and ``A_43 S_33^{-1} A_34`` is an HBS
matrix on the tree of ``S_44``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dense_nd import SchurData, _record, eliminate, map_level, west_east_rects
from .grid import SEGMENT_NAMES, Box, BoxTree, DiscreteOperator, box_segments, discretize, submatrix
from .hbs import HbsMatrix, IndexTree, LowRankFactors, build_index_tree, compress, mirror_tree, reconstruct
from .hbs_ops import (
    add_hbs,
    add_lowrank,
    apply_inverse,
    dense_to_hbs_leaf,
    flip_hbs,
    inverse_to_hbs,
    invert_hbs,
    join_hbs,
    recompress,
    scale_hbs,
)
from .solution import SolutionOperator

log = logging.getLogger(__name__)

SIDES = ("S", "E", "N", "W")
REVERSED = ("N", "W")  # sides walked against the coordinate direction
FLOOR_REL = 1e-12
# T = S44 - A43 S33^{-1} A34 is often far worse conditioned than S itself, and
# its truncation error is amplified by cond(T) in every solve of step 1
INTERFACE_EPS = 1e-3

ORIENT = {
    "h": dict(
        p3="E",
        p4="W",
        union={
            "SW": [("a", "SW")],
            "S": [("a", "S"), ("a", "SE"), ("b", "SW"), ("b", "S")],
            "SE": [("b", "SE")],
            "E": [("b", "E")],
            "NE": [("b", "NE")],
            "N": [("b", "N"), ("b", "NW"), ("a", "NE"), ("a", "N")],
            "NW": [("a", "NW")],
            "W": [("a", "W")],
        },
    ),
    "v": dict(
        p3="N",
        p4="S",
        union={
            "SW": [("a", "SW")],
            "S": [("a", "S")],
            "SE": [("a", "SE")],
            "E": [("a", "E"), ("a", "NE"), ("b", "SE"), ("b", "E")],
            "NE": [("b", "NE")],
            "N": [("b", "N")],
            "NW": [("b", "NW")],
            "W": [("b", "W"), ("b", "SW"), ("a", "NW"), ("a", "W")],
        },
    ),
}


class RankWarning(UserWarning):
    pass


@dataclass
class StructuredSchur:
    """Segment-wise compressed Schur complement of one rectangle."""

    box: int
    cols: tuple[int, int]
    rows: tuple[int, int]
    segs: dict  # name -> global unknown indices
    diag: dict  # name -> HbsMatrix
    off: dict  # (name, name) -> LowRankFactors
    scale: float
    rhs: Optional[dict] = None  # name -> |seg| x n_loads

    @property
    def boundary(self) -> np.ndarray:
        return np.concatenate([self.segs[s] for s in SEGMENT_NAMES])

    def dense(self) -> np.ndarray:
        sizes = [len(self.segs[s]) for s in SEGMENT_NAMES]
        offs = np.cumsum([0] + sizes)
        out = np.zeros((offs[-1], offs[-1]))
        for i, p in enumerate(SEGMENT_NAMES):
            for j, q in enumerate(SEGMENT_NAMES):
                blk = reconstruct(self.diag[p]) if p == q else self.off[(p, q)].dense()
                out[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = blk
        return out

    def max_rank(self) -> int:
        r = max((h.max_rank() for h in self.diag.values()), default=0)
        return max([r] + [lr.rank for lr in self.off.values()])

    def nbytes(self) -> int:
        return sum(h.nbytes() for h in self.diag.values()) + sum(lr.nbytes() for lr in self.off.values())


def side_tree(name: str, k: int, leaf: int) -> IndexTree:
    if name not in SIDES:
        return IndexTree.from_nested(1)
    t = build_index_tree(k, leaf)
    return mirror_tree(t) if name in REVERSED else t


def structure_from_dense(sd: SchurData, cols, rows, m: int, eps: float, leaf: int = 64) -> StructuredSchur:
    """Split a dense Schur complement into segments and compress each block."""
    segs = box_segments(cols[0], cols[1], rows[0], rows[1], m)
    sizes = [len(segs[s]) for s in SEGMENT_NAMES]
    if min(sizes) == 0:
        raise ValueError(f"box {sd.box} is too thin to split into segments")
    if not np.array_equal(np.concatenate([segs[s] for s in SEGMENT_NAMES]), sd.boundary):
        raise ValueError(f"box {sd.box}: boundary order is not the counterclockwise perimeter")
    offs = dict(zip(SEGMENT_NAMES, np.cumsum([0] + sizes)[:-1]))
    sl = {s: slice(offs[s], offs[s] + len(segs[s])) for s in SEGMENT_NAMES}
    scale = float(np.linalg.norm(sd.S))
    floor = FLOOR_REL * scale
    diag, off = {}, {}
    for p in SEGMENT_NAMES:
        for q in SEGMENT_NAMES:
            blk = sd.S[sl[p], sl[q]]
            if p != q:
                off[(p, q)] = LowRankFactors.from_dense(blk, eps, floor)
            elif p in SIDES:
                diag[p] = compress(blk, side_tree(p, len(segs[p]), leaf), eps, floor)
            else:
                diag[p] = dense_to_hbs_leaf(blk)
    rhs = None if sd.rhs is None else {s: sd.rhs[sl[s]] for s in SEGMENT_NAMES}
    return StructuredSchur(sd.box, tuple(cols), tuple(rows), segs, diag, off, scale, rhs)


# ---------------------------------------------------------------------------
# low-rank bookkeeping


def _stack_blocks(row_sizes, col_sizes, blocks) -> LowRankFactors:
    """One low-rank product for a block matrix whose blocks are low-rank."""
    M, N = sum(row_sizes), sum(col_sizes)
    ro = np.cumsum([0] + list(row_sizes))
    co = np.cumsum([0] + list(col_sizes))
    Ls, Rs = [], []
    for (i, j), lr in blocks.items():
        if lr is None or lr.rank == 0:
            continue
        L = np.zeros((M, lr.rank))
        R = np.zeros((lr.rank, N))
        L[ro[i] : ro[i + 1]] = lr.L
        R[:, co[j] : co[j + 1]] = lr.R
        Ls.append(L)
        Rs.append(R)
    if not Ls:
        return LowRankFactors.zeros(M, N)
    return LowRankFactors(np.hstack(Ls), np.vstack(Rs))


class _Pieces:
    """Segments of two boxes viewed as pieces of the union."""

    def __init__(self, a: StructuredSchur, b: StructuredSchur, A: sp.csr_matrix, keep_a, keep_b):
        self.box = {"a": a, "b": b}
        self.coupling: dict = {}
        pa = [("a", s) for s in keep_a]
        pb = [("b", s) for s in keep_b]
        ia = np.concatenate([a.segs[s] for s in keep_a])
        ib = np.concatenate([b.segs[s] for s in keep_b])
        owner_a = np.repeat(np.arange(len(pa)), [len(a.segs[s]) for s in keep_a])
        owner_b = np.repeat(np.arange(len(pb)), [len(b.segs[s]) for s in keep_b])
        local_a = np.concatenate([np.arange(len(a.segs[s])) for s in keep_a])
        local_b = np.concatenate([np.arange(len(b.segs[s])) for s in keep_b])
        for rows_ids, cols_ids, prow, pcol, orow, ocol, lrow, lcol in (
            (ia, ib, pa, pb, owner_a, owner_b, local_a, local_b),
            (ib, ia, pb, pa, owner_b, owner_a, local_b, local_a),
        ):
            blk = submatrix(A, rows_ids, cols_ids).tocoo()
            for i, j, v in zip(blk.row, blk.col, blk.data):
                if v == 0:
                    continue
                p, q = prow[orow[i]], pcol[ocol[j]]
                L = np.zeros((len(self.ids(p)), 1))
                R = np.zeros((1, len(self.ids(q))))
                L[lrow[i], 0] = 1.0
                R[0, lcol[j]] = v
                term = LowRankFactors(L, R)
                self.coupling[(p, q)] = self.coupling[(p, q)] + term if (p, q) in self.coupling else term

    def ids(self, p) -> np.ndarray:
        return self.box[p[0]].segs[p[1]]

    def diag(self, p) -> HbsMatrix:
        return self.box[p[0]].diag[p[1]]

    def off(self, p, q) -> Optional[LowRankFactors]:
        if p[0] == q[0]:
            return self.box[p[0]].off[(p[1], q[1])]
        return self.coupling.get((p, q))

    def rhs(self, p):
        r = self.box[p[0]].rhs
        return None if r is None else r[p[1]]

    def block(self, rows: list, cols: list) -> LowRankFactors:
        blocks = {(i, j): self.off(p, q) for i, p in enumerate(rows) for j, q in enumerate(cols)}
        return _stack_blocks([len(self.ids(p)) for p in rows], [len(self.ids(q)) for q in cols], blocks)

    def assemble(self, pieces: list, eps: float, floor: float) -> HbsMatrix:
        """Diagonal block of a run of pieces as one HBS matrix (balanced joins).

        The joins are exact; the caller truncates once at the end.
        """
        if len(pieces) == 1:
            return self.diag(pieces[0])
        half = len(pieces) // 2
        left, right = pieces[:half], pieces[half:]
        H1 = self.assemble(left, eps, floor)
        H2 = self.assemble(right, eps, floor)
        ab = self.block(left, right).recompress(eps, floor)
        ba = self.block(right, left).recompress(eps, floor)
        return join_hbs(H1, H2, ab, ba, None)


def _antidiagonal(C: sp.csr_matrix, what: str) -> np.ndarray:
    """Values ``c`` with ``C = diag(c) J``; rejects any other sparsity."""
    C = C.tocoo()
    k = C.shape[0]
    if C.shape != (k, k) or C.nnz != k or np.any(C.col != k - 1 - C.row):
        raise ValueError(f"{what} coupling is not anti-diagonal")
    c = np.zeros(k)
    c[C.row] = C.data
    return c


# ---------------------------------------------------------------------------
# merge


class MergeError(np.linalg.LinAlgError):
    pass


def accel_merge(a: StructuredSchur, b: StructuredSchur, A: sp.csr_matrix, orient: str, eps: float,
                box: int = -1, cols=None, rows=None, rank_cap: int = 400) -> StructuredSchur:
    """Eliminate the shared interface of two structured boxes.

    ``orient`` is ``"h"`` (``a`` west of ``b``) or ``"v"`` (``a`` south of ``b``).
    """
    cfg = ORIENT[orient]
    p3, p4 = cfg["p3"], cfg["p4"]
    keep_a = [s for s in SEGMENT_NAMES if s != p3]
    keep_b = [s for s in SEGMENT_NAMES if s != p4]
    P = _Pieces(a, b, A, keep_a, keep_b)
    scale = max(a.scale, b.scale)
    floor = FLOOR_REL * scale
    id3, id4 = a.segs[p3], b.segs[p4]

    # the only couplings across the cut are the anti-diagonal A34/A43 and
    # corner-to-corner entries inside P1 x P2 (already in P.coupling)
    cross = (submatrix(A, np.concatenate([a.segs[s] for s in keep_a]), id4).nnz
             + submatrix(A, np.concatenate([b.segs[s] for s in keep_b]), id3).nnz)
    if cross:
        raise ValueError("stencil couples a boundary segment to the opposite interface")
    c34 = _antidiagonal(submatrix(A, id3, id4), "A34")
    c43 = _antidiagonal(submatrix(A, id4, id3), "A43")

    eps_i = eps * INTERFACE_EPS
    pa = [("a", s) for s in keep_a]
    pb = [("b", s) for s in keep_b]
    p3p, p4p = ("a", p3), ("b", p4)
    S31 = _stack_blocks([len(id3)], [len(P.ids(q)) for q in pa], {(0, j): a.off[(p3, q[1])] for j, q in enumerate(pa)}).recompress(eps_i, floor)
    S13 = _stack_blocks([len(P.ids(q)) for q in pa], [len(id3)], {(i, 0): a.off[(q[1], p3)] for i, q in enumerate(pa)}).recompress(eps_i, floor)
    S42 = _stack_blocks([len(id4)], [len(P.ids(q)) for q in pb], {(0, j): b.off[(p4, q[1])] for j, q in enumerate(pb)}).recompress(eps_i, floor)
    S24 = _stack_blocks([len(P.ids(q)) for q in pb], [len(id4)], {(i, 0): b.off[(q[1], p4)] for i, q in enumerate(pb)}).recompress(eps_i, floor)

    # Step 1: block solve against [S33 A34; A43 S44] with S33^{-1} and
    # T = S44 - A43 S33^{-1} A34 in HBS form
    try:
        inv33 = invert_hbs(P.diag(p3p))
        H33i = recompress(inverse_to_hbs(inv33), eps_i)
        M = scale_hbs(flip_hbs(H33i), c43, c34[::-1], alpha=-1.0)
        S44 = P.diag(p4p)
        if not M.tree.same_as(S44.tree):
            raise ValueError("interface trees are not mirror images")
        T = add_hbs(S44, M, eps_i)
        invT = invert_hbs(T)
    except np.linalg.LinAlgError as exc:
        raise MergeError(f"step 1 of merge into box {box}: {exc}") from exc

    k31, k42 = S31.rank, S42.rank
    r3, r4 = P.rhs(p3p), P.rhs(p4p)
    nr = 0 if r3 is None else r3.shape[1]
    Z3 = np.zeros((len(id3), k31 + k42 + nr))
    Z4 = np.zeros((len(id4), k31 + k42 + nr))
    Z3[:, :k31] = S31.L
    Z4[:, k31 : k31 + k42] = S42.L
    if nr:
        Z3[:, k31 + k42 :] = r3
        Z4[:, k31 + k42 :] = r4
    A34 = sp.csr_matrix((c34, (np.arange(len(id3)), np.arange(len(id3))[::-1])), shape=(len(id3), len(id4)))
    A43 = sp.csr_matrix((c43, (np.arange(len(id4)), np.arange(len(id4))[::-1])), shape=(len(id4), len(id3)))
    W3 = apply_inverse(inv33, Z3)
    X4 = apply_inverse(invT, Z4 - A43 @ W3)
    X3 = W3 - apply_inverse(inv33, A34 @ X4)

    # Step 2: the update is Lb C Rb with Lb = diag(L13, L24), Rb = diag(R31, R42)
    C = np.vstack([S13.R @ X3, S24.R @ X4])
    Cm, Cr = C[:, : k31 + k42], C[:, k31 + k42 :]
    r13, r24 = S13.rank, S24.rank
    offs_a = dict(zip(keep_a, np.cumsum([0] + [len(a.segs[s]) for s in keep_a])[:-1]))
    offs_b = dict(zip(keep_b, np.cumsum([0] + [len(b.segs[s]) for s in keep_b])[:-1]))

    def Lb(p):
        n_p = len(P.ids(p))
        out = np.zeros((n_p, r13 + r24))
        if p[0] == "a":
            o = offs_a[p[1]]
            out[:, :r13] = S13.L[o : o + n_p]
        else:
            o = offs_b[p[1]]
            out[:, r13:] = S24.L[o : o + n_p]
        return out

    def Rb(p):
        n_p = len(P.ids(p))
        out = np.zeros((k31 + k42, n_p))
        if p[0] == "a":
            o = offs_a[p[1]]
            out[:k31] = S31.R[:, o : o + n_p]
        else:
            o = offs_b[p[1]]
            out[k31:] = S42.R[:, o : o + n_p]
        return out

    # Step 3: regroup pieces into the union's segments and apply the update
    union = cfg["union"]
    Lu = {u: np.vstack([Lb(p) for p in union[u]]) for u in SEGMENT_NAMES}
    Ru = {u: Cm @ np.hstack([Rb(p) for p in union[u]]) for u in SEGMENT_NAMES}
    segs = {u: np.concatenate([P.ids(p) for p in union[u]]) for u in SEGMENT_NAMES}
    diag, off = {}, {}
    for u in SEGMENT_NAMES:
        H = P.assemble(union[u], eps, floor)
        diag[u] = add_lowrank(H, -Lu[u], Ru[u], eps, floor)
    for u in SEGMENT_NAMES:
        for w in SEGMENT_NAMES:
            if u == w:
                continue
            old = P.block(union[u], union[w])
            off[(u, w)] = (old + LowRankFactors(-Lu[u], Ru[w])).recompress(eps, floor)
    rhs = None
    if nr:
        rhs = {u: np.vstack([P.rhs(p) for p in union[u]]) - Lu[u] @ Cr for u in SEGMENT_NAMES}
    out = StructuredSchur(box, cols, rows, segs, diag, off, scale, rhs)
    r = out.max_rank()
    if r > rank_cap:
        log.warning("box %d: rank %d exceeds the cap %d", box, r, rank_cap)
    return out


# ---------------------------------------------------------------------------
# driver


def structured_level(tree: BoxTree, crossover: int) -> int:
    """Deepest level whose boxes are merged in compressed form, or -1."""
    deepest = -1
    for level in range(tree.L):
        boxes = tree.level(level)
        kids = [tree.boxes[c] for b in boxes for c in b.children]
        big = max(len(b.boundary) for b in boxes) >= crossover
        thick = all(min(k.shape) >= 3 for k in kids)
        if big and thick:
            deepest = level
        else:
            break
    return deepest


def merge_four_accel(children: list, A, tree: BoxTree, parent: Box, eps: float, rank_cap: int) -> StructuredSchur:
    sw, se, nw, ne = children
    (wc, wr), (ec, er) = west_east_rects(tree, parent)
    west = accel_merge(sw, nw, A, "v", eps, parent.id, wc, wr, rank_cap)
    east = accel_merge(se, ne, A, "v", eps, parent.id, ec, er, rank_cap)
    return accel_merge(west, east, A, "h", eps, parent.id, parent.cols, parent.rows, rank_cap)


def root_hbs(root: StructuredSchur, eps: float) -> HbsMatrix:
    """Whole root boundary (counterclockwise) as a single HBS matrix."""
    dummy = StructuredSchur(-1, (0, 0), (0, 0), {s: np.zeros(0, dtype=int) for s in SEGMENT_NAMES}, {}, {}, 0.0)
    P = _Pieces.__new__(_Pieces)
    P.box = {"a": root, "b": dummy}
    P.coupling = {}
    pieces = [("a", s) for s in SEGMENT_NAMES]
    floor = FLOOR_REL * root.scale
    return recompress(P.assemble(pieces, eps, floor), eps, floor)


def build_root_accel(spec, tree: BoxTree, eps: float = 1e-7, crossover: int = 1024, loads=None, threads: int = 1,
                     op: Optional[DiscreteOperator] = None, leaf: int = 64, rank_cap: int = 400):
    """Accelerated engine: root ``S`` as HBS plus inverse factors of ``G = S^{-1}``.

    Returns the operator and the propagated root right-hand side (``None``
    without loads).  When no level reaches the crossover the dense engine's
    root is returned unchanged.
    """
    from .dense_nd import invert_root

    op = discretize(spec) if op is None else op
    A = op.A
    stats: list = []
    top = structured_level(tree, crossover)
    data = eliminate(op, tree, loads, threads, top + 1, stats)
    if top < 0:
        root = data[tree.root.id]
        G, cond = invert_root(root.S, tree.root.id)
        return SolutionOperator(root.boundary, "accel", root.S, G, cond=cond, levels=stats), root.rhs

    t0 = time.perf_counter()
    kids = tree.level(top + 1)

    def convert(bx):
        return structure_from_dense(data[bx.id], bx.cols, bx.rows, tree.m, eps, leaf)

    sdata = dict(zip((bx.id for bx in kids), map_level(convert, kids, threads)))
    data.clear()
    _record(stats, top + 1, kids, t0, "compress", max_rank=max(s.max_rank() for s in sdata.values()),
            bytes=sum(s.nbytes() for s in sdata.values()))
    for level in range(top, -1, -1):
        t0 = time.perf_counter()
        boxes = tree.level(level)

        def work(p):
            return merge_four_accel([sdata[c] for c in p.children], A, tree, p, eps, rank_cap)

        merged = map_level(work, boxes, threads)
        for p, s in zip(boxes, merged):
            for c in p.children:
                del sdata[c]
            sdata[p.id] = s
        _record(stats, level, boxes, t0, "hbs", max_rank=max(s.max_rank() for s in merged),
                bytes=sum(s.nbytes() for s in merged))

    root = sdata[tree.root.id]
    t0 = time.perf_counter()
    S = root_hbs(root, eps)
    try:
        G = invert_hbs(S)
    except np.linalg.LinAlgError as exc:
        from .dense_nd import FactorizationError

        raise FactorizationError(f"root HBS inversion: {exc}", tree.root.id, 0) from exc
    stats.append(dict(level=-1, boxes=1, max_boundary=S.size, kind="root-inverse",
                      seconds=time.perf_counter() - t0, max_rank=S.max_rank(), bytes=S.nbytes() + G.nbytes()))
    rhs = None
    if root.rhs is not None:
        rhs = np.vstack([root.rhs[s] for s in SEGMENT_NAMES])
    sol = SolutionOperator(root.boundary, "accel", S, G, levels=stats)
    return sol, rhs


def apply_dtn(op: SolutionOperator, g: np.ndarray) -> np.ndarray:
    """``G g`` through the inverse factors (linear in the boundary size)."""
    return op.apply_dtn(g)


def write_level_csv(stats: list, path) -> None:
    """Per-level diagnostics: level, boxes, max_boundary, kind, seconds, max_rank, bytes."""
    import csv

    fields = ["level", "boxes", "max_boundary", "kind", "seconds", "max_rank", "bytes"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(stats)
