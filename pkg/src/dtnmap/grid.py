"""Five-point discretization on the unit square and the quadtree of boxes.

The n x n grid has its outermost ring reserved for Dirichlet data; the
(n-2) x (n-2) interior nodes are the unknowns.  Unknown (i, j) (column i,
row j, both 0-based) has global index ``j * (n - 2) + i`` and sits at
``x = (i + 1) h``, ``y = (j + 1) h`` with ``h = 1 / (n - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

CoeffFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

SEGMENT_NAMES = ("SW", "S", "SE", "E", "NE", "N", "NW", "W")


def _zero(x, y):
    return np.zeros_like(x)


@dataclass(frozen=True)
class ProblemSpec:
    """One discretized elliptic operator on an n x n grid."""

    n: int
    coeff_b: CoeffFn = _zero
    coeff_c: CoeffFn = _zero
    coeff_d: CoeffFn = _zero
    mode: str = "continuum"
    conductivity_range: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    name: str = "custom"

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def m(self) -> int:
        """Unknowns per side."""
        return self.n - 2

    def conductivities(self) -> tuple[np.ndarray, np.ndarray]:
        """Link conductivities of the full grid (network mode).

        Returns ``(horiz, vert)`` with ``horiz[j, i]`` the link between grid
        points (i, j) and (i+1, j), shape (n, n-1), and ``vert[j, i]`` the
        link between (i, j) and (i, j+1), shape (n-1, n).
        """
        lo, hi = self.conductivity_range
        if not (0 < lo <= hi):
            raise ValueError(f"conductivity range must be positive, got {self.conductivity_range}")
        rng = np.random.default_rng(self.seed)
        n = self.n
        horiz = rng.uniform(lo, hi, size=(n, n - 1))
        vert = rng.uniform(lo, hi, size=(n - 1, n))
        return horiz, vert


@dataclass(frozen=True)
class StencilRow:
    center: int
    entries: tuple[tuple[int, float], ...]


@dataclass
class DiscreteOperator:
    """Assembled operator on the unknowns plus the Dirichlet forcing map.

    ``A`` acts on the unknowns.  ``dirichlet`` maps values on the Dirichlet
    ring (ordered counterclockwise from the southwest corner, see
    :func:`dirichlet_ring`) to their contribution to each unknown's equation;
    at solve time the load is ``f - dirichlet @ g``.
    """

    spec: ProblemSpec
    A: sp.csr_matrix
    dirichlet: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def row(self, k: int) -> StencilRow:
        lo, hi = self.A.indptr[k], self.A.indptr[k + 1]
        cols = self.A.indices[lo:hi]
        vals = self.A.data[lo:hi]
        return StencilRow(k, tuple((int(c), float(v)) for c, v in zip(cols, vals)))

    def dirichlet_load(self, g: np.ndarray) -> np.ndarray:
        """Right-hand side produced by Dirichlet values ``g`` on the outer ring."""
        return -(self.dirichlet @ g)


def dirichlet_ring(n: int) -> np.ndarray:
    """Grid coordinates (ix, iy) of the Dirichlet ring, counterclockwise from (0, 0)."""
    pts = [(i, 0) for i in range(n - 1)]
    pts += [(n - 1, j) for j in range(n - 1)]
    pts += [(i, n - 1) for i in range(n - 1, 0, -1)]
    pts += [(0, j) for j in range(n - 1, 0, -1)]
    return np.array(pts, dtype=np.int64)


def _eval_field(fn: CoeffFn, x: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
    vals = np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"coefficient {name} is not finite on the grid")
    return vals


def discretize(spec: ProblemSpec) -> DiscreteOperator:
    """Assemble the five-point operator for ``spec``.

    Continuum rows are
    ``(4u - u_n - u_s - u_w - u_e)/h^2 + b (u_e - u_w)/h + c (u_n - u_s)/h + d u``
    (the convection terms carry 1/h, not 1/(2h)).  Network rows are
    ``sum_links c_l (u_k - u_nb)``.
    """
    n = spec.n
    if n < 4:
        raise ValueError(f"grid needs n >= 4, got {n}")
    if spec.mode not in ("continuum", "network"):
        raise ValueError(f"unknown mode {spec.mode!r}")
    m = n - 2
    h = spec.h

    # grid coordinates of every unknown, row-major over (j, i)
    jj, ii = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    gx = (ii + 1).ravel()
    gy = (jj + 1).ravel()

    if spec.mode == "continuum":
        x, y = gx * h, gy * h
        b = _eval_field(spec.coeff_b, x, y, "b")
        c = _eval_field(spec.coeff_c, x, y, "c")
        d = _eval_field(spec.coeff_d, x, y, "d")
        center = 4.0 / h**2 + d
        east = -1.0 / h**2 + b / h
        west = -1.0 / h**2 - b / h
        north = -1.0 / h**2 + c / h
        south = -1.0 / h**2 - c / h
    else:
        horiz, vert = spec.conductivities()
        east = -horiz[gy, gx]
        west = -horiz[gy, gx - 1]
        north = -vert[gy, gx]
        south = -vert[gy - 1, gx]
        center = -(east + west + north + south)

    ring = dirichlet_ring(n)
    ring_index = {(int(a), int(b_)): r for r, (a, b_) in enumerate(ring)}

    rows, cols, vals = [], [], []
    drows, dcols, dvals = [], [], []
    k = np.arange(m * m)
    rows.append(k)
    cols.append(k)
    vals.append(center)
    for coef, dx, dy in ((east, 1, 0), (west, -1, 0), (north, 0, 1), (south, 0, -1)):
        nx, ny = gx + dx, gy + dy
        inside = (nx >= 1) & (nx <= m) & (ny >= 1) & (ny <= m)
        rows.append(k[inside])
        cols.append((ny[inside] - 1) * m + (nx[inside] - 1))
        vals.append(coef[inside])
        for kk in np.flatnonzero(~inside):
            drows.append(kk)
            dcols.append(ring_index[(int(nx[kk]), int(ny[kk]))])
            dvals.append(coef[kk])
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m)
    )
    A.sum_duplicates()
    A.sort_indices()
    D = sp.csr_matrix((dvals, (drows, dcols)), shape=(m * m, len(ring)))
    return DiscreteOperator(spec, A, D)


# ---------------------------------------------------------------------------
# boxes


def split_band(lo: int, hi: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Halve [lo, hi); the lower half takes the extra index."""
    mid = lo + (hi - lo + 1) // 2
    return (lo, mid), (mid, hi)


def box_segments(i0: int, i1: int, j0: int, j1: int, m: int) -> dict[str, np.ndarray]:
    """Perimeter of the box [i0, i1) x [j0, j1) split into corners and sides.

    Sides exclude corners.  Concatenating in ``SEGMENT_NAMES`` order walks the
    perimeter counterclockwise from the southwest corner.  Requires width and
    height >= 2.
    """
    if i1 - i0 < 2 or j1 - j0 < 2:
        raise ValueError("segments need a box of width and height >= 2")
    idx = lambda i, j: j * m + i  # noqa: E731
    return {
        "SW": np.array([idx(i0, j0)]),
        "S": np.array([idx(i, j0) for i in range(i0 + 1, i1 - 1)], dtype=np.int64),
        "SE": np.array([idx(i1 - 1, j0)]),
        "E": np.array([idx(i1 - 1, j) for j in range(j0 + 1, j1 - 1)], dtype=np.int64),
        "NE": np.array([idx(i1 - 1, j1 - 1)]),
        "N": np.array([idx(i, j1 - 1) for i in range(i1 - 2, i0, -1)], dtype=np.int64),
        "NW": np.array([idx(i0, j1 - 1)]),
        "W": np.array([idx(i0, j) for j in range(j1 - 2, j0, -1)], dtype=np.int64),
    }


def box_perimeter(i0: int, i1: int, j0: int, j1: int, m: int) -> np.ndarray:
    """Boundary nodes of a box, counterclockwise from the southwest corner.

    Degenerate boxes (one node wide) are walked south to north or west to east.
    """
    w, hgt = i1 - i0, j1 - j0
    if w >= 2 and hgt >= 2:
        segs = box_segments(i0, i1, j0, j1, m)
        return np.concatenate([segs[s] for s in SEGMENT_NAMES])
    jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
    return (jj * m + ii).ravel() if hgt == 1 else (jj * m + ii).T.ravel()


@dataclass
class Box:
    id: int
    level: int
    cols: tuple[int, int]
    rows: tuple[int, int]
    m: int
    parent: int = -1
    children: tuple[int, ...] = ()  # SW, SE, NW, NE
    nodes: np.ndarray = field(default=None, repr=False)
    interior: np.ndarray = field(default=None, repr=False)
    boundary: np.ndarray = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def shape(self) -> tuple[int, int]:
        return self.cols[1] - self.cols[0], self.rows[1] - self.rows[0]


def box_sets(cols, rows, m):
    """(nodes, interior, boundary) of a rectangle of unknowns."""
    (i0, i1), (j0, j1) = cols, rows
    jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
    nodes = (jj * m + ii).ravel()
    inner = (ii > i0) & (ii < i1 - 1) & (jj > j0) & (jj < j1 - 1)
    interior = nodes[inner.ravel()]
    boundary = box_perimeter(i0, i1, j0, j1, m)
    return nodes, interior, boundary


@dataclass
class BoxTree:
    n: int
    n_leaf: int
    L: int
    boxes: list[Box]

    @property
    def m(self) -> int:
        return self.n - 2

    @property
    def root(self) -> Box:
        return self.boxes[0]

    def level(self, ell: int) -> list[Box]:
        return [b for b in self.boxes if b.level == ell]

    def leaves(self) -> list[Box]:
        return [b for b in self.boxes if b.is_leaf]


def levels_for(n: int, n_leaf: int) -> int:
    """Smallest L such that 4^L equal boxes hold at most n_leaf of the n^2 grid points."""
    L = 0
    while n * n > n_leaf * 4**L:
        L += 1
    return L


def build_tree(n: int, n_leaf: int = 4096, L: Optional[int] = None) -> BoxTree:
    """Quadtree over the unknowns; level 0 is the root, level L the leaves."""
    if n < 4:
        raise ValueError(f"grid needs n >= 4, got {n}")
    if n_leaf < 16:
        raise ValueError(f"N_leaf must be >= 16, got {n_leaf}")
    m = n - 2
    if L is None:
        L = levels_for(n, n_leaf)
    if 2**L > m:
        raise ValueError(f"{2**L} boxes per side do not fit {m} unknowns per side")

    boxes: list[Box] = []

    def make(level, cols, rows, parent):
        nodes, interior, boundary = box_sets(cols, rows, m)
        b = Box(len(boxes), level, cols, rows, m, parent, (), nodes, interior, boundary)
        boxes.append(b)
        return b

    make(0, (0, m), (0, m), -1)
    frontier = [0]
    for level in range(1, L + 1):
        nxt = []
        for pid in frontier:
            p = boxes[pid]
            cw, ce = split_band(*p.cols)
            rs, rn = split_band(*p.rows)
            kids = [make(level, c, r, pid) for c, r in ((cw, rs), (ce, rs), (cw, rn), (ce, rn))]
            p.children = tuple(k.id for k in kids)
            nxt.extend(p.children)
        frontier = nxt
    return BoxTree(n, n_leaf, L, boxes)


def submatrix(A: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    """``A[rows][:, cols]`` at a cost set by the selected rows only.

    scipy's column indexing allocates a length-N work array per call, which
    dominates when thousands of small boxes slice a large operator.
    """
    sub = A[rows].tocoo()
    cols = np.asarray(cols)
    order = np.argsort(cols, kind="stable")
    where = np.searchsorted(cols[order], sub.col)
    where = np.minimum(where, len(cols) - 1) if len(cols) else where
    hit = (cols[order][where] == sub.col) if len(cols) else np.zeros(len(sub.col), bool)
    return sp.csr_matrix(
        (sub.data[hit], (sub.row[hit], order[where[hit]])), shape=(len(rows), len(cols))
    )
