"""Hierarchically block separable (HBS) matrices.

An :class:`HbsMatrix` lives on a binary :class:`IndexTree` of contiguous index
ranges.  Leaves carry the dense diagonal block ``D`` and a column/row basis
``U``/``V``; a parent carries the sibling interaction blocks ``B12``/``B21``
and, unless it is the root, transfer matrices ``U``/``V`` expressed in the
concatenated bases of its two children.
"""

from __future__ import annotations

import io
import struct
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

Nested = Union[int, tuple]


def truncation_rank(s: np.ndarray, eps: float, floor: float = 0.0) -> int:
    """Number of singular values above ``max(eps * s[0], floor)``."""
    if s.size == 0 or s[0] <= floor:
        return 0
    return int(np.count_nonzero(s > max(eps * s[0], floor)))


@dataclass(frozen=True, eq=False)
class IndexTree:
    """Binary tree of contiguous index ranges, nodes in breadth-first order."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]
    children: tuple[Optional[tuple[int, int]], ...]
    parent: tuple[int, ...]
    level: tuple[int, ...]
    paths: tuple[tuple[int, ...], ...]

    @classmethod
    def from_nested(cls, nested: Nested) -> "IndexTree":
        lo, hi, children, parent, level, paths = [], [], [], [], [], []
        queue = deque([(nested, 0, -1, 0, ())])
        pending = {}
        while queue:
            sub, start, par, lev, path = queue.popleft()
            idx = len(lo)
            size = _nested_size(sub)
            lo.append(start)
            hi.append(start + size)
            parent.append(par)
            level.append(lev)
            paths.append(path)
            children.append(None)
            if par >= 0:
                pending.setdefault(par, []).append(idx)
                if len(pending[par]) == 2:
                    children[par] = tuple(pending.pop(par))
            if isinstance(sub, tuple):
                left, right = sub
                queue.append((left, start, idx, lev + 1, path + (0,)))
                queue.append((right, start + _nested_size(left), idx, lev + 1, path + (1,)))
        return cls(tuple(lo), tuple(hi), tuple(children), tuple(parent), tuple(level), tuple(paths))

    @property
    def size(self) -> int:
        return self.hi[0]

    @property
    def num_nodes(self) -> int:
        return len(self.lo)

    @property
    def depth(self) -> int:
        return max(self.level)

    def is_leaf(self, t: int) -> bool:
        return self.children[t] is None

    def leaves(self) -> list[int]:
        return [t for t in range(self.num_nodes) if self.children[t] is None]

    def parents(self) -> list[int]:
        return [t for t in range(self.num_nodes) if self.children[t] is not None]

    def node_size(self, t: int) -> int:
        return self.hi[t] - self.lo[t]

    def nested(self, t: int = 0) -> Nested:
        if self.children[t] is None:
            return self.node_size(t)
        a, b = self.children[t]
        return (self.nested(a), self.nested(b))

    def same_as(self, other: "IndexTree") -> bool:
        return self.lo == other.lo and self.hi == other.hi and self.children == other.children

    def path_index(self) -> dict[tuple[int, ...], int]:
        return {p: i for i, p in enumerate(self.paths)}


def _nested_size(sub: Nested) -> int:
    if isinstance(sub, tuple):
        return _nested_size(sub[0]) + _nested_size(sub[1])
    return int(sub)


def _mirror_nested(sub: Nested) -> Nested:
    if isinstance(sub, tuple):
        return (_mirror_nested(sub[1]), _mirror_nested(sub[0]))
    return sub


def _split_nested(M: int, m: int) -> Nested:
    if M <= m:
        return M
    left = (M + 1) // 2
    return (_split_nested(left, m), _split_nested(M - left, m))


def build_index_tree(M: int, m: int = 64) -> IndexTree:
    """Balanced binary tree over ``M`` indices with leaves of at most ``m``.

    An odd interval gives the extra index to its left half.
    """
    if M < 1:
        raise ValueError(f"need M >= 1, got {M}")
    if m < 2:
        raise ValueError(f"leaf capacity must be >= 2, got {m}")
    return IndexTree.from_nested(_split_nested(M, m))


def mirror_tree(tree: IndexTree) -> IndexTree:
    """Tree of the reversed index vector."""
    return IndexTree.from_nested(_mirror_nested(tree.nested()))


def join_trees(a: IndexTree, b: IndexTree) -> IndexTree:
    return IndexTree.from_nested((a.nested(), b.nested()))


# ---------------------------------------------------------------------------
# factor containers


@dataclass
class LowRankFactors:
    """``L @ R`` with ``L`` of shape (rows, k) and ``R`` of shape (k, cols)."""

    L: np.ndarray
    R: np.ndarray

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape[0], self.R.shape[1]

    def dense(self) -> np.ndarray:
        return self.L @ self.R

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "LowRankFactors":
        return cls(np.zeros((rows, 0)), np.zeros((0, cols)))

    @classmethod
    def from_dense(cls, A: np.ndarray, eps: float, floor: float = 0.0) -> "LowRankFactors":
        if A.size == 0:
            return cls.zeros(*A.shape)
        u, s, vt = np.linalg.svd(A, full_matrices=False)
        k = truncation_rank(s, eps, floor)
        return cls(u[:, :k], s[:k, None] * vt[:k])

    def recompress(self, eps: float, floor: float = 0.0) -> "LowRankFactors":
        """Re-truncate via QR of both factors; the result has orthonormal ``L``."""
        rows, cols = self.shape
        if self.rank == 0 or rows == 0 or cols == 0:
            return LowRankFactors.zeros(rows, cols)
        ql, rl = np.linalg.qr(self.L)
        qr_, rr = np.linalg.qr(self.R.T)
        u, s, vt = np.linalg.svd(rl @ rr.T)
        k = truncation_rank(s, eps, floor)
        return LowRankFactors(ql @ u[:, :k], (s[:k, None] * vt[:k]) @ qr_.T)

    def __add__(self, other: "LowRankFactors") -> "LowRankFactors":
        return LowRankFactors(np.hstack([self.L, other.L]), np.vstack([self.R, other.R]))

    def __neg__(self) -> "LowRankFactors":
        return LowRankFactors(self.L, -self.R)

    def nbytes(self) -> int:
        return self.L.nbytes + self.R.nbytes


@dataclass
class HbsMatrix:
    """Telescoping factorization of an M x M matrix on ``tree``.

    Per-node lists are indexed by tree node; entries that do not apply to a
    node (``D`` on parents, ``B12`` on leaves, ``U``/``V`` on the root) are None.
    """

    tree: IndexTree
    D: list
    U: list
    V: list
    B12: list
    B21: list

    @property
    def size(self) -> int:
        return self.tree.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.size, self.size

    def rank(self, t: int) -> int:
        return 0 if self.U[t] is None else self.U[t].shape[1]

    def ranks(self) -> list[int]:
        return [self.rank(t) for t in range(self.tree.num_nodes)]

    def max_rank(self) -> int:
        return max(self.ranks())

    def copy(self) -> "HbsMatrix":
        cp = lambda xs: [None if x is None else x.copy() for x in xs]  # noqa: E731
        return HbsMatrix(self.tree, cp(self.D), cp(self.U), cp(self.V), cp(self.B12), cp(self.B21))

    def nbytes(self) -> int:
        return sum(x.nbytes for xs in (self.D, self.U, self.V, self.B12, self.B21) for x in xs if x is not None)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return apply(self, x)

    def __matmul__(self, x):
        return apply(self, x)

    def scale_norm(self) -> float:
        """Largest Frobenius norm among the stored D and B blocks."""
        vals = [np.linalg.norm(x) for xs in (self.D, self.B12, self.B21) for x in xs if x is not None and x.size]
        return max(vals, default=0.0)


def empty_hbs(tree: IndexTree) -> HbsMatrix:
    nn = tree.num_nodes
    return HbsMatrix(tree, [None] * nn, [None] * nn, [None] * nn, [None] * nn, [None] * nn)


def big_bases(H: HbsMatrix) -> tuple[list, list]:
    """Explicit (non-nested) column and row bases of every non-root node."""
    tree = H.tree
    Ub = [None] * tree.num_nodes
    Vb = [None] * tree.num_nodes
    for t in reversed(range(1, tree.num_nodes)):
        if tree.is_leaf(t):
            Ub[t], Vb[t] = H.U[t], H.V[t]
        else:
            a, b = tree.children[t]
            ka = H.rank(a)
            Ub[t] = np.vstack([Ub[a] @ H.U[t][:ka], Ub[b] @ H.U[t][ka:]])
            Vb[t] = np.vstack([Vb[a] @ H.V[t][:ka], Vb[b] @ H.V[t][ka:]])
    return Ub, Vb


def compress(H: np.ndarray, tree: IndexTree, eps: float, floor: Optional[float] = None,
             shared: bool = True) -> HbsMatrix:
    """HBS approximation of the dense matrix ``H`` on ``tree``.

    Bases come from truncated SVDs of the off-diagonal block rows and columns,
    processed leaves first so that parent bases are expressed in the
    children's bases.  Row and column ranks are kept equal per node.  With
    ``shared`` (the default) one basis spans both the block row and the
    transposed block column, so ``U = V`` at every node; this keeps
    ``V^* D^{-1} U`` invertible whenever the symmetric part of ``H`` is
    definite, which padded one-sided bases do not guarantee.
    """
    H = np.asarray(H, dtype=float)
    M = tree.size
    if H.shape != (M, M):
        raise ValueError(f"matrix shape {H.shape} does not match tree size {M}")
    if floor is None:
        floor = 1e-15 * max(np.linalg.norm(H), 1e-300)
    out = empty_hbs(tree)
    Ub = [None] * tree.num_nodes
    Vb = [None] * tree.num_nodes
    for t in reversed(range(tree.num_nodes)):
        lo, hi = tree.lo[t], tree.hi[t]
        if tree.is_leaf(t):
            out.D[t] = H[lo:hi, lo:hi].copy()
        if t == 0:
            break
        rest = np.r_[0:lo, hi:M]
        row = H[lo:hi][:, rest]
        col = H[rest][:, lo:hi].T
        if tree.is_leaf(t):
            left_u = left_v = None
        else:
            a, b = tree.children[t]
            left_u = _blockdiag(Ub[a], Ub[b])
            left_v = _blockdiag(Vb[a], Vb[b])
            row = left_u.T @ row
            col = left_v.T @ col
        if shared:
            uu, su, _ = np.linalg.svd(np.hstack([row, col]), full_matrices=False)
            k = truncation_rank(su, eps, floor)
            out.U[t] = uu[:, :k]
            out.V[t] = out.U[t].copy()
        else:
            uu, su, _ = np.linalg.svd(row, full_matrices=False)
            vv, sv, _ = np.linalg.svd(col, full_matrices=False)
            k = max(truncation_rank(su, eps, floor), truncation_rank(sv, eps, floor))
            out.U[t] = uu[:, :k]
            out.V[t] = vv[:, :k]
        Ub[t] = out.U[t] if left_u is None else left_u @ out.U[t]
        Vb[t] = out.V[t] if left_v is None else left_v @ out.V[t]
    for t in tree.parents():
        a, b = tree.children[t]
        sa, sb = slice(tree.lo[a], tree.hi[a]), slice(tree.lo[b], tree.hi[b])
        out.B12[t] = Ub[a].T @ H[sa, sb] @ Vb[b]
        out.B21[t] = Ub[b].T @ H[sb, sa] @ Vb[a]
    return out


def _blockdiag(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0] :, a.shape[1] :] = b
    return out


def apply(H: HbsMatrix, x: np.ndarray) -> np.ndarray:
    """``H @ x`` through the telescoping factorization (x may have columns)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != H.size:
        raise ValueError(f"vector of length {x.shape[0]} does not match HBS size {H.size}")
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    tree = H.tree
    nn = tree.num_nodes
    if nn == 1:
        y = H.D[0] @ X
        return y[:, 0] if vec else y
    xh = [None] * nn
    for t in reversed(range(1, nn)):
        if tree.is_leaf(t):
            xh[t] = H.V[t].T @ X[tree.lo[t] : tree.hi[t]]
        else:
            a, b = tree.children[t]
            xh[t] = H.V[t].T @ np.vstack([xh[a], xh[b]])
    yh = [None] * nn
    Y = np.empty((H.size, X.shape[1]))
    for t in range(nn):
        if tree.is_leaf(t):
            sl = slice(tree.lo[t], tree.hi[t])
            Y[sl] = H.D[t] @ X[sl] + H.U[t] @ yh[t]
            continue
        a, b = tree.children[t]
        ya = H.B12[t] @ xh[b]
        yb = H.B21[t] @ xh[a]
        if t != 0:
            up = H.U[t] @ yh[t]
            ka = H.rank(a)
            ya = ya + up[:ka]
            yb = yb + up[ka:]
        yh[a], yh[b] = ya, yb
    return Y[:, 0] if vec else Y


def reconstruct(H: HbsMatrix) -> np.ndarray:
    """Dense matrix represented by ``H`` (testing aid)."""
    return apply(H, np.eye(H.size))


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"HBS1"


def _write_array(buf, a: Optional[np.ndarray]):
    if a is None:
        buf.write(struct.pack("<qq", -1, -1))
        return
    a = np.ascontiguousarray(a, dtype="<f8")
    buf.write(struct.pack("<qq", a.shape[0], a.shape[1]))
    buf.write(a.tobytes(order="C"))


def _read_array(buf) -> Optional[np.ndarray]:
    r, c = struct.unpack("<qq", buf.read(16))
    if r < 0:
        return None
    return np.frombuffer(buf.read(8 * r * c), dtype="<f8").reshape(r, c).copy()


def serialize(H: HbsMatrix) -> bytes:
    """Binary layout (all little-endian):

    ``b"HBS1"``, int64 node count, then per node ``lo, hi, parent, child1,
    child2`` (int64, -1 for none); then the rank table (int64 per node); then
    per node in order the arrays D, U, V, B12, B21, each as int64 rows, int64
    cols (-1, -1 when absent) followed by row-major float64 values.
    """
    tree = H.tree
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<q", tree.num_nodes))
    for t in range(tree.num_nodes):
        ch = tree.children[t] or (-1, -1)
        buf.write(struct.pack("<5q", tree.lo[t], tree.hi[t], tree.parent[t], ch[0], ch[1]))
    buf.write(struct.pack(f"<{tree.num_nodes}q", *H.ranks()))
    for t in range(tree.num_nodes):
        for arr in (H.D[t], H.U[t], H.V[t], H.B12[t], H.B21[t]):
            _write_array(buf, arr)
    return buf.getvalue()


def deserialize(data: bytes) -> HbsMatrix:
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise ValueError("not an HBS payload")
    (nn,) = struct.unpack("<q", buf.read(8))
    rows = [struct.unpack("<5q", buf.read(40)) for _ in range(nn)]
    buf.read(8 * nn)  # rank table is derivable from the factors

    def nested(t):
        lo, hi, _, c1, c2 = rows[t]
        return hi - lo if c1 < 0 else (nested(c1), nested(c2))

    tree = IndexTree.from_nested(nested(0))
    if not all(tree.lo[t] == rows[t][0] and tree.hi[t] == rows[t][1] for t in range(nn)):
        raise ValueError("node order in payload is not breadth-first")
    H = empty_hbs(tree)
    for t in range(nn):
        H.D[t], H.U[t], H.V[t], H.B12[t], H.B21[t] = (_read_array(buf) for _ in range(5))
    return H
