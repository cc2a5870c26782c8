"""Fast arithmetic on block separable and HBS matrices."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hbs import (
    HbsMatrix,
    IndexTree,
    LowRankFactors,
    _blockdiag,
    empty_hbs,
    join_trees,
    mirror_tree,
    truncation_rank,
)

log = logging.getLogger(__name__)

# condition numbers above this are reported but not regularized
COND_WARN = 1e12


class HbsSingularError(np.linalg.LinAlgError):
    """An inner block of a structured inversion could not be inverted."""

    def __init__(self, which: str, node: Optional[int] = None, level: Optional[int] = None):
        self.which, self.node, self.level = which, node, level
        where = "" if node is None else f" at node {node} (level {level})"
        super().__init__(f"singular {which}{where}")


def _inv(A: np.ndarray, which: str, node=None, level=None) -> np.ndarray:
    if A.size == 0:
        return np.zeros_like(A)
    try:
        Ai = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise HbsSingularError(which, node, level) from None
    if not np.all(np.isfinite(Ai)):
        raise HbsSingularError(which, node, level)
    cond = np.linalg.norm(A, 1) * np.linalg.norm(Ai, 1)
    if cond > COND_WARN:
        log.warning("ill-conditioned %s at node %s (cond_1 ~ %.2e)", which, node, cond)
    return Ai


# ---------------------------------------------------------------------------
# one level


@dataclass
class BlockSeparable:
    """``H = blockdiag(U) Htilde blockdiag(V)^* + blockdiag(D)`` with p blocks."""

    D: list
    U: list
    V: list
    Htilde: np.ndarray  # (sum k) x (sum k), zero diagonal blocks

    def dense(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.U) @ self.Htilde @ block_diag(*self.V).T + block_diag(*self.D)


@dataclass
class OneLevelInverse:
    E: list
    F: list
    G: list
    Dhat: list
    inner_inv: np.ndarray  # (Htilde + blockdiag(Dhat))^{-1}

    def dense(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.E) @ self.inner_inv @ block_diag(*self.F).T + block_diag(*self.G)

    def apply(self, x: np.ndarray) -> np.ndarray:
        sizes = [g.shape[0] for g in self.G]
        offs = np.cumsum([0] + sizes)
        xh = np.concatenate([self.F[i].T @ x[offs[i] : offs[i + 1]] for i in range(len(sizes))])
        yh = self.inner_inv @ xh
        koffs = np.cumsum([0] + [e.shape[1] for e in self.E])
        return np.concatenate(
            [self.E[i] @ yh[koffs[i] : koffs[i + 1]] + self.G[i] @ x[offs[i] : offs[i + 1]] for i in range(len(sizes))]
        )


def invert_bs_onelevel(H: BlockSeparable) -> OneLevelInverse:
    """Woodbury-type inverse: ``H^{-1} = E (Htilde + Dhat)^{-1} F^* + G``."""
    E, F, G, Dhat = [], [], [], []
    for i, (D, U, V) in enumerate(zip(H.D, H.U, H.V)):
        Di = _inv(D, "D", i)
        dh = _inv(V.T @ Di @ U, "Dhat", i)
        E.append(Di @ U @ dh)
        F.append((dh @ V.T @ Di).T)
        G.append(Di - Di @ U @ dh @ V.T @ Di)
        Dhat.append(dh)
    from scipy.linalg import block_diag

    inner = H.Htilde + block_diag(*Dhat)
    return OneLevelInverse(E, F, G, Dhat, _inv(inner, "Htilde + Dhat"))


# ---------------------------------------------------------------------------
# multilevel inversion


@dataclass
class InverseFactors:
    """Compressed ``H^{-1}``: per non-root node E, F, G and the root block."""

    tree: IndexTree
    E: list
    F: list
    G: list
    root: np.ndarray

    @property
    def size(self) -> int:
        return self.tree.size

    def nbytes(self) -> int:
        return self.root.nbytes + sum(x.nbytes for xs in (self.E, self.F, self.G) for x in xs if x is not None)

    def __matmul__(self, x):
        return apply_inverse(self, x)


def invert_hbs(H: HbsMatrix) -> InverseFactors:
    """Multilevel inversion, leaves to root."""
    tree = H.tree
    nn = tree.num_nodes
    E, F, G = [None] * nn, [None] * nn, [None] * nn
    if nn == 1:
        return InverseFactors(tree, E, F, G, _inv(H.D[0], "D", 0, 0))
    Dhat = [None] * nn
    for t in reversed(range(1, nn)):
        if tree.is_leaf(t):
            Dt = H.D[t]
        else:
            a, b = tree.children[t]
            Dt = np.block([[Dhat[a], H.B12[t]], [H.B21[t], Dhat[b]]])
        U, V = H.U[t], H.V[t]
        if U.shape[1] != V.shape[1]:
            raise ValueError(f"node {t}: row rank {U.shape[1]} != column rank {V.shape[1]}")
        Di = _inv(Dt, "D~", t, tree.level[t])
        DiU = Di @ U
        VDi = V.T @ Di
        dh = _inv(V.T @ DiU, "Dhat", t, tree.level[t])
        Dhat[t] = dh
        E[t] = DiU @ dh
        Ft = dh @ VDi
        F[t] = Ft.T
        G[t] = Di - DiU @ Ft
    a, b = tree.children[0]
    root = np.block([[Dhat[a], H.B12[0]], [H.B21[0], Dhat[b]]])
    return InverseFactors(tree, E, F, G, _inv(root, "root block", 0, 0))


def apply_inverse(Fac: InverseFactors, x: np.ndarray) -> np.ndarray:
    """``H^{-1} x`` from the factors of :func:`invert_hbs` (x may have columns)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != Fac.size:
        raise ValueError(f"vector of length {x.shape[0]} does not match operator size {Fac.size}")
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    tree = Fac.tree
    nn = tree.num_nodes
    if nn == 1:
        Y = Fac.root @ X
        return Y[:, 0] if vec else Y
    xh = [None] * nn
    xin = [None] * nn  # the vector each node's F^* and G act on
    for t in reversed(range(1, nn)):
        if tree.is_leaf(t):
            xin[t] = X[tree.lo[t] : tree.hi[t]]
        else:
            a, b = tree.children[t]
            xin[t] = np.vstack([xh[a], xh[b]])
        xh[t] = Fac.F[t].T @ xin[t]
    a, b = tree.children[0]
    yr = Fac.root @ np.vstack([xh[a], xh[b]])
    yh = [None] * nn
    ka = xh[a].shape[0]
    yh[a], yh[b] = yr[:ka], yr[ka:]
    Y = np.empty_like(X)
    for t in range(1, nn):
        out = Fac.E[t] @ yh[t] + Fac.G[t] @ xin[t]
        if tree.is_leaf(t):
            Y[tree.lo[t] : tree.hi[t]] = out
        else:
            c1, c2 = tree.children[t]
            k1 = xh[c1].shape[0]
            yh[c1], yh[c2] = out[:k1], out[k1:]
    return Y[:, 0] if vec else Y


def inverse_to_hbs(Fac: InverseFactors) -> HbsMatrix:
    """Rewrite inverse factors as an HBS matrix on the same tree.

    ``E``/``F`` become the bases; the diagonal sub-blocks of each ``G`` are
    pushed down to the children and the off-diagonal sub-blocks become ``B``.
    The bases are not orthonormal; follow with :func:`recompress`.
    """
    tree = Fac.tree
    nn = tree.num_nodes
    out = empty_hbs(tree)
    if nn == 1:
        out.D[0] = Fac.root.copy()
        return out
    Gm = [None if g is None else g.copy() for g in Fac.G]
    Gm[0] = Fac.root.copy()
    for t in range(nn):
        if t:
            out.U[t] = Fac.E[t].copy()
            out.V[t] = Fac.F[t].copy()
        if tree.is_leaf(t):
            out.D[t] = Gm[t]
            continue
        a, b = tree.children[t]
        ka = Fac.E[a].shape[1]
        g = Gm[t]
        out.B12[t] = g[:ka, ka:].copy()
        out.B21[t] = g[ka:, :ka].copy()
        Gm[a] = Gm[a] + Fac.E[a] @ g[:ka, :ka] @ Fac.F[a].T
        Gm[b] = Gm[b] + Fac.E[b] @ g[ka:, ka:] @ Fac.F[b].T
    return out


# ---------------------------------------------------------------------------
# recompression


def _shared_basis(U: np.ndarray, V: np.ndarray):
    """Orthonormal ``Q`` spanning both ``U`` and ``V`` with ``U = Q Ru``, ``V = Q Rv``."""
    W = np.hstack([U, V])
    if W.size == 0:
        return np.zeros((W.shape[0], 0)), np.zeros((0, U.shape[1])), np.zeros((0, V.shape[1]))
    q, s, _ = np.linalg.svd(W, full_matrices=False)
    k = truncation_rank(s, 1e-14)
    q = q[:, :k]
    return q, q.T @ U, q.T @ V


def orthonormalize(H: HbsMatrix, shared: bool = True) -> HbsMatrix:
    """Exact rewrite of ``H`` with orthonormal bases (leaves to root).

    With ``shared`` each node gets one basis for rows and columns (``U = V``);
    directions below 1e-14 of the largest are dropped.
    """
    tree = H.tree
    out = H.copy()
    nn = tree.num_nodes
    Ru = [None] * nn
    Rv = [None] * nn
    for t in reversed(range(nn)):
        if not tree.is_leaf(t):
            a, b = tree.children[t]
            ka = H.rank(a)
            out.B12[t] = Ru[a] @ out.B12[t] @ Rv[b].T
            out.B21[t] = Ru[b] @ out.B21[t] @ Rv[a].T
            if t:
                out.U[t] = np.vstack([Ru[a] @ out.U[t][:ka], Ru[b] @ out.U[t][ka:]])
                out.V[t] = np.vstack([Rv[a] @ out.V[t][:ka], Rv[b] @ out.V[t][ka:]])
        if t and shared:
            q, Ru[t], Rv[t] = _shared_basis(out.U[t], out.V[t])
            out.U[t], out.V[t] = q, q.copy()
        elif t:
            out.U[t], Ru[t] = np.linalg.qr(out.U[t])
            out.V[t], Rv[t] = np.linalg.qr(out.V[t])
    return out


def recompress(H: HbsMatrix, eps: float, floor: Optional[float] = None, shared: bool = True) -> HbsMatrix:
    """Orthonormalize, then truncate every basis root to leaves.

    At each node the singular values of the compressed off-diagonal block row
    (and column) decide the kept rank: those above ``max(eps * s_max, floor)``.
    The default ``floor`` is 1e-14 times the largest stored block norm.
    """
    out = orthonormalize(H, shared)
    tree = out.tree
    if tree.num_nodes == 1:
        return out
    if floor is None:
        floor = 1e-14 * H.scale_norm()
    nn = tree.num_nodes
    Wu = [None] * nn
    Wv = [None] * nn
    for t in tree.parents():
        a, b = tree.children[t]
        ka = out.rank(a)
        wu_a, wu_b = out.B12[t], out.B21[t]
        wv_a, wv_b = out.B21[t].T, out.B12[t].T
        if t:
            up = out.U[t] @ Wu[t]
            vp = out.V[t] @ Wv[t]
            wu_a, wu_b = np.hstack([wu_a, up[:ka]]), np.hstack([wu_b, up[ka:]])
            wv_a, wv_b = np.hstack([wv_a, vp[:ka]]), np.hstack([wv_b, vp[ka:]])
        T = {}
        for c, wu, wv in ((a, wu_a, wv_a), (b, wu_b, wv_b)):
            if shared:
                pu, su, _ = np.linalg.svd(np.hstack([wu, wv]), full_matrices=True)
                k = truncation_rank(su, eps, floor)
                tu = tv = pu[:, :k]
            else:
                pu, su, _ = np.linalg.svd(wu, full_matrices=True)
                pv, sv, _ = np.linalg.svd(wv, full_matrices=True)
                k = max(truncation_rank(su, eps, floor), truncation_rank(sv, eps, floor))
                tu, tv = pu[:, :k], pv[:, :k]
            T[c] = (tu, tv)
            out.U[c] = out.U[c] @ tu
            out.V[c] = out.V[c] @ tv
            Wu[c] = _compact(tu.T @ wu)
            Wv[c] = _compact(tv.T @ wv)
        (tua, tva), (tub, tvb) = T[a], T[b]
        out.B12[t] = tua.T @ out.B12[t] @ tvb
        out.B21[t] = tub.T @ out.B21[t] @ tva
        if t:
            out.U[t] = np.vstack([tua.T @ out.U[t][:ka], tub.T @ out.U[t][ka:]])
            out.V[t] = np.vstack([tva.T @ out.V[t][:ka], tvb.T @ out.V[t][ka:]])
    # truncating a node's children can leave it with more columns than rows
    if any(out.U[t].shape[1] > out.U[t].shape[0] or out.V[t].shape[1] > out.V[t].shape[0]
           for t in range(1, nn) if not tree.is_leaf(t)):
        out = orthonormalize(out, shared)
    return out


def _compact(W: np.ndarray) -> np.ndarray:
    """Square factor with the same left singular structure as ``W``."""
    if W.shape[1] <= W.shape[0]:
        return W
    _, r = np.linalg.qr(W.T)
    return r.T


# ---------------------------------------------------------------------------
# addition and structural edits


def _check_same_tree(A: HbsMatrix, B: HbsMatrix):
    if not A.tree.same_as(B.tree):
        raise ValueError("HBS operands live on different index trees")


def stack_hbs(A: HbsMatrix, B: HbsMatrix) -> HbsMatrix:
    """Exact ``A + B`` with concatenated bases (ranks add)."""
    _check_same_tree(A, B)
    tree = A.tree
    out = empty_hbs(tree)
    for t in range(tree.num_nodes):
        if tree.is_leaf(t):
            out.D[t] = A.D[t] + B.D[t]
            if t:
                out.U[t] = np.hstack([A.U[t], B.U[t]])
                out.V[t] = np.hstack([A.V[t], B.V[t]])
            continue
        a, b = tree.children[t]
        out.B12[t] = _blockdiag(A.B12[t], B.B12[t])
        out.B21[t] = _blockdiag(A.B21[t], B.B21[t])
        if t:
            kaA, kaB = A.rank(a), B.rank(a)
            for name in ("U", "V"):
                XA, XB = getattr(A, name)[t], getattr(B, name)[t]
                getattr(out, name)[t] = np.vstack([_blockdiag(XA[:kaA], XB[:kaB]), _blockdiag(XA[kaA:], XB[kaB:])])
    return out


def add_hbs(A: HbsMatrix, B: HbsMatrix, eps: float, floor: Optional[float] = None) -> HbsMatrix:
    """``A + B`` recompressed at tolerance ``eps``."""
    if floor is None:
        floor = 1e-14 * max(A.scale_norm(), B.scale_norm())
    return recompress(stack_hbs(A, B), eps, floor)


def lowrank_to_bs(Q: np.ndarray, R: np.ndarray, tree: IndexTree) -> HbsMatrix:
    """Exact HBS form of ``Q @ R`` on ``tree``.

    ``Q`` is orthonormalized first; leaf bases are the row blocks of ``Q`` and
    the column blocks of ``R`` (orthonormalized), transfers stack identities
    and every sibling block is the identity before orthonormalization.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    k = Q.shape[1]
    if Q.shape[0] != tree.size or R.shape != (k, tree.size):
        raise ValueError("low-rank factors do not match the tree size")
    if k:
        Q, rq = np.linalg.qr(Q)
        R = rq @ R
        k = Q.shape[1]
    out = empty_hbs(tree)
    I = np.eye(k)
    for t in range(tree.num_nodes):
        sl = slice(tree.lo[t], tree.hi[t])
        if tree.is_leaf(t):
            out.D[t] = Q[sl] @ R[:, sl]
            if t:
                out.U[t] = Q[sl].copy()
                out.V[t] = R[:, sl].T.copy()
        else:
            out.B12[t] = I.copy()
            out.B21[t] = I.copy()
            if t:
                out.U[t] = np.vstack([I, I])
                out.V[t] = np.vstack([I, I])
    return orthonormalize(out)


def add_lowrank(A: HbsMatrix, Q: np.ndarray, R: np.ndarray, eps: Optional[float],
                floor: Optional[float] = None) -> HbsMatrix:
    """``A + Q R`` recompressed at tolerance ``eps`` (exact when ``eps`` is None)."""
    if Q.shape[1] == 0:
        return A if eps is None else recompress(A, eps, floor)
    B = lowrank_to_bs(Q, R, A.tree)
    return stack_hbs(A, B) if eps is None else add_hbs(A, B, eps, floor)


def flip_hbs(H: HbsMatrix) -> HbsMatrix:
    """``J H J`` with ``J`` the reversal permutation (tree is mirrored)."""
    tree = H.tree
    new_tree = mirror_tree(tree)
    index = new_tree.path_index()
    out = empty_hbs(new_tree)
    for t in range(tree.num_nodes):
        s = index[tuple(1 - p for p in tree.paths[t])]
        if tree.is_leaf(t):
            out.D[s] = H.D[t][::-1, ::-1].copy()
            if t:
                out.U[s] = H.U[t][::-1].copy()
                out.V[s] = H.V[t][::-1].copy()
            continue
        a, _ = tree.children[t]
        ka = H.rank(a)
        out.B12[s] = H.B21[t].copy()
        out.B21[s] = H.B12[t].copy()
        if t:
            out.U[s] = np.vstack([H.U[t][ka:], H.U[t][:ka]])
            out.V[s] = np.vstack([H.V[t][ka:], H.V[t][:ka]])
    return out


def scale_hbs(H: HbsMatrix, left: Optional[np.ndarray] = None, right: Optional[np.ndarray] = None,
              alpha: float = 1.0) -> HbsMatrix:
    """``alpha * diag(left) H diag(right)``; bases stop being orthonormal."""
    tree = H.tree
    out = H.copy()
    for t in tree.leaves():
        sl = slice(tree.lo[t], tree.hi[t])
        lft = np.ones(tree.node_size(t)) if left is None else left[sl]
        rgt = np.ones(tree.node_size(t)) if right is None else right[sl]
        out.D[t] = alpha * lft[:, None] * out.D[t] * rgt[None, :]
        if t:
            out.U[t] = alpha * lft[:, None] * out.U[t]
            out.V[t] = rgt[:, None] * out.V[t]
    # every off-diagonal block passes through a leaf U, so alpha is applied once
    return out


def blockdiag_hbs(A: HbsMatrix, B: HbsMatrix) -> HbsMatrix:
    """``[[A, 0], [0, B]]`` on the joined tree (zero-rank sibling bases)."""
    tree = join_trees(A.tree, B.tree)
    index = tree.path_index()
    out = empty_hbs(tree)
    for side, H in ((0, A), (1, B)):
        for t in range(H.tree.num_nodes):
            s = index[(side,) + H.tree.paths[t]]
            out.D[s] = H.D[t]
            out.B12[s] = H.B12[t]
            out.B21[s] = H.B21[t]
            if t:
                out.U[s], out.V[s] = H.U[t], H.V[t]
            else:
                rows = H.tree.node_size(0) if H.tree.is_leaf(0) else sum(H.rank(c) for c in H.tree.children[0])
                out.U[s] = np.zeros((rows, 0))
                out.V[s] = np.zeros((rows, 0))
    out.B12[0] = np.zeros((0, 0))
    out.B21[0] = np.zeros((0, 0))
    return out


def join_hbs(A: HbsMatrix, B: HbsMatrix, AB: LowRankFactors, BA: LowRankFactors, eps: Optional[float],
             floor: Optional[float] = None) -> HbsMatrix:
    """``[[A, AB], [BA, B]]`` as one HBS matrix on the joined tree.

    With ``eps=None`` nothing is truncated (ranks add up); recompress later.
    """
    H = blockdiag_hbs(A, B)
    na, nb = A.size, B.size
    Q = np.zeros((na + nb, AB.rank + BA.rank))
    R = np.zeros((AB.rank + BA.rank, na + nb))
    Q[:na, : AB.rank] = AB.L
    R[: AB.rank, na:] = AB.R
    Q[na:, AB.rank :] = BA.L
    R[AB.rank :, :na] = BA.R
    if eps is None:
        return H if Q.shape[1] == 0 else stack_hbs(H, lowrank_to_bs(Q, R, H.tree))
    if floor is None:
        floor = 1e-14 * max(A.scale_norm(), B.scale_norm())
    if Q.shape[1] == 0:
        return recompress(H, eps, floor)
    return add_hbs(H, lowrank_to_bs(Q, R, H.tree), eps, floor)


def dense_to_hbs_leaf(D: np.ndarray) -> HbsMatrix:
    """Single-leaf HBS holding ``D`` verbatim."""
    tree = IndexTree.from_nested(D.shape[0])
    out = empty_hbs(tree)
    out.D[0] = np.array(D, dtype=float)
    return out


def serialize_inverse(Fac: InverseFactors) -> bytes:
    """``b"HBI1"``, the tree header as in :func:`dtnmap.hbs.serialize`, then per
    node E, F, G and finally the root block (same array encoding)."""
    import io
    import struct

    from .hbs import _write_array

    tree = Fac.tree
    buf = io.BytesIO()
    buf.write(b"HBI1")
    buf.write(struct.pack("<q", tree.num_nodes))
    for t in range(tree.num_nodes):
        ch = tree.children[t] or (-1, -1)
        buf.write(struct.pack("<5q", tree.lo[t], tree.hi[t], tree.parent[t], ch[0], ch[1]))
    for t in range(tree.num_nodes):
        for arr in (Fac.E[t], Fac.F[t], Fac.G[t]):
            _write_array(buf, arr)
    _write_array(buf, Fac.root)
    return buf.getvalue()
