"""Test matrices with known hierarchical low-rank structure."""

import numpy as np
from hypothesis import strategies as st


def kernel_matrix(M: int, seed: int, kind: str = "log") -> np.ndarray:
    """Smooth off-diagonal kernel on sorted random points plus a dominant diagonal."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, M))
    d = np.abs(x[:, None] - x[None, :])
    if kind == "log":
        K = np.log(d + 1e-3)
    elif kind == "inv":
        K = 1.0 / (d + 0.05)
    else:
        K = np.exp(-3 * d) * np.cos(5 * (x[:, None] + 2 * x[None, :]))
    np.fill_diagonal(K, 0.0)
    return K + np.diag(rng.uniform(M, 2 * M, M))


def lowrank_plus_diag(M: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((M, k)) @ rng.standard_normal((k, M)) + np.diag(rng.uniform(1, 2, M))


@st.composite
def hbs_cases(draw, max_size=160):
    M = draw(st.integers(8, max_size))
    m = draw(st.integers(4, 32))
    eps = draw(st.sampled_from([1e-4, 1e-6, 1e-8, 1e-10]))
    kind = draw(st.sampled_from(["log", "inv", "osc", "lowrank"]))
    seed = draw(st.integers(0, 2**31 - 1))
    H = lowrank_plus_diag(M, 3, seed) if kind == "lowrank" else kernel_matrix(M, seed, kind)
    return H, m, eps


def random_hbs(M: int, m: int, k: int, seed: int):
    """HBS matrix with rank-``k`` orthonormal bases and a dominant diagonal, built factor by factor."""
    from dtnmap.hbs import build_index_tree, empty_hbs

    rng = np.random.default_rng(seed)
    tree = build_index_tree(M, m)
    H = empty_hbs(tree)
    for t in reversed(range(tree.num_nodes)):
        if tree.is_leaf(t):
            s = tree.node_size(t)
            H.D[t] = 4 * np.eye(s) + rng.standard_normal((s, s)) / s
        if t:
            rows = tree.node_size(t) if tree.is_leaf(t) else sum(H.rank(c) for c in tree.children[t])
            q = np.linalg.qr(rng.standard_normal((rows, min(k, rows))))[0]
            H.U[t], H.V[t] = q, q.copy()
    for t in tree.parents():
        a, b = tree.children[t]
        H.B12[t] = 0.1 * rng.standard_normal((H.rank(a), H.rank(b)))
        H.B21[t] = 0.1 * rng.standard_normal((H.rank(b), H.rank(a)))
    return H
