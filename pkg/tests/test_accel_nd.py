import numpy as np
import pytest
import scipy.sparse as sp

from conftest import rel_fro
from dtnmap.accel_nd import (
    _antidiagonal,
    accel_merge,
    apply_dtn,
    build_root_accel,
    structure_from_dense,
    structured_level,
    write_level_csv,
)
from dtnmap.dense_nd import build_root_dense, merge_two, rect_boundary
from dtnmap.grid import build_tree, discretize
from dtnmap.problems import catalog
from dtnmap.reference import error_metrics

from test_dense_nd import leaf_schur_rect


@pytest.mark.parametrize("name, bound", [("laplace", 1e-5), ("helmholtz1", 1e-4)])
def test_small_grid_errors(name, bound):
    spec = catalog(name, 64)
    sol, _ = build_root_accel(spec, build_tree(64, 64), 1e-7, 32)
    assert sol.compressed
    e1, e2 = error_metrics(sol, spec, seed=0)
    assert e1 <= bound and e2 <= bound


def test_matches_dense_engine():
    spec = catalog("diffconv1", 64)
    tree = build_tree(64, 64)
    acc, _ = build_root_accel(spec, tree, 1e-9, 32)
    den, _ = build_root_dense(spec, tree)
    assert np.array_equal(acc.boundary, den.boundary)
    assert rel_fro(acc.dense_S(), den.S) <= 1e-7


def test_antidiagonal_coupling():
    C = sp.csr_matrix(np.fliplr(np.diag([1.0, 2.0, 3.0])))
    assert np.array_equal(_antidiagonal(C, "A34"), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        _antidiagonal(sp.csr_matrix(np.diag([1.0, 2.0, 3.0])), "A34")
    with pytest.raises(ValueError):
        _antidiagonal(sp.csr_matrix(np.ones((2, 3))), "A34")


def test_dense_fallback_below_crossover():
    spec = catalog("laplace", 32)
    tree = build_tree(32, 64)
    assert structured_level(tree, 10**6) == -1
    acc, _ = build_root_accel(spec, tree, 1e-7, 10**6)
    den, _ = build_root_dense(spec, tree)
    assert not acc.compressed and acc.engine == "accel"
    assert np.array_equal(acc.S, den.S)


@pytest.mark.parametrize("orient", ["h", "v"])
@pytest.mark.parametrize("name", ["laplace", "diffconv3", "helmholtz2"])
def test_single_merge_matches_dense_merge(orient, name):
    n = 42
    op = discretize(catalog(name, n))
    m = n - 2
    if orient == "h":
        ra, rb, union = ((0, 20), (0, m)), ((20, m), (0, m)), ((0, m), (0, m))
    else:
        ra, rb, union = ((0, m), (0, 20)), ((0, m), (20, m)), ((0, m), (0, m))
    da, db = leaf_schur_rect(op, *ra), leaf_schur_rect(op, *rb)
    eps = 1e-10
    sa = structure_from_dense(da, *ra, m, eps, leaf=8)
    sb = structure_from_dense(db, *rb, m, eps, leaf=8)
    assert rel_fro(sa.dense(), da.S) <= 10 * eps
    merged = accel_merge(sa, sb, op.A, orient, eps, cols=union[0], rows=union[1])
    ref = merge_two(da, db, op.A, rect_boundary(*union, m))
    assert np.array_equal(merged.boundary, ref.boundary)
    assert rel_fro(merged.dense(), ref.S) <= 1e-7


def test_ranks_plateau_for_laplace():
    ranks = []
    for n in (128, 256):
        sol, _ = build_root_accel(catalog("laplace", n), build_tree(n, 256), 1e-7, 128)
        ranks.append(sol.max_rank())
    # the boundary doubles but the interaction rank only grows slowly
    assert ranks[1] <= 1.5 * ranks[0]


def test_apply_dtn_and_level_csv(tmp_path):
    sol, _ = build_root_accel(catalog("laplace", 64), build_tree(64, 64), 1e-7, 32)
    assert np.array_equal(apply_dtn(sol, np.zeros(sol.size)), np.zeros(sol.size))
    with pytest.raises(ValueError):
        apply_dtn(sol, np.zeros(sol.size + 1))
    g = np.random.default_rng(0).standard_normal(sol.size)
    assert np.allclose(sol.dense_S() @ apply_dtn(sol, g), g, atol=1e-8 * np.abs(g).max())
    path = tmp_path / "levels.csv"
    write_level_csv(sol.levels, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "level,boxes,max_boundary,kind,seconds,max_rank,bytes"
    kinds = {ln.split(",")[3] for ln in lines[1:]}
    assert {"dense", "compress", "hbs", "root-inverse"} <= kinds
