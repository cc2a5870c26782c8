import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtnmap.grid import discretize
from dtnmap.problems import PROBLEMS, catalog, discrete_eigenvalue, load_config, sorted_eigenvalues, tenth_eigenvalue


def coeffs(spec):
    op = discretize(spec)
    x = np.linspace(0, 1, 7)
    X, Y = np.meshgrid(x, x)
    return op, X, Y


def test_catalog_has_eleven_problems():
    assert len(PROBLEMS) == 11
    with pytest.raises(ValueError):
        catalog("poisson", 16)


@pytest.mark.parametrize("name", PROBLEMS)
def test_every_problem_assembles_finite(name):
    for n in (8, 17, 32):
        op = discretize(catalog(name, n))
        assert np.all(np.isfinite(op.A.data))
        assert op.A.shape == ((n - 2) ** 2,) * 2


def test_laplace_has_no_lower_order_terms():
    spec = catalog("laplace", 16)
    x = np.linspace(0, 1, 5)
    for f in (spec.coeff_b, spec.coeff_c, spec.coeff_d):
        assert np.all(np.asarray(f(x, x)) == 0)


def test_coefficients_as_listed():
    x = np.array([0.1, 0.3, 0.7])
    y = np.array([0.2, 0.5, 0.9])
    assert np.allclose(catalog("diffconv1", 16).coeff_b(x, y), 100)
    assert np.allclose(catalog("diffconv2", 16).coeff_b(x, y), 1000)
    s3 = catalog("diffconv3", 16)
    assert np.allclose(s3.coeff_b(x, y), 125 * np.cos(4 * np.pi * y))
    assert np.allclose(s3.coeff_c(x, y), 125 * np.sin(4 * np.pi * x))
    s4 = catalog("diffconv4", 16)
    assert np.allclose(s4.coeff_b(x, y), 125 * np.cos(4 * np.pi * x))
    assert np.allclose(s4.coeff_c(x, y), 125 * np.sin(4 * np.pi * y))
    assert np.allclose(catalog("helmholtz1", 16).coeff_d(x, y), -100)
    assert np.allclose(catalog("helmholtz2", 16).coeff_d(x, y), -4005)
    assert np.allclose(catalog("helmholtz3", 16).coeff_d(x, y), -tenth_eigenvalue(16) + 1e-5)
    assert catalog("random1", 16).conductivity_range == (1.0, 2.0)
    assert catalog("random2", 16).conductivity_range == (1.0, 1000.0)


def test_helmholtz4_wavenumber_at_256():
    d = catalog("helmholtz4", 256).coeff_d(np.zeros(1), np.zeros(1))[0]
    assert d == pytest.approx(-((2 * np.pi * 256 / 40) ** 2))
    assert d == pytest.approx(-1617.0, abs=0.1)


def test_random_problem_is_reproducible():
    a = discretize(catalog("random1", 20, seed=5)).A
    b = discretize(catalog("random1", 20, seed=5)).A
    c = discretize(catalog("random1", 20, seed=6)).A
    assert abs(a - b).max() == 0
    assert abs(a - c).max() > 0


def test_smallest_eigenvalue_n5():
    h = 0.25
    assert discrete_eigenvalue(1, 1, 5) == pytest.approx((4 - 4 * np.cos(np.pi / 4)) / h**2)


@pytest.mark.parametrize("n", [5, 9, 17])
def test_eigenvalues_match_dense_eigensolve(n):
    A = discretize(catalog("laplace", n)).A.toarray()
    dense = np.sort(np.linalg.eigvalsh(A))
    ours = np.array([lam for lam, _, _ in sorted_eigenvalues(n)])
    assert np.allclose(ours, dense, rtol=1e-9)


@given(st.integers(5, 40), st.data())
def test_eigenvalue_symmetry(n, data):
    p = data.draw(st.integers(1, n - 2))
    q = data.draw(st.integers(1, n - 2))
    assert discrete_eigenvalue(p, q, n) == discrete_eigenvalue(q, p, n)


def test_eigenvalue_range_checked():
    with pytest.raises(ValueError):
        discrete_eigenvalue(0, 1, 8)
    with pytest.raises(ValueError):
        discrete_eigenvalue(1, 7, 8)


def test_tenth_eigenvalue_counts_multiplicity():
    lam = sorted_eigenvalues(32, 10)
    # (1,3) and (3,1) are both counted, so the tenth entry is the second copy of a double eigenvalue
    assert lam[9][0] == tenth_eigenvalue(32)
    assert [(p, q) for _, p, q in lam[:3]] == [(1, 1), (1, 2), (2, 1)]


def test_helmholtz3_is_nearly_singular_at_32():
    A = discretize(catalog("helmholtz3", 32)).A.toarray()
    assert np.linalg.svd(A, compute_uv=False)[-1] <= 1e-3


def test_load_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sample\nproblem = helmholtz1\nn=64\nN_leaf = 256\ntolerance=1e-8\nseed=4\n")
    assert load_config(cfg) == dict(problem="helmholtz1", n=64, nleaf=256, epsilon=1e-8, seed=4)
    cfg.write_text("colour = blue\n")
    with pytest.raises(ValueError):
        load_config(cfg)
    cfg.write_text("problem = wave\n")
    with pytest.raises(ValueError):
        load_config(cfg)
    cfg.write_text("just words\n")
    with pytest.raises(ValueError):
        load_config(cfg)
