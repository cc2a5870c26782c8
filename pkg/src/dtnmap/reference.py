"""Full-system oracle solves and the e1 / e2 error metrics."""

from __future__ import annotations

import logging

import numpy as np
from scipy.sparse.linalg import gmres, splu

from .grid import DiscreteOperator, ProblemSpec, discretize

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        self.residual = residual
        super().__init__(f"{msg} (backward error {residual:.3e})")


def _residual(A, x, rhs) -> float:
    """Normwise backward error ``|r| / (|A| |x| + |b|)`` (infinity norms).

    Near a resonance ``|x|`` is huge and ``|r| / |b|`` stays large even for a
    backward-stable solve, so the plain relative residual is not a usable test.
    """
    nb = np.abs(rhs).max()
    if nb == 0:
        return 0.0
    nA = abs(A).sum(axis=1).max()
    return float(np.abs(A @ x - rhs).max() / (nA * np.abs(x).max() + nb))


def full_solve(spec_or_op, rhs: np.ndarray, backend: str = "direct", tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = rhs`` on all unknowns.

    ``backend`` is ``"direct"`` (sparse LU) or ``"gmres"`` (unpreconditioned,
    restart 50, tolerance 1e-12).  Raises :class:`OracleError` when the
    normwise backward error exceeds ``tol``.  ``rhs`` may have several columns.
    """
    op = spec_or_op if isinstance(spec_or_op, DiscreteOperator) else discretize(spec_or_op)
    A = op.A
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != A.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, the operator has {A.shape[0]} unknowns")
    if not np.any(rhs):
        return np.zeros_like(rhs)
    if backend == "direct":
        try:
            x = splu(A.tocsc()).solve(rhs)
        except RuntimeError:
            raise OracleError("sparse LU failed", np.inf) from None
        if not np.all(np.isfinite(x)):
            raise OracleError("sparse LU failed", np.inf)
    elif backend == "gmres":
        cols = rhs[:, None] if rhs.ndim == 1 else rhs
        out = []
        for b in cols.T:
            xk, info = gmres(A, b, rtol=1e-12, atol=0.0, restart=50, maxiter=4000)
            if info != 0:
                log.warning("GMRES stopped with info=%d", info)
            out.append(xk)
        x = np.column_stack(out)
        x = x[:, 0] if rhs.ndim == 1 else x
    else:
        raise ValueError(f"unknown backend {backend!r}")
    res = _residual(A, x, rhs)
    if res > tol:
        raise OracleError(f"{backend} solve did not converge", res)
    return x


def boundary_response(spec_or_op, boundary: np.ndarray, r: np.ndarray, backend: str = "direct") -> np.ndarray:
    """``(A^{-1} rhat)|_boundary`` with ``rhat = r`` on the boundary, 0 elsewhere."""
    op = spec_or_op if isinstance(spec_or_op, DiscreteOperator) else discretize(spec_or_op)
    rhat = np.zeros((op.size,) + np.shape(r)[1:])
    rhat[boundary] = r
    return full_solve(op, rhat, backend)[boundary]


def random_unit(size: int, seed: int = 0) -> np.ndarray:
    r = np.random.default_rng(seed).standard_normal(size)
    return r / np.linalg.norm(r)


def smooth_unit(size: int) -> np.ndarray:
    """``sin(2 pi t)`` over normalized perimeter position ``t``, unit norm."""
    t = np.arange(size) / size
    r = np.sin(2 * np.pi * t)
    return r / np.linalg.norm(r)


def rel_err(x: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(x - ref) / np.linalg.norm(ref))


def error_metrics(sol, spec: ProblemSpec, seed: int = 0, op=None, backend: str = "direct") -> tuple[float, float]:
    """(e1, e2): relative l2 error of ``G r`` for a random and a smooth unit ``r``."""
    op = discretize(spec) if op is None else op
    r = np.column_stack([random_unit(sol.size, seed), smooth_unit(sol.size)])
    ref = boundary_response(op, sol.boundary, r, backend)
    got = sol.apply_dtn(r)
    return rel_err(got[:, 0], ref[:, 0]), rel_err(got[:, 1], ref[:, 1])
