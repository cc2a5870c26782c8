import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture(autouse=True)
def _quiet_condition_warnings(caplog):
    # near-singular inner blocks are reported through logging, not raised
    caplog.set_level(logging.ERROR, logger="dtnmap")
    yield


def brute_schur(A, keep):
    """Dense ``A_kk - A_ke A_ee^{-1} A_ek`` with ``keep`` retained."""
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
    keep = np.asarray(keep)
    elim = np.setdiff1d(np.arange(A.shape[0]), keep)
    Akk = A[np.ix_(keep, keep)]
    if len(elim) == 0:
        return Akk
    return Akk - A[np.ix_(keep, elim)] @ np.linalg.solve(A[np.ix_(elim, elim)], A[np.ix_(elim, keep)])


def rel_fro(X, Y):
    return float(np.linalg.norm(X - Y) / np.linalg.norm(Y))


ACCEPTANCE_LINES: list = []


def report(criterion: int, ok, detail: str) -> str:
    """Record one acceptance line; ``ok`` is True, False or "WARN"."""
    tag = "WARN" if ok == "WARN" else ("PASS" if ok else "FAIL")
    line = f"criterion {criterion}: {tag}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
