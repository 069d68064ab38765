import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from iqte.core import GroupSample


def qr_lp_oracle(X, y, tau, lam):
    """Exact penalized QR objective via the standard LP reformulation."""
    n, p = X.shape
    c = np.concatenate([np.full(p, lam), np.full(p, lam), np.full(n, tau / n), np.full(n, (1 - tau) / n)])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0, res.message
    beta = res.x[:p] - res.x[p:2 * p]
    return float(res.fun), beta


def qr_brute_force(X, y, tau, lam):
    """Minimum of the penalized QR objective over all vertices.

    The objective is piecewise linear and convex, so a minimizer sits where p
    of the hyperplanes ``x_i' b = y_i`` and ``b_j = 0`` meet.  Tiny sizes only.
    """
    n, p = X.shape
    A = np.vstack([X, np.eye(p)])
    b = np.concatenate([y, np.zeros(p)])
    best = np.inf
    for rows in itertools.combinations(range(n + p), p):
        sub = A[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        beta = np.linalg.solve(sub, b[list(rows)])
        r = y - X @ beta
        val = np.mean(r * (tau - (r < 0))) + lam * np.abs(beta).sum()
        best = min(best, val)
    return float(best)


def projection_qp_oracle(S, St, R, x, lam, gamma, include_scalar=True):
    """Reference solve of the projection program with a generic conic solver."""
    cp = pytest.importorskip("cvxpy")
    p = x.size
    s = np.linalg.norm(x)
    M = cp.Variable(p)
    cons = [cp.norm(S @ M - x, "inf") <= s * lam, cp.norm(R @ M, "inf") <= s * gamma]
    if include_scalar:
        cons.append(cp.abs(x @ S @ M - s * s) <= s * s * lam)
    prob = cp.Problem(cp.Minimize(cp.quad_form(M, cp.psd_wrap(St))), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return prob.status, (None if M.value is None else np.asarray(M.value)), prob.value


def make_sample(rng, n, p, *, beta=None, noise=1.0, group_id=1):
    X = rng.standard_normal((n, p))
    b = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = X @ b + noise * rng.standard_normal(n)
    return GroupSample(X, y, group_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def record_acceptance(number, ok, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
