"""l1-penalized linear quantile regression.

The solver is an ADMM scheme on the split ``r = y - X beta`` (residuals) and
``z = beta`` (sparse copy).  The residual update is the closed-form proximal
map of the check loss and the sparse copy is a soft threshold, so every
iteration costs two matrix-vector products and one cached linear solve.
Because the exact problem is a linear program, the ADMM iterate is
periodically *polished* onto the vertex it points at: the support and the
interpolated observations are read off the iterate, the vertex is solved for
exactly and accepted only when a full subgradient (KKT) certificate holds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .core import (
    ConfigurationError,
    GroupSample,
    SolverOptions,
    as_tau,
    check_loss,
)

log = logging.getLogger(__name__)

ZERO_TRUNC = 1e-8
MAX_RHO_UPDATES = 50
CV_TOL = 1e-5


@dataclass
class PenalizedQrFit:
    tau: float
    lam: float
    beta: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    polished: bool = False
    unpenalized: tuple = ()
    history: list = field(default_factory=list, repr=False)
    state: dict = field(default_factory=dict, repr=False)

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.beta))


def default_lambda(n, p, tau, c: float = 2.0) -> float:
    """Penalty level ``c * sqrt(tau (1 - tau)) * sqrt(log(p) / n)``."""
    t = as_tau(tau)
    if n < 2 or p < 1:
        raise ConfigurationError("default_lambda needs n >= 2 and p >= 1")
    return float(c * math.sqrt(t * (1.0 - t)) * math.sqrt(max(math.log(p), 0.0) / n))


def qr_objective(X, y, beta, tau, lam, unpenalized=()) -> float:
    """``(1/n) sum check_loss(y - X beta) + lam * ||beta||_1`` (unpenalized entries excluded)."""
    beta = np.asarray(beta, dtype=np.float64)
    pen = np.abs(beta)
    if len(unpenalized):
        pen = pen.copy()
        pen[list(unpenalized)] = 0.0
    return float(np.mean(check_loss(y - X @ beta, tau)) + lam * pen.sum())


def _prox_check(v, tau, kappa):
    # argmin_r kappa * check_loss(r) + 0.5 (r - v)^2
    return v - np.clip(v, (tau - 1.0) * kappa, tau * kappa)


class _Factor:
    """Solver for ``(X'X + I) b = rhs`` via Cholesky or the Woodbury identity."""

    def __init__(self, X, c=1.0):
        n, p = X.shape
        self.X = X
        self.c = c
        self.wide = p > n
        if self.wide:
            self.cf = sla.cho_factor(c * np.eye(n) + X @ X.T)
        else:
            self.cf = sla.cho_factor(c * np.eye(p) + X.T @ X)

    def solve(self, rhs):
        if self.wide:
            return (rhs - self.X.T @ sla.cho_solve(self.cf, self.X @ rhs)) / self.c
        return sla.cho_solve(self.cf, rhs)


def _certify(X, y, beta, tau, nlam, penalized, zero_set, rtol=1e-9):
    """KKT certificate for a vertex candidate of the (n-scaled) problem.

    Returns True when multipliers in ``[tau-1, tau]`` exist for the
    observations in ``zero_set`` that make ``0`` a subgradient.
    """
    n, p = X.shape
    res = y - X @ beta
    scale = 1.0 + np.max(np.abs(y))
    nz = np.isin(np.arange(n), zero_set)
    if np.any(np.abs(res[~nz]) <= 1e-11 * scale):
        return False
    g = np.where(res <= 0.0, tau - 1.0, tau)
    g[nz] = 0.0
    S = np.flatnonzero(beta != 0.0)
    grad = X.T @ g
    target = np.zeros(p)
    pen_S = penalized[S]
    target[S[pen_S]] = nlam * np.sign(beta[S[pen_S]])
    if len(zero_set):
        if len(zero_set) != len(S):
            return False
        A = X[np.ix_(zero_set, S)].T
        try:
            a = np.linalg.solve(A, target[S] - grad[S])
        except np.linalg.LinAlgError:
            return False
        tol_a = 1e-9
        if np.any(a < tau - 1.0 - tol_a) or np.any(a > tau + tol_a):
            return False
        g[zero_set] = a
    elif len(S):
        return False
    full = X.T @ g
    slack = rtol * (1.0 + nlam + np.abs(X).sum(axis=0))
    if np.any(np.abs(full[S] - target[S]) > slack[S]):
        return False
    off = np.setdiff1d(np.arange(p), S)
    off_pen = off[penalized[off]]
    off_free = off[~penalized[off]]
    if np.any(np.abs(full[off_pen]) > nlam + slack[off_pen]):
        return False
    if np.any(np.abs(full[off_free]) > slack[off_free]):
        return False
    return True


def _polish(X, y, z, r, tau, nlam, penalized):
    """Try to move the ADMM iterate onto the exact optimal vertex."""
    n, p = X.shape
    S = np.flatnonzero((np.abs(z) > ZERO_TRUNC) | ~penalized)
    k = S.size
    if k > n:
        return None
    beta = np.zeros(p)
    if k == 0:
        return beta if _certify(X, y, beta, tau, nlam, penalized, np.array([], int)) else None
    Z = np.argsort(np.abs(r), kind="stable")[:k]
    try:
        bS = np.linalg.solve(X[np.ix_(Z, S)], y[Z])
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(bS)):
        return None
    beta[S] = bS
    # a polished coefficient that lands on zero is a degenerate vertex
    if np.any((np.abs(bS) <= ZERO_TRUNC) & penalized[S]):
        return None
    return beta if _certify(X, y, beta, tau, nlam, penalized, Z) else None


def fit_penalized_qr(
    sample: GroupSample,
    tau,
    lam: float,
    opts: SolverOptions | None = None,
    *,
    unpenalized=(),
    init: PenalizedQrFit | None = None,
    debug: bool = False,
) -> PenalizedQrFit:
    """Fit ``argmin (1/n) sum check_loss(y - X b) + lam ||b||_1``.

    Parameters
    ----------
    sample : GroupSample
    tau : float or QuantileLevel
    lam : float
        Penalty level (>= 0), in the per-observation scale above.
    opts : SolverOptions
        Uses ``max_iter``, ``tol`` and ``rho``.
    unpenalized : sequence of int
        Column indices excluded from the penalty (e.g. an intercept column).
    init : PenalizedQrFit, optional
        Warm start; the returned optimum does not depend on it.
    debug : bool
        Record the objective of every iterate in ``history``.

    Returns
    -------
    PenalizedQrFit
        ``converged`` is False when neither the vertex certificate nor the
        residual criterion was met within ``max_iter`` iterations.
    """
    opts = opts or SolverOptions()
    t = as_tau(tau)
    lam = float(lam)
    if not lam >= 0:
        raise ConfigurationError(f"penalty level must be nonnegative, got {lam!r}")
    X_full, y = sample.X, sample.y
    n, p_full = X_full.shape
    unpen = tuple(sorted(int(j) for j in unpenalized))

    # all-zero columns carry no information; their coefficient is fixed at 0
    live = np.flatnonzero(np.any(X_full != 0.0, axis=0))
    X = X_full[:, live]
    p = X.shape[1]
    penalized = np.ones(p, dtype=bool)
    for j in unpen:
        hit = np.flatnonzero(live == j)
        if hit.size:
            penalized[hit[0]] = False

    nlam = n * lam
    rho = float(opts.rho)
    beta_out = np.zeros(p_full)
    history: list = []

    if p == 0:
        obj = qr_objective(X_full, y, beta_out, t, lam, unpen)
        return PenalizedQrFit(t, lam, beta_out, obj, 0, True, True, unpen, history)

    # column scaling keeps the consensus block comparable to the data block
    col_scale = np.sqrt(np.mean(X * X, axis=0))
    Xs = X / col_scale
    # consensus weight n balances ||b - z||^2 against ||X b - (y - r)||^2
    cw = float(n)
    fac = _Factor(Xs, cw)

    if init is not None and init.state.get("live") is not None and np.array_equal(init.state["live"], live):
        st = init.state
        z = st["z"].copy()
        rho = st["rho"]
        w = st["w"].copy()
        u = st["u"].copy()
        r = y - Xs @ z
    else:
        z = np.zeros(p)
        r = y.copy()
        u = np.zeros(n)
        w = np.zeros(p)

    eps = float(opts.tol) * math.sqrt(n + p) * (1.0 + np.max(np.abs(y)))
    eps_polish = 1e-2 * math.sqrt(n + p) * (1.0 + np.max(np.abs(y)))

    converged = polished = False
    n_adapt = 0
    beta_s = None
    it = 0
    for it in range(1, int(opts.max_iter) + 1):
        thr = np.where(penalized, nlam / (rho * cw * col_scale), 0.0)
        b = fac.solve(Xs.T @ (y - r - u) + cw * (z - w))
        Xb = Xs @ b
        r_old = r
        r = _prox_check(y - Xb - u, t, 1.0 / rho)
        z_old = z
        v = b + w
        z = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)
        pr1 = Xb + r - y
        pr2 = b - z
        u += pr1
        w += pr2
        prim = math.sqrt(pr1 @ pr1 + cw * (pr2 @ pr2))
        dr = Xs.T @ (r - r_old) - cw * (z - z_old)
        dual = rho * math.sqrt(dr @ dr)
        if debug:
            history.append(qr_objective(X, y, z / col_scale, t, lam, ()))
        if it % 10 == 0:
            if prim <= eps_polish and dual <= eps_polish:
                bz = z / col_scale
                cand = _polish(X, y, bz, y - X @ bz, t, nlam, penalized)
                if cand is not None:
                    beta_s = cand
                    polished = converged = True
                    break
            if prim <= eps and dual <= eps:
                converged = True
                break
            # residual balancing; the factorization does not depend on rho.
            # Changes are capped so the tail runs at a fixed rho, where ADMM
            # convergence is guaranteed.
            if n_adapt >= MAX_RHO_UPDATES:
                continue
            if prim > 10.0 * dual:
                n_adapt += 1
                rho *= 2.0
                u /= 2.0
                w /= 2.0
            elif dual > 10.0 * prim:
                n_adapt += 1
                rho /= 2.0
                u *= 2.0
                w *= 2.0

    if beta_s is None:
        beta_s = z / col_scale
        beta_s = np.where(np.abs(beta_s) < ZERO_TRUNC, 0.0, beta_s)
        if not converged:
            log.warning("penalized QR did not converge in %d iterations (tau=%.3f, lam=%.4g)",
                        it, t, lam)

    beta_out[live] = beta_s
    obj = qr_objective(X_full, y, beta_out, t, lam, unpen)
    if debug:
        history.append(obj)
    state = {"z": beta_s * col_scale, "w": w, "u": u, "rho": rho, "live": live}
    return PenalizedQrFit(t, lam, beta_out, obj, it, converged, polished, unpen, history, state)


def fit_qr_at_levels(
    sample: GroupSample,
    taus,
    lambda_rule=None,
    opts: SolverOptions | None = None,
    *,
    unpenalized=(),
) -> list[PenalizedQrFit]:
    """Fit one penalized quantile regression per level in ``taus``.

    ``lambda_rule`` is either a fixed penalty, a callable ``tau -> lambda``,
    or None for :func:`default_lambda` with ``opts.lambda_multiplier``.
    Consecutive levels warm-start from each other.
    """
    opts = opts or SolverOptions()
    taus = [as_tau(t) for t in taus]
    if not taus:
        raise ConfigurationError("at least one quantile level is required")
    if lambda_rule is None:
        c = opts.lambda_multiplier
        lambda_rule = lambda t: default_lambda(sample.n, sample.p, t, c)  # noqa: E731
    rule = lambda_rule if callable(lambda_rule) else (lambda t, v=float(lambda_rule): v)

    fits = []
    prev = None
    for t in taus:
        fit = fit_penalized_qr(sample, t, rule(t), opts, unpenalized=unpenalized, init=prev)
        fits.append(fit)
        prev = fit
    return fits


def _fold_ids(n, k, seed):
    rng = np.random.default_rng(seed)
    ids = np.arange(n) % k
    rng.shuffle(ids)
    return ids


def cross_validate_multiplier(
    sample: GroupSample,
    tau,
    opts: SolverOptions | None = None,
    grid=(0.5, 1.0, 2.0, 4.0),
    *,
    unpenalized=(),
    seed: int | None = None,
) -> tuple[float, dict]:
    """Pick the penalty multiplier by k-fold held-out check loss.

    Returns the chosen multiplier and the mean held-out loss per grid value.
    Ties go to the larger multiplier (sparser fit).
    """
    opts = opts or SolverOptions()
    t = as_tau(tau)
    k = int(opts.cv_folds)
    if sample.n < k:
        raise ConfigurationError(f"need at least {k} observations for {k}-fold CV")
    ids = _fold_ids(sample.n, k, opts.cv_seed if seed is None else seed)
    # held-out losses only need to be ranked, not solved to full accuracy
    cv_opts = replace(opts, tol=max(float(opts.tol), CV_TOL))
    losses = {float(c): [] for c in grid}
    for f in range(k):
        train = sample.subset(ids != f)
        hold = ids == f
        prev = None
        # strongest penalty first, each fit warm-starting the next
        for c in sorted(losses, reverse=True):
            lam = default_lambda(train.n, train.p, t, c)
            prev = fit_penalized_qr(train, t, lam, cv_opts, unpenalized=unpenalized, init=prev)
            resid = sample.y[hold] - sample.X[hold] @ prev.beta
            losses[c].append(float(np.mean(check_loss(resid, t))))
    scores = {c: float(np.mean(v)) for c, v in losses.items()}
    best = min(scores.values())
    chosen = max(c for c, s in scores.items() if s <= best)
    return chosen, scores
