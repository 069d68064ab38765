"""Projection direction for debiasing a linear functional.

Solves the variance-enhanced quadratic program

    min_M  M' S_tau M
    s.t.   ||S M - x||_inf            <= ||x|| lam
           |x' S M - ||x||^2|         <= ||x||^2 lam      (variance enhancement)
           max_i |X_i' M|             <= ||x|| gamma

where ``S`` is the sample second-moment matrix and ``S_tau`` its
sparsity-weighted version.  All constraints are two-sided bounds on linear
maps of ``M``, so the program is handled by a box-constrained QP solver:
an operator-splitting (ADMM / augmented Lagrangian) iteration with one
multiplier per constraint row, followed by an active-set polish that solves
the KKT system exactly whenever the iterate identifies it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core import (
    ConfigurationError,
    GroupSample,
    InfeasibleProjectionError,
    Loading,
    SolverOptions,
    as_loading,
    as_tau,
    quantile_adjusted_covariance,
    sample_covariance,
)

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
FAMILIES = ("inf", "scalar", "rows")


# --------------------------------------------------------------------------
# generic box-constrained QP:  min 0.5 x'Px  s.t.  l <= A x <= u
# --------------------------------------------------------------------------

@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str  # "solved", "polished", "infeasible", "max_iter"
    n_iter: int
    prim_res: float
    dual_res: float


def _project_box(v, l, u):
    return np.minimum(np.maximum(v, l), u)


def _kkt_polish(P, A, l, u, x, y, tol):
    """Solve the equality-constrained QP on the active set guessed from ``y``."""
    p = P.shape[0]
    scale = np.maximum(1.0, np.abs(l) + np.abs(u))
    thr = 1e-7 * (1.0 + np.max(np.abs(y)))
    low = y < -thr
    upp = y > thr
    act = np.flatnonzero(low | upp)
    rhs_b = np.where(low[act], l[act], u[act])
    Aa = A[act]
    k = act.size
    delta = 1e-9 * (1.0 + np.max(np.abs(np.diag(P))))
    K = np.zeros((p + k, p + k))
    K[:p, :p] = P
    K[:p, p:] = Aa.T
    K[p:, :p] = Aa
    Kreg = K.copy()
    Kreg[:p, :p] += delta * np.eye(p)
    Kreg[p:, p:] -= delta * np.eye(k)
    rhs = np.concatenate([np.zeros(p), rhs_b])
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = sla.lu_solve(lu, rhs)
    for _ in range(10):
        resid = rhs - K @ sol
        if np.max(np.abs(resid)) < 1e-13 * (1.0 + np.max(np.abs(rhs))):
            break
        sol = sol + sla.lu_solve(lu, resid)
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[:p]
    ya = sol[p:]
    yp = np.zeros_like(y)
    yp[act] = ya
    # primal feasibility and multiplier signs certify optimality
    Axp = A @ xp
    viol = np.max(np.maximum(l - Axp, Axp - u) / scale)
    if viol > tol:
        return None
    sign_bad = np.concatenate([ya[low[act]].clip(min=0), (-ya[upp[act]]).clip(min=0)])
    if sign_bad.size and np.max(sign_bad) > 1e-7 * (1.0 + np.max(np.abs(ya), initial=0.0)):
        return None
    return xp, yp


def solve_box_qp(
    P, A, l, u,
    *,
    tol=1e-7,
    max_iter=20000,
    x0=None,
    y0=None,
    polish=True,
    rho=0.1,
    sigma=1e-6,
    alpha=1.6,
) -> QpSolution:
    """Operator-splitting solver for ``min 0.5 x'Px s.t. l <= Ax <= u``.

    ``P`` must be symmetric positive semidefinite.  Rows of ``A`` should be
    pre-scaled so that ``u - l`` is of order one.  Primal infeasibility is
    detected from the dual-iterate difference.
    """
    m, p = A.shape
    x = np.zeros(p) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(m) if y0 is None else np.array(y0, dtype=float)
    z = _project_box(A @ x, l, u)
    AtA = A.T @ A

    def factor(r):
        return sla.cho_factor(P + sigma * np.eye(p) + r * AtA, check_finite=False)

    cf = factor(rho)
    status = "max_iter"
    prim = dual = np.inf
    eps_inf = 1e-9
    it = 0
    for it in range(1, int(max_iter) + 1):
        xt = sla.cho_solve(cf, sigma * x + A.T @ (rho * z - y), check_finite=False)
        zt = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = _project_box(zr + y / rho, l, u)
        dy = rho * (zr - z_new)
        y = y + dy
        z = z_new
        if it % 10 and it != 1:
            continue
        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        prim = np.max(np.abs(Ax - z))
        dual = np.max(np.abs(Px + Aty))
        nprim = max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-12)
        ndual = max(np.max(np.abs(Px)), np.max(np.abs(Aty)), 1e-12)
        if prim <= tol * (1.0 + nprim) and dual <= tol * (1.0 + ndual):
            status = "solved"
            break
        # infeasibility certificate: A'dy ~ 0 with u'dy+ + l'dy- < 0
        ndy = np.max(np.abs(dy))
        if ndy > 0 and it > 50:
            fin_u = np.where(np.isfinite(u), u, 0.0)
            fin_l = np.where(np.isfinite(l), l, 0.0)
            support = fin_u @ np.maximum(dy, 0) + fin_l @ np.minimum(dy, 0)
            if np.max(np.abs(A.T @ dy)) <= eps_inf * ndy and support < -eps_inf * ndy:
                status = "infeasible"
                break
        # rebalance rho when primal and dual residuals drift apart
        if it % 50 == 0:
            ratio = math.sqrt((prim / nprim) / max(dual / ndual, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                cf = factor(rho)

    if polish and status in ("solved", "max_iter"):
        pol = _kkt_polish(P, A, l, u, x, y, tol=1e-9)
        if pol is not None:
            xp, yp = pol
            if 0.5 * xp @ P @ xp <= 0.5 * x @ P @ x + 1e-9 * (1.0 + abs(x @ P @ x)) or status == "max_iter":
                x, y = xp, yp
                status = "polished"
    return QpSolution(x, y, status, it, float(prim), float(dual))


# --------------------------------------------------------------------------
# projection program
# --------------------------------------------------------------------------

@dataclass
class ProjectionProblem:
    sigma_hat: np.ndarray
    sigma_tau_hat: np.ndarray
    rows: np.ndarray
    x_new: Loading
    lam: float
    gamma: float
    include_scalar: bool = True

    def __post_init__(self):
        self.x_new = as_loading(self.x_new)
        S = np.asarray(self.sigma_hat, dtype=float)
        St = np.asarray(self.sigma_tau_hat, dtype=float)
        R = np.asarray(self.rows, dtype=float)
        p = self.x_new.p
        if S.shape != (p, p) or St.shape != (p, p):
            raise ConfigurationError(f"covariance matrices must be {p}x{p}")
        if R.ndim != 2 or R.shape[1] != p:
            raise ConfigurationError(f"rows must have {p} columns")
        for name, Mx in (("sigma_hat", S), ("sigma_tau_hat", St)):
            if np.max(np.abs(Mx - Mx.T), initial=0.0) > 1e-10 * (1.0 + np.max(np.abs(Mx))):
                raise ConfigurationError(f"{name} is not symmetric")
        if not (self.lam > 0 and self.gamma > 0):
            raise ConfigurationError("lam and gamma must be positive")
        self.sigma_hat, self.sigma_tau_hat, self.rows = S, St, R

    @classmethod
    def from_sample(cls, sample: GroupSample, eta, x_new, lam, gamma, include_scalar=True):
        return cls(
            sample_covariance(sample),
            quantile_adjusted_covariance(sample, eta),
            sample.X,
            as_loading(x_new),
            lam,
            gamma,
            include_scalar,
        )

    def with_tuning(self, lam, gamma) -> "ProjectionProblem":
        return ProjectionProblem(self.sigma_hat, self.sigma_tau_hat, self.rows, self.x_new,
                                 lam, gamma, self.include_scalar)


@dataclass
class ProjectionResult:
    M: np.ndarray
    objective: float
    slack_inf: float
    slack_scalar: float
    slack_rows: float
    feasible: bool
    relaxation_count: int = 0
    lam: float = float("nan")
    gamma: float = float("nan")
    status: str = ""
    n_iter: int = 0
    duals: dict = field(default_factory=dict, repr=False)
    include_scalar: bool = True
    cv: dict = field(default_factory=dict)
    tau: float | None = None

    def slacks(self) -> dict:
        return {"inf": self.slack_inf, "scalar": self.slack_scalar, "rows": self.slack_rows}


def projection_slacks(problem: ProjectionProblem, M) -> dict:
    """Constraint usage ratios; a value <= 1 means the constraint holds."""
    x = problem.x_new.x_new
    s = problem.x_new.norm
    SM = problem.sigma_hat @ M
    return {
        "inf": float(np.max(np.abs(SM - x)) / (s * problem.lam)),
        "scalar": float(abs(x @ SM - s * s) / (s * s * problem.lam)),
        "rows": float(np.max(np.abs(problem.rows @ M), initial=0.0) / (s * problem.gamma)),
    }


def _assemble(problem: ProjectionProblem):
    """Normalized QP data for the direction ``m = M / ||x||``."""
    s = problem.x_new.norm
    xt = problem.x_new.x_new / s
    lam, gam = problem.lam, problem.gamma
    S = problem.sigma_hat
    blocks = [S / lam]
    lows = [(xt - lam) / lam]
    upps = [(xt + lam) / lam]
    fam = [np.zeros(S.shape[0], dtype=int)]
    if problem.include_scalar:
        blocks.append((xt @ S)[None, :] / lam)
        lows.append(np.array([(1.0 - lam) / lam]))
        upps.append(np.array([(1.0 + lam) / lam]))
        fam.append(np.ones(1, dtype=int))
    R = problem.rows
    blocks.append(R / gam)
    lows.append(-np.ones(R.shape[0]))
    upps.append(np.ones(R.shape[0]))
    fam.append(np.full(R.shape[0], 2))
    A = np.vstack(blocks)
    l = np.concatenate(lows)
    u = np.concatenate(upps)
    Q = problem.sigma_tau_hat
    qscale = max(float(np.trace(Q)) / Q.shape[0], 1e-12)
    P = 2.0 * Q / qscale
    return P, A, l, u, np.concatenate(fam), qscale


def _row_scale(problem: ProjectionProblem, fam):
    lam, gam = problem.lam, problem.gamma
    return np.where(fam == 2, 1.0 / gam, 1.0 / lam)


def solve_projection(
    problem: ProjectionProblem,
    opts: SolverOptions | None = None,
    *,
    tol: float | None = None,
    warm: ProjectionResult | None = None,
) -> ProjectionResult:
    """Solve the projection program once at the problem's ``(lam, gamma)``.

    Never raises on infeasibility; inspect ``feasible`` instead.
    """
    opts = opts or SolverOptions()
    tol = opts.kkt_tol * 1e-1 if tol is None else tol
    P, A, l, u, fam, qscale = _assemble(problem)
    s = problem.x_new.norm
    p = P.shape[0]

    # rows that do not involve M at all are either trivially true or fatal
    zero_rows = np.linalg.norm(A, axis=1) == 0.0
    if np.any(zero_rows & ((l > 0) | (u < 0))):
        M = np.zeros(p)
        return _result(problem, M, status="infeasible", n_iter=0)

    x0 = y0 = None
    if warm is not None and warm.M is not None and warm.M.shape == (p,):
        x0 = warm.M / s
        yd = warm.duals.get("raw")
        if yd is not None and warm.duals.get("fam") is not None and np.array_equal(warm.duals["fam"], fam):
            # multipliers are stored against the unscaled constraints
            y0 = yd / _row_scale(problem, fam) / qscale
    sol = solve_box_qp(P, A, l, u, tol=tol, max_iter=opts.proj_max_iter, x0=x0, y0=y0)
    M = sol.x * s
    duals = {
        "raw": sol.y * _row_scale(problem, fam) * qscale,
        "fam": fam,
    }
    return _result(problem, M, status=sol.status, n_iter=sol.n_iter, duals=duals)


def _result(problem, M, *, status, n_iter, duals=None, relaxation_count=0):
    sl = projection_slacks(problem, M)
    enforced = ["inf", "rows"] + (["scalar"] if problem.include_scalar else [])
    feasible = status != "infeasible" and all(sl[k] <= 1.0 + FEAS_TOL for k in enforced)
    obj = float(M @ problem.sigma_tau_hat @ M)
    return ProjectionResult(
        M=M,
        objective=max(obj, 0.0),
        slack_inf=sl["inf"],
        slack_scalar=sl["scalar"],
        slack_rows=sl["rows"],
        feasible=bool(feasible),
        relaxation_count=relaxation_count,
        lam=problem.lam,
        gamma=problem.gamma,
        status=status,
        n_iter=n_iter,
        duals=duals or {},
        include_scalar=problem.include_scalar,
    )


def _enforced_slacks(res: ProjectionResult) -> list:
    sl = res.slacks()
    if not res.include_scalar:
        sl.pop("scalar")
    return list(sl.values())


def _binding_family(res: ProjectionResult) -> str:
    sl = res.slacks()
    if not res.include_scalar:
        sl.pop("scalar")
    return max(sl, key=sl.get)


def solve_projection_with_relaxation(
    problem: ProjectionProblem,
    opts: SolverOptions | None = None,
    *,
    tol: float | None = None,
    warm: ProjectionResult | None = None,
) -> ProjectionResult:
    """Solve, inflating ``lam`` and ``gamma`` by ``opts.relax_factor`` on infeasibility.

    Raises
    ------
    InfeasibleProjectionError
        If the program is still infeasible after ``opts.max_relaxations`` rounds.
    """
    opts = opts or SolverOptions()
    res = solve_projection(problem, opts, tol=tol, warm=warm)
    rounds = 0
    current = problem
    while not res.feasible and rounds < opts.max_relaxations:
        rounds += 1
        current = current.with_tuning(current.lam * opts.relax_factor,
                                      current.gamma * opts.relax_factor)
        res = solve_projection(current, opts, tol=tol, warm=res if res.feasible else None)
    res.relaxation_count = rounds
    if not res.feasible:
        fam = _binding_family(res)
        raise InfeasibleProjectionError(
            f"projection infeasible after {rounds} relaxation rounds "
            f"(lam={current.lam:.4g}, gamma={current.gamma:.4g}); "
            f"binding constraint family: {fam}",
            binding=fam,
        )
    return res


def base_rate(n, p) -> float:
    """``sqrt(log p / n)``; ``p`` is floored at 2 so the rate stays positive."""
    return math.sqrt(math.log(max(p, 2)) / n)


def default_gamma(p, multiplier=2.0) -> float:
    return multiplier * math.sqrt(math.log(max(p, 2)))


def fold_assignment(n, k, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ids = np.arange(n) % k
    rng.shuffle(ids)
    return ids


def tune_projection(
    sample: GroupSample,
    eta,
    x_new,
    tau,
    opts: SolverOptions | None = None,
    *,
    include_scalar: bool = True,
    seed: int | None = None,
):
    """Choose ``lam`` by k-fold cross-validation and refit.

    For each multiplier ``c`` in ``opts.lambda_grid`` (ascending) the program
    is solved on the training folds with ``lam = c sqrt(log p / n_train)`` and
    scored on the held-out fold by ``||S_hold M - x||_inf / (||x|| lam)``
    (infinite when the fold is infeasible).  Under
    ``opts.projection_tuning == "feasible"`` the smallest ``c`` feasible on
    every fold is taken; under ``"heldout"`` the smallest ``c`` whose mean
    score is at most ``opts.cv_threshold``.  The choice is refit on the full
    sample with ``lam = c sqrt(log p / n)``; ``gamma`` is fixed at
    ``opts.gamma_multiplier * sqrt(log p)``.

    Returns
    -------
    (lam, gamma, ProjectionResult)
        ``result.cv`` carries the per-multiplier scores, the selection and a
        ``warning`` flag set when no multiplier qualified.
    """
    opts = opts or SolverOptions()
    as_tau(tau)
    x_new = as_loading(x_new)
    eta = np.asarray(getattr(eta, "eta", eta), dtype=float)
    n, p = sample.n, sample.p
    k = int(opts.cv_folds)
    if n < 2 * k:
        raise ConfigurationError(f"projection cross-validation needs n >= {2 * k}, got {n}")
    if x_new.p != p:
        raise ConfigurationError(f"loading has length {x_new.p}, design has {p} columns")
    ids = fold_assignment(n, k, opts.cv_seed if seed is None else seed)
    gamma = default_gamma(p, opts.gamma_multiplier)
    xs, s = x_new.x_new, x_new.norm

    folds = []
    for f in range(k):
        tr = ids != f
        train = sample.subset(tr)
        hold = sample.subset(~tr)
        base = ProjectionProblem.from_sample(train, eta[tr], x_new, 1.0, gamma, include_scalar)
        folds.append((base, sample_covariance(hold), train.n))

    grid = sorted(float(c) for c in opts.lambda_grid)
    scores: dict = {}
    chosen = None
    warm = [None] * k
    for c in grid:
        vals = []
        for f, (base, S_hold, n_tr) in enumerate(folds):
            lam_f = c * base_rate(n_tr, p)
            res = solve_projection(base.with_tuning(lam_f, gamma), opts, tol=opts.cv_tol, warm=warm[f])
            # fold solves run at cv_tol, so judge admissibility at that accuracy
            if res.status == "infeasible" or max(_enforced_slacks(res)) > 1.0 + 10.0 * opts.cv_tol:
                vals.append(math.inf)
                continue
            warm[f] = res
            vals.append(float(np.max(np.abs(S_hold @ res.M - xs)) / (s * lam_f)))
        scores[c] = float(np.mean(vals))
        if opts.projection_tuning == "feasible":
            ok = math.isfinite(scores[c])
        else:
            ok = scores[c] <= opts.cv_threshold
        if ok:
            chosen = c
            break

    warning = chosen is None
    if warning:
        chosen = grid[-1]
        log.warning("no lambda multiplier met the %s rule; using %g", opts.projection_tuning, chosen)
    lam = chosen * base_rate(n, p)
    full = ProjectionProblem.from_sample(sample, eta, x_new, lam, gamma, include_scalar)
    res = solve_projection_with_relaxation(full, opts)
    res.cv = {"scores": scores, "multiplier": chosen, "warning": warning}
    return res.lam, res.gamma, res
