"""Debiased linear functionals of quantile coefficients, the treatment-effect
estimate built from two of them, and the comparison methods.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .core import (
    ConfigurationError,
    DegenerateVarianceError,
    GroupSample,
    SolverOptions,
    as_loading,
    as_tau,
    sample_covariance,
    score,
)
from .projection import ProjectionResult, tune_projection
from .qr_lasso import PenalizedQrFit, cross_validate_multiplier, default_lambda, fit_penalized_qr
from .sparsity import SparsityEstimates, fit_sparsity

TAU_MATCH = 1e-12
RESID_SNAP = 1e-9


def normal_upper_quantile(a: float) -> float:
    """``z_a`` with ``P(N(0,1) > z_a) = a``."""
    if not (0.0 < a < 1.0):
        raise ConfigurationError(f"tail probability must lie in (0, 1), got {a!r}")
    return float(-ndtri(a))


@dataclass
class DebiasedFunctional:
    group_id: int
    tau: float
    plug_in: float
    correction: float
    point: float
    variance_component: float


@dataclass
class IqteEstimate:
    tau: float
    delta_hat: float
    v_hat: float
    ci_lower: float
    ci_upper: float
    z_stat: float
    one_sided_reject: bool
    alpha: float
    method: str = "IQTE"

    @property
    def se(self) -> float:
        return math.sqrt(self.v_hat)

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "delta_hat": self.delta_hat,
            "v_hat": self.v_hat,
            "ci": [self.ci_lower, self.ci_upper],
            "z_stat": self.z_stat,
            "reject": bool(self.one_sided_reject),
            "alpha": self.alpha,
            "method": self.method,
        }


@dataclass
class BiasDiagnostics:
    tau: float
    group_id: int
    u_term: float
    bias_terms: tuple
    total_error: float

    @property
    def bias(self) -> float:
        return float(sum(self.bias_terms))

    @property
    def identity_residual(self) -> float:
        return float(self.total_error - self.u_term - sum(self.bias_terms))


def _check_tau(*taus):
    ref = taus[0]
    for t in taus[1:]:
        if t is not None and abs(t - ref) > TAU_MATCH:
            raise ConfigurationError(f"inputs refer to different quantile levels ({ref} vs {t})")


def fitted_residuals(sample: GroupSample, beta) -> np.ndarray:
    """``y - X beta`` with rounding-level residuals snapped to exactly zero.

    A quantile-regression solution interpolates some observations; their
    residuals are zero up to rounding, and the sign of that rounding would
    otherwise decide their score.
    """
    r = sample.y - sample.X @ beta
    tol = RESID_SNAP * (1.0 + float(np.max(np.abs(sample.y))))
    return np.where(np.abs(r) <= tol, 0.0, r)


def debias_functional(
    sample: GroupSample,
    fit: PenalizedQrFit,
    eta,
    proj,
    x_new,
) -> DebiasedFunctional:
    """One-step correction of ``x_new' beta_hat`` along the projection direction.

    ``proj`` may be a :class:`ProjectionResult` or a bare direction vector.
    """
    x = as_loading(x_new).x_new
    eta_vec = np.asarray(getattr(eta, "eta", eta), dtype=float)
    if isinstance(proj, ProjectionResult):
        if not proj.feasible:
            raise ConfigurationError("projection direction is not feasible")
        M = proj.M
        proj_tau = getattr(proj, "tau", None)
    else:
        M = np.asarray(proj, dtype=float)
        proj_tau = None
    _check_tau(fit.tau, getattr(eta, "tau", None), proj_tau)
    if x.size != sample.p or M.size != sample.p or fit.beta.size != sample.p:
        raise ConfigurationError("loading, direction and coefficients must all have length p")
    t = fit.tau
    resid = fitted_residuals(sample, fit.beta)
    weighted = (eta_vec * score(resid, t)) @ sample.X / sample.n
    plug_in = float(x @ fit.beta)
    correction = float(M @ weighted)
    Xm = sample.X @ M
    var = t * (1.0 - t) * float(np.mean((eta_vec * Xm) ** 2)) / sample.n
    return DebiasedFunctional(sample.group_id, t, plug_in, correction, plug_in + correction, var)


def estimate_iqte(
    fun1: DebiasedFunctional,
    fun2: DebiasedFunctional,
    alpha: float = 0.05,
    method: str = "IQTE",
) -> IqteEstimate:
    """Difference of two debiased functionals with its normal CI and one-sided test."""
    if abs(fun1.tau - fun2.tau) > TAU_MATCH:
        raise ConfigurationError("functionals refer to different quantile levels")
    if fun1.group_id != 1 or fun2.group_id != 2:
        raise ConfigurationError("expected group 1 first and group 2 second")
    if not (0.0 < alpha < 1.0):
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha!r}")
    delta = fun1.point - fun2.point
    v = fun1.variance_component + fun2.variance_component
    if not v > 0:
        raise DegenerateVarianceError("estimated variance is zero; the projection collapsed")
    se = math.sqrt(v)
    z2 = normal_upper_quantile(alpha / 2.0)
    z1 = normal_upper_quantile(alpha)
    return IqteEstimate(
        tau=fun1.tau,
        delta_hat=delta,
        v_hat=v,
        ci_lower=delta - z2 * se,
        ci_upper=delta + z2 * se,
        z_stat=delta / se,
        one_sided_reject=bool(delta - z1 * se > 0),
        alpha=alpha,
        method=method,
    )


def plug_in_lasso_baseline(fit1: PenalizedQrFit, fit2: PenalizedQrFit, x_new) -> float:
    """Undebiased ``x_new' (beta_hat_1 - beta_hat_2)``."""
    _check_tau(fit1.tau, fit2.tau)
    x = as_loading(x_new).x_new
    return float(x @ (fit1.beta - fit2.beta))


def ablated_deb_baseline(
    sample: GroupSample,
    fit: PenalizedQrFit,
    eta,
    x_new,
    tau,
    opts: SolverOptions | None = None,
) -> tuple[DebiasedFunctional, ProjectionResult]:
    """Same pipeline with the variance-enhancement constraint removed."""
    t = as_tau(tau)
    _, _, proj = tune_projection(sample, eta, x_new, t, opts, include_scalar=False)
    proj.tau = t
    return debias_functional(sample, fit, eta, proj, x_new), proj


def oracle_bias_diagnostics(
    sample: GroupSample,
    fit: PenalizedQrFit,
    eta,
    proj,
    x_new,
    beta_true,
    sparsity_true,
    cond_cdf: Callable[[np.ndarray], np.ndarray],
) -> BiasDiagnostics:
    """Split the error of the debiased functional into a variance term and
    five bias terms, using the true coefficients and conditional law.

    ``cond_cdf(v)`` must return ``F_i(v_i)`` for every observation ``i``.
    The fourth (second-order Taylor) term is recovered as the remainder, so
    the identity ``total = U + sum(bias_terms)`` holds by construction.
    """
    x = as_loading(x_new).x_new
    M = proj.M if isinstance(proj, ProjectionResult) else np.asarray(proj, dtype=float)
    eta_v = np.asarray(getattr(eta, "eta", eta), dtype=float)
    sp = np.asarray(sparsity_true, dtype=float)
    beta = np.asarray(beta_true, dtype=float)
    X, y, n = sample.X, sample.y, sample.n
    t = fit.tau

    fun = debias_functional(sample, fit, eta_v, M, x)
    zeta = fit.beta - beta
    q_true = X @ beta
    q_hat = X @ fit.beta
    phi_true = score(y - q_true, t)
    XM = X @ M
    Xz = X @ zeta

    u_term = float(np.sum(sp * XM * phi_true) / n)
    d1 = -float((sample_covariance(sample) @ M - x) @ zeta)
    d2 = -float(np.sum((eta_v / sp - 1.0) * XM * Xz) / n)
    nu = (y <= q_true).astype(float) - (y <= q_hat).astype(float)
    rho = np.asarray(cond_cdf(q_true), dtype=float) - np.asarray(cond_cdf(q_hat), dtype=float)
    d3 = float(np.sum(eta_v * XM * (nu - rho)) / n)
    d5 = float(np.sum((eta_v - sp) * XM * phi_true) / n)
    total = fun.point - float(x @ beta)
    d4 = total - u_term - d1 - d2 - d3 - d5
    return BiasDiagnostics(t, sample.group_id, u_term, (d1, d2, d3, d4, d5), total)


# --------------------------------------------------------------------------
# end-to-end per-group pipeline
# --------------------------------------------------------------------------

@dataclass
class GroupAnalysis:
    """Everything computed for one group at one quantile level."""

    tau: float
    lam: float
    fit: PenalizedQrFit
    sparsity: SparsityEstimates
    projection: ProjectionResult
    functional: DebiasedFunctional
    ablated: DebiasedFunctional | None = None
    ablated_projection: ProjectionResult | None = None
    lambda_multiplier: float = float("nan")
    notes: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        proj = self.projection
        out = {
            "group": self.functional.group_id,
            "tau": self.tau,
            "qr_lambda": self.lam,
            "qr_lambda_multiplier": self.lambda_multiplier,
            "qr_support_size": self.fit.support_size,
            "qr_converged": self.fit.converged,
            "qr_polished": self.fit.polished,
            "qr_iterations": self.fit.n_iter,
            "bandwidth": self.sparsity.bandwidth,
            "eta_clipped": self.sparsity.clipped_count,
            "projection_lambda": proj.lam,
            "projection_gamma": proj.gamma,
            "projection_multiplier": proj.cv.get("multiplier"),
            "projection_cv_warning": proj.cv.get("warning"),
            "projection_relaxations": proj.relaxation_count,
            "projection_status": proj.status,
            "projection_objective": proj.objective,
            "functional": asdict(self.functional),
        }
        return out


def analyze_group(
    sample: GroupSample,
    x_new,
    tau,
    opts: SolverOptions | None = None,
    *,
    ablated: bool = False,
    unpenalized=(),
) -> GroupAnalysis:
    """Fit, estimate sparsity, tune the projection and debias for one group."""
    opts = opts or SolverOptions()
    t = as_tau(tau)
    x_new = as_loading(x_new)
    if x_new.p != sample.p:
        raise ConfigurationError(f"loading has length {x_new.p}, design has {sample.p} columns")
    c = float(opts.lambda_multiplier)
    if opts.lambda_cv:
        c, _ = cross_validate_multiplier(sample, t, opts, unpenalized=unpenalized)
    lam = default_lambda(sample.n, sample.p, t, c)
    fit = fit_penalized_qr(sample, t, lam, opts, unpenalized=unpenalized)
    eta, _ = fit_sparsity(sample, t, lam, opts, center_fit=fit, unpenalized=unpenalized)
    _, _, proj = tune_projection(sample, eta, x_new, t, opts)
    proj.tau = t
    fun = debias_functional(sample, fit, eta, proj, x_new)
    out = GroupAnalysis(t, lam, fit, eta, proj, fun, lambda_multiplier=c)
    if ablated:
        out.ablated, out.ablated_projection = ablated_deb_baseline(sample, fit, eta, x_new, t, opts)
    return out
