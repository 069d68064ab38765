"""Koenker difference-quotient estimates of the sparsity function
``1 / f(F^{-1}(tau) | x_i)`` from two neighbouring quantile fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, GroupSample, SolverOptions, as_tau
from .qr_lasso import PenalizedQrFit

ETA_FLOOR = 1e-4
ETA_CAP = 1e4


@dataclass
class SparsityEstimates:
    tau: float
    bandwidth: float
    eta: np.ndarray
    clipped_count: int
    eta_floor: float = ETA_FLOOR
    eta_cap: float = ETA_CAP


def default_bandwidth(n, tau) -> float:
    """Practical bandwidth ``min(n^{-1/6}, tau (1 - tau) / 2)``."""
    t = as_tau(tau)
    if n < 2:
        raise ConfigurationError("bandwidth needs n >= 2")
    return float(min(n ** (-1.0 / 6.0), t * (1.0 - t) / 2.0))


def theoretical_bandwidth(n, p, tau, support_size) -> float:
    """Rate-based bandwidth ``((s log p)^2 / n)^{1/6}`` with unit constant.

    Capped so that ``tau +/- h`` stays inside (0, 1).
    """
    t = as_tau(tau)
    s = max(int(support_size), 1)
    h = ((s * math.log(max(p, 2))) ** 2 / n) ** (1.0 / 6.0)
    return float(min(h, t * (1.0 - t) / 2.0))


def choose_bandwidth(n, tau, opts: SolverOptions | None = None, *, p=None, support_size=None) -> float:
    opts = opts or SolverOptions()
    if opts.bandwidth_rule == "theoretical":
        if p is None or support_size is None:
            raise ConfigurationError("theoretical bandwidth needs p and a support-size estimate")
        return theoretical_bandwidth(n, p, tau, support_size)
    return default_bandwidth(n, tau)


def estimate_sparsity(
    sample: GroupSample,
    fit_plus: PenalizedQrFit,
    fit_minus: PenalizedQrFit,
    h: float,
    *,
    eta_floor: float = ETA_FLOOR,
    eta_cap: float = ETA_CAP,
) -> SparsityEstimates:
    """Difference quotient of the fitted conditional quantiles at ``tau +/- h``.

    Each entry ``(x_i'b_plus - x_i'b_minus) / (2h)`` is clipped into
    ``[eta_floor, eta_cap]``; ``clipped_count`` counts the clipped entries.
    """
    h = float(h)
    if not h > 0:
        raise ConfigurationError(f"bandwidth must be positive, got {h!r}")
    spacing = fit_plus.tau - fit_minus.tau
    if abs(spacing - 2.0 * h) > 1e-12:
        raise ConfigurationError(
            f"fits at tau={fit_minus.tau} and tau={fit_plus.tau} are not 2h={2 * h} apart"
        )
    tau = 0.5 * (fit_plus.tau + fit_minus.tau)
    if not h < min(tau, 1.0 - tau):
        raise ConfigurationError(f"bandwidth {h} too large for tau={tau}")
    raw = sample.X @ (np.asarray(fit_plus.beta) - np.asarray(fit_minus.beta)) / (2.0 * h)
    eta = np.clip(raw, eta_floor, eta_cap)
    clipped = int(np.count_nonzero((raw < eta_floor) | (raw > eta_cap)))
    return SparsityEstimates(tau, h, eta, clipped, eta_floor, eta_cap)


def fit_sparsity(
    sample: GroupSample,
    tau,
    lam: float,
    opts: SolverOptions | None = None,
    *,
    center_fit: PenalizedQrFit | None = None,
    unpenalized=(),
) -> tuple[SparsityEstimates, tuple[PenalizedQrFit, PenalizedQrFit]]:
    """Fit at ``tau +/- h`` with the penalty chosen at ``tau`` and form the quotient."""
    from .qr_lasso import fit_penalized_qr

    opts = opts or SolverOptions()
    t = as_tau(tau)
    h = choose_bandwidth(
        sample.n, t, opts, p=sample.p,
        support_size=None if center_fit is None else center_fit.support_size,
    )
    f_minus = fit_penalized_qr(sample, t - h, lam, opts, unpenalized=unpenalized, init=center_fit)
    f_plus = fit_penalized_qr(sample, t + h, lam, opts, unpenalized=unpenalized, init=center_fit)
    # tau +/- h is recomputed from the fits, so rebuild it from the exact spacing
    h_eff = 0.5 * (f_plus.tau - f_minus.tau)
    est = estimate_sparsity(sample, f_plus, f_minus, h_eff,
                            eta_floor=opts.eta_floor, eta_cap=opts.eta_cap)
    est.tau = t
    return est, (f_plus, f_minus)
