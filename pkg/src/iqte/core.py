"""Shared primitives: check loss, quantile score, covariance estimators and
the basic data containers used by every other module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAU_MIN = 0.05
TAU_MAX = 0.95


class IqteError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IqteError, ValueError):
    pass


class ConfigurationError(IqteError, ValueError):
    pass


class DataError(IqteError, ValueError):
    pass


class InfeasibleProjectionError(IqteError):
    """The projection program stayed infeasible after every relaxation round."""

    def __init__(self, message: str, binding: str = ""):
        super().__init__(message)
        self.binding = binding


class DegenerateVarianceError(IqteError):
    pass


@dataclass(frozen=True)
class QuantileLevel:
    tau: float
    lower: float = TAU_MIN
    upper: float = TAU_MAX

    def __post_init__(self):
        tau = float(self.tau)
        if not np.isfinite(tau) or not (0.0 < tau < 1.0):
            raise ConfigurationError(f"quantile level must lie in (0, 1), got {self.tau!r}")
        if not (self.lower < tau < self.upper):
            raise ConfigurationError(
                f"quantile level {tau} outside the admissible range "
                f"({self.lower}, {self.upper})"
            )
        object.__setattr__(self, "tau", tau)

    def __float__(self) -> float:
        return self.tau


def as_tau(tau) -> float:
    """Accept either a bare float or a :class:`QuantileLevel`."""
    if isinstance(tau, QuantileLevel):
        return tau.tau
    t = float(tau)
    if not (0.0 < t < 1.0):
        raise ConfigurationError(f"quantile level must lie in (0, 1), got {tau!r}")
    return t


@dataclass(frozen=True)
class GroupSample:
    """Design matrix and responses of one treatment group."""

    X: np.ndarray
    y: np.ndarray
    group_id: int = 1

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DimensionError(f"X must be two-dimensional, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        if X.shape[0] < 2:
            raise DataError(f"need at least 2 observations, got {X.shape[0]}")
        if X.shape[1] < 1:
            raise DimensionError("X must have at least one column")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("X and y must contain only finite values")
        if self.group_id not in (1, 2):
            raise ConfigurationError(f"group_id must be 1 or 2, got {self.group_id!r}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "GroupSample":
        return GroupSample(self.X[idx], self.y[idx], self.group_id)


@dataclass(frozen=True)
class Loading:
    """Covariate vector of the individual whose treatment effect is targeted."""

    x_new: np.ndarray = field()

    def __post_init__(self):
        x = np.array(self.x_new, dtype=np.float64).reshape(-1)
        if x.size == 0 or not np.all(np.isfinite(x)):
            raise DataError("loading vector must be non-empty and finite")
        if not np.linalg.norm(x) > 0:
            raise DataError("loading vector must have positive Euclidean norm")
        x.setflags(write=False)
        object.__setattr__(self, "x_new", x)

    @property
    def p(self) -> int:
        return self.x_new.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.x_new))


def as_loading(x) -> Loading:
    return x if isinstance(x, Loading) else Loading(x)


def score(x, tau):
    """Quantile score ``tau - 1{x <= 0}``; the indicator includes zero."""
    t = as_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x <= 0.0, t - 1.0, t)
    return out if out.ndim else float(out)


def check_loss(x, tau):
    """Check (pinball) loss ``x * score(x, tau)``."""
    x = np.asarray(x, dtype=np.float64)
    out = x * score(x, tau)
    return out if np.ndim(out) else float(out)


def _design(sample) -> np.ndarray:
    if isinstance(sample, GroupSample):
        return sample.X
    X = np.asarray(getattr(sample, "X", sample), dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimensionError(f"design must be a non-empty matrix, got shape {X.shape}")
    return X


def sample_covariance(sample) -> np.ndarray:
    """Uncentred second-moment matrix ``X'X / n``.

    Accepts a :class:`GroupSample` or a bare design matrix.
    """
    X = _design(sample)
    S = X.T @ X / X.shape[0]
    return 0.5 * (S + S.T)


def quantile_adjusted_covariance(sample, eta) -> np.ndarray:
    """Weighted second moment ``(1/n) sum eta_i^2 x_i x_i'``."""
    X = _design(sample)
    eta = np.asarray(getattr(eta, "eta", eta), dtype=np.float64).reshape(-1)
    if eta.shape[0] != X.shape[0]:
        raise DimensionError(
            f"eta has {eta.shape[0]} entries but the sample has {X.shape[0]} rows"
        )
    if np.any(eta <= 0):
        raise DataError("sparsity estimates must be strictly positive")
    Xw = X * eta[:, None]
    S = Xw.T @ Xw / X.shape[0]
    return 0.5 * (S + S.T)


PROJECTION_TUNING = ("feasible", "heldout")


@dataclass
class SolverOptions:
    """Numerical knobs shared by the quantile-regression and projection solvers.

    ``tol``/``max_iter``/``rho`` drive the penalized quantile regression.
    ``kkt_tol``/``proj_max_iter`` drive the projection program, and
    ``cv_tol`` loosens the projection tolerance inside cross-validation.
    ``projection_tuning`` selects the cross-validation rule for the
    projection penalty: ``"feasible"`` takes the smallest multiplier that is
    feasible on every training fold, ``"heldout"`` the smallest whose mean
    held-out constraint residual is at most ``cv_threshold``.
    """

    max_iter: int = 20000
    tol: float = 1e-7
    rho: float = 1.0
    lambda_multiplier: float = 2.0
    cv_folds: int = 5
    lambda_cv: bool = True
    # projection
    kkt_tol: float = 1e-6
    proj_max_iter: int = 20000
    cv_tol: float = 1e-4
    lambda_grid: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    gamma_multiplier: float = 2.0
    cv_threshold: float = 1.25
    projection_tuning: str = "feasible"
    max_relaxations: int = 5
    relax_factor: float = 1.5
    # sparsity
    eta_floor: float = 1e-4
    eta_cap: float = 1e4
    bandwidth_rule: str = "practical"
    # misc
    intercept: bool = False
    cv_seed: int = 20240601

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverOptions":
        if not d:
            return cls()
        aliases = {"tolerance": "tol"}
        known = {f for f in cls.__dataclass_fields__}
        kwargs, unknown = {}, []
        for k, v in d.items():
            k = aliases.get(k, k)
            if k not in known:
                unknown.append(k)
                continue
            kwargs[k] = tuple(v) if k == "lambda_grid" else v
        if unknown:
            raise ConfigurationError(f"unknown solver option(s): {', '.join(sorted(unknown))}")
        opts = cls(**kwargs)
        opts.validate()
        return opts

    def validate(self) -> None:
        problems = []
        if int(self.max_iter) < 1:
            problems.append("max_iter must be >= 1")
        for name in ("tol", "rho", "lambda_multiplier", "kkt_tol", "cv_tol",
                     "gamma_multiplier", "cv_threshold", "eta_floor", "eta_cap"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                problems.append(f"{name} must be a positive number, got {v!r}")
        for name in ("max_iter", "proj_max_iter", "cv_folds", "max_relaxations"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                problems.append(f"{name} must be an integer, got {v!r}")
        if problems:
            raise ConfigurationError("; ".join(problems))
        if int(self.cv_folds) < 2:
            problems.append("cv_folds must be >= 2")
        if not self.lambda_grid or any(float(c) <= 0 for c in self.lambda_grid):
            problems.append("lambda_grid must be a non-empty list of positive values")
        if self.eta_floor >= self.eta_cap:
            problems.append("eta_floor must be below eta_cap")
        if self.projection_tuning not in PROJECTION_TUNING:
            problems.append(f"projection_tuning must be one of {PROJECTION_TUNING}")
        if self.bandwidth_rule not in ("practical", "theoretical"):
            problems.append("bandwidth_rule must be 'practical' or 'theoretical'")
        if float(self.relax_factor) <= 1:
            problems.append("relax_factor must exceed 1")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lambda_grid"] = list(self.lambda_grid)
        return d
