"""Synthetic two-group heteroscedastic design and a Monte Carlo driver that
compares the debiased estimator with the ablated and plug-in alternatives.

Design (1-based coefficient indices)::

    X~ ~ N(0, S),  S_ij = 0.5^|i-j|
    X  = (|X~_1|, |X~_2|, X~_3, ..., X~_p)
    Y1 = sum_{j>=3} X_j b1_j + (X_1 + 2 X_2) eps
    Y2 = sum_{j>=3} X_j b2_j + (2 X_1 + X_2) eps,   eps ~ N(0, 1)

so the conditional tau-quantile coefficients are
``(z, 2z, b1_3, ...)`` and ``(2z, z, b2_3, ...)`` with ``z = Phi^{-1}(tau)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .core import (
    ConfigurationError,
    DegenerateVarianceError,
    GroupSample,
    IqteError,
    Loading,
    SolverOptions,
    as_tau,
)
from .inference import analyze_group, estimate_iqte, plug_in_lasso_baseline

log = logging.getLogger(__name__)

SETTINGS = ("dense", "sparse")
METHODS = ("IQTE", "Deb", "Lasso")
MAX_FAILURE_RATE = 0.05
COUNTERS = ("relaxations", "eta_clipped", "cv_warnings", "deb_degenerate")

_LOADING_STREAM = 0
_REP_STREAM = 1


class ExperimentError(IqteError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class SimulationConfig:
    n1: int
    n2: int
    p: int
    setting: str
    taus: tuple = (0.2, 0.5, 0.8)
    n_reps: int = 100
    alpha: float = 0.05
    seed: int = 2024
    solver: SolverOptions = field(default_factory=SolverOptions)
    methods: tuple = METHODS
    workers: int = 1

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        self.methods = tuple(self.methods)
        problems = validate_config_dict(self.to_dict())
        if problems:
            raise ConfigurationError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        problems = validate_config_dict(d, require_all=True)
        if problems:
            raise ConfigurationError("; ".join(problems))
        kw = {k: d[k] for k in ("n1", "n2", "p", "setting", "taus", "n_reps", "alpha", "seed")
              if k in d}
        if "methods" in d:
            kw["methods"] = tuple(d["methods"])
        if "workers" in d:
            kw["workers"] = int(d["workers"])
        kw["solver"] = SolverOptions.from_dict(d.get("solver"))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "n1": self.n1,
            "n2": self.n2,
            "p": self.p,
            "setting": self.setting,
            "taus": list(self.taus),
            "n_reps": self.n_reps,
            "alpha": self.alpha,
            "seed": self.seed,
            "methods": list(self.methods),
            "solver": self.solver.to_dict() if isinstance(self.solver, SolverOptions) else self.solver,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_REQUIRED = ("n1", "n2", "p", "setting", "taus", "n_reps", "alpha", "seed")


def validate_config_dict(d: dict, require_all: bool = False) -> list[str]:
    """Every schema violation in ``d``, not just the first."""
    problems = []
    if not isinstance(d, dict):
        return ["configuration must be a JSON object"]
    if require_all:
        for k in _REQUIRED:
            if k not in d:
                problems.append(f"missing required key '{k}'")
        known = set(_REQUIRED) | {"solver", "methods", "workers"}
        for k in d:
            if k not in known:
                problems.append(f"unknown key '{k}'")

    def _int(key, lo):
        if key in d:
            v = d[key]
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < lo:
                problems.append(f"'{key}' must be an integer >= {lo}, got {v!r}")

    _int("n1", 10)
    _int("n2", 10)
    _int("p", 12)
    _int("n_reps", 1)
    _int("seed", 0)
    if "setting" in d and d["setting"] not in SETTINGS:
        problems.append(f"'setting' must be one of {SETTINGS}, got {d['setting']!r}")
    if "taus" in d:
        taus = d["taus"]
        if not isinstance(taus, (list, tuple)) or not taus:
            problems.append("'taus' must be a non-empty list")
        else:
            for t in taus:
                try:
                    as_tau(t)
                    if not (0.05 < float(t) < 0.95):
                        raise ConfigurationError("")
                except (ConfigurationError, TypeError, ValueError):
                    problems.append(f"quantile level {t!r} outside (0.05, 0.95)")
    if "alpha" in d:
        a = d["alpha"]
        if not isinstance(a, (int, float)) or not (0.0 < a < 1.0):
            problems.append(f"'alpha' must lie in (0, 1), got {a!r}")
    if "methods" in d:
        bad = [m for m in d["methods"] if m not in METHODS]
        if bad:
            problems.append(f"unknown method(s) {bad}; choose from {METHODS}")
    if "solver" in d and d["solver"] is not None and not isinstance(d["solver"], (dict, SolverOptions)):
        problems.append("'solver' must be an object")
    return problems


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------

def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@lru_cache(maxsize=8)
def ar_cholesky(p: int, r: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    S = r ** np.abs(idx[:, None] - idx[None, :])
    L = np.linalg.cholesky(S)
    L.setflags(write=False)
    return L


def location_coefficients(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantile-invariant coefficients of both groups (zeros on columns 1-2)."""
    b1 = np.zeros(p)
    b2 = np.zeros(p)
    b1[2], b1[3] = 2.0, 1.6
    b2[2], b2[3] = 1.2, 0.5
    for j in range(5, 12):  # 1-based j
        b1[j - 1] = -0.8 * (j - 4)
        b2[j - 1] = 0.5 * (j + 1)
    return b1, b2


def true_beta(group: int, tau, p: int) -> np.ndarray:
    """Conditional tau-quantile coefficients of ``group``."""
    z = float(ndtri(as_tau(tau)))
    b1, b2 = location_coefficients(p)
    b = (b1 if group == 1 else b2).copy()
    b[0], b[1] = (z, 2 * z) if group == 1 else (2 * z, z)
    return b


def scale_of(group: int, X: np.ndarray) -> np.ndarray:
    """Conditional noise scale; X columns 1-2 are already absolute values."""
    if group == 1:
        return X[:, 0] + 2.0 * X[:, 1]
    return 2.0 * X[:, 0] + X[:, 1]


def make_loading(setting: str, p: int, seed: int) -> np.ndarray:
    if setting not in SETTINGS:
        raise ConfigurationError(f"unknown setting {setting!r}")
    init = _rng(seed, _LOADING_STREAM).standard_normal(p)
    x = np.zeros(p)
    if setting == "dense":
        x[0], x[1], x[2], x[3] = 0.75, 5.25, -1.5, 1.05
        x[11:] = init[11:]
    else:
        x[0], x[1] = 1.5, 0.75
        for j in range(3, 8):
            x[j - 1] = (-1.0 if j == 5 else 1.0) * 0.125 * (9 - j)
        x[11:100] = init[11:100]
    return x


def true_delta(setting: str, x_new, tau) -> float:
    """``x_new' (beta_1(tau) - beta_2(tau))`` in closed form."""
    x = np.asarray(getattr(x_new, "x_new", x_new), dtype=float)
    if setting not in SETTINGS:
        raise ConfigurationError(f"unknown setting {setting!r}")
    p = x.size
    return float(x @ (true_beta(1, tau, p) - true_beta(2, tau, p)))


@dataclass
class ScenarioDraw:
    sample1: GroupSample
    sample2: GroupSample
    x_new: Loading
    true_beta1: dict
    true_beta2: dict
    delta_true: dict
    setting: str

    def true_sparsity(self, group: int, tau) -> np.ndarray:
        X = (self.sample1 if group == 1 else self.sample2).X
        return scale_of(group, X) / norm.pdf(ndtri(as_tau(tau)))

    def cond_cdf(self, group: int):
        """``v -> F_i(v_i)`` for every observation of ``group``."""
        X = (self.sample1 if group == 1 else self.sample2).X
        b1, b2 = location_coefficients(X.shape[1])
        loc = X @ (b1 if group == 1 else b2)
        sc = scale_of(group, X)
        return lambda v: norm.cdf((np.asarray(v) - loc) / sc)


def draw_group(rng, group: int, n: int, p: int) -> GroupSample:
    L = ar_cholesky(p)
    Xt = rng.standard_normal((n, p)) @ L.T
    eps = rng.standard_normal(n)
    X = Xt.copy()
    X[:, :2] = np.abs(Xt[:, :2])
    b1, b2 = location_coefficients(p)
    y = X @ (b1 if group == 1 else b2) + scale_of(group, X) * eps
    return GroupSample(X, y, group)


def generate_scenario(config: SimulationConfig, rep: int) -> ScenarioDraw:
    """Deterministic in ``(config.seed, rep)``; the loading depends on the seed only."""
    p = config.p
    x = make_loading(config.setting, p, config.seed)
    rng = _rng(config.seed, _REP_STREAM, int(rep))
    s1 = draw_group(rng, 1, config.n1, p)
    s2 = draw_group(rng, 2, config.n2, p)
    tb1 = {t: true_beta(1, t, p) for t in config.taus}
    tb2 = {t: true_beta(2, t, p) for t in config.taus}
    dt = {t: float(x @ (tb1[t] - tb2[t])) for t in config.taus}
    return ScenarioDraw(s1, s2, Loading(x), tb1, tb2, dt, config.setting)


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    tau: float
    delta_true: float
    bias: float
    se: float
    coverage: float
    length: float
    rejection_rate: float
    n_ok: int


@dataclass
class MonteCarloReport:
    config: dict
    rows: list
    metadata: dict
    records: list = field(default_factory=list, repr=False)
    timing: dict = field(default_factory=dict, repr=False)

    def row(self, method: str, tau: float) -> MethodSummary:
        for r in self.rows:
            if r.method == method and abs(r.tau - tau) < 1e-12:
                return r
        raise KeyError((method, tau))


def _run_rep(config: SimulationConfig, rep: int) -> dict:
    t0 = time.perf_counter()
    draw = generate_scenario(config, rep)
    opts = config.solver
    want_deb = "Deb" in config.methods
    out = {"rep": rep, "ok": True, "error": None, "estimates": [], "counters": {}}
    counters = dict.fromkeys(COUNTERS, 0)
    try:
        for t in config.taus:
            g1 = analyze_group(draw.sample1, draw.x_new, t, opts, ablated=want_deb)
            g2 = analyze_group(draw.sample2, draw.x_new, t, opts, ablated=want_deb)
            for g in (g1, g2):
                counters["relaxations"] += g.projection.relaxation_count
                counters["eta_clipped"] += g.sparsity.clipped_count
                counters["cv_warnings"] += int(bool(g.projection.cv.get("warning")))
            truth = draw.delta_true[t]
            if "IQTE" in config.methods:
                est = estimate_iqte(g1.functional, g2.functional, config.alpha, "IQTE")
                out["estimates"].append(_est_record(est, truth))
            if want_deb:
                try:
                    est = estimate_iqte(g1.ablated, g2.ablated, config.alpha, "Deb")
                    out["estimates"].append(_est_record(est, truth))
                except DegenerateVarianceError:
                    # without the scalar constraint M = 0 can be optimal; the
                    # interval then collapses onto the plug-in estimate
                    counters["deb_degenerate"] += 1
                    point = g1.ablated.point - g2.ablated.point
                    out["estimates"].append({
                        "method": "Deb", "tau": t, "estimate": point, "v_hat": 0.0,
                        "lower": point, "upper": point, "reject": bool(point > 0),
                        "delta_true": truth,
                    })
            if "Lasso" in config.methods:
                val = plug_in_lasso_baseline(g1.fit, g2.fit, draw.x_new)
                out["estimates"].append({
                    "method": "Lasso", "tau": t, "estimate": val, "v_hat": float("nan"),
                    "lower": float("nan"), "upper": float("nan"), "reject": None,
                    "delta_true": truth,
                })
    except IqteError as exc:
        out["ok"] = False
        out["error"] = f"{type(exc).__name__}: {exc}"
        out["estimates"] = []
    out["counters"] = counters
    out["seconds"] = time.perf_counter() - t0
    return out


def _est_record(est, truth) -> dict:
    return {
        "method": est.method, "tau": est.tau, "estimate": est.delta_hat, "v_hat": est.v_hat,
        "lower": est.ci_lower, "upper": est.ci_upper, "reject": bool(est.one_sided_reject),
        "delta_true": truth,
    }


def _run_chunk(args):
    config, reps = args
    return [_run_rep(config, r) for r in reps]


def run_monte_carlo(config: SimulationConfig, *, progress=None) -> MonteCarloReport:
    """Run ``config.n_reps`` replications and aggregate per (method, tau).

    Replications are reduced in index order, so the report does not depend
    on ``config.workers``.
    """
    t0 = time.perf_counter()
    reps = list(range(config.n_reps))
    if config.workers > 1:
        chunks = [reps[i::config.workers] for i in range(config.workers)]
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            parts = list(ex.map(_run_chunk, [(config, c) for c in chunks]))
        results = sorted((r for part in parts for r in part), key=lambda r: r["rep"])
    else:
        results = []
        for r in reps:
            results.append(_run_rep(config, r))
            if progress is not None:
                progress(r + 1, config.n_reps)

    failures = [r for r in results if not r["ok"]]
    if len(failures) > MAX_FAILURE_RATE * config.n_reps:
        raise ExperimentError(
            f"{len(failures)} of {config.n_reps} replications failed "
            f"(first: {failures[0]['error']})"
        )
    records = []
    for r in results:
        for e in r["estimates"]:
            records.append(dict(e, rep=r["rep"]))
    rows = summarize(records, config.methods, config.taus)
    counters = {k: int(sum(r["counters"].get(k, 0) for r in results))
                for k in COUNTERS}
    metadata = {
        "config_hash": config.digest(),
        "failures": len(failures),
        "failed_reps": [r["rep"] for r in failures],
        "failure_messages": sorted({r["error"] for r in failures}),
        **counters,
    }
    timing = {"total_seconds": time.perf_counter() - t0,
              "rep_seconds": [r["seconds"] for r in results]}
    return MonteCarloReport(config.to_dict(), rows, metadata, records, timing)


def summarize(records, methods, taus) -> list[MethodSummary]:
    rows = []
    for t in taus:
        for m in methods:
            sub = [r for r in records if r["method"] == m and abs(r["tau"] - t) < 1e-12]
            if not sub:
                continue
            est = np.array([r["estimate"] for r in sub])
            truth = sub[0]["delta_true"]
            se = float(np.std(est, ddof=1)) if len(sub) > 1 else 0.0
            if m == "Lasso":
                cov = length = rej = float("nan")
            else:
                lo = np.array([r["lower"] for r in sub])
                hi = np.array([r["upper"] for r in sub])
                cov = float(np.mean((lo <= truth) & (truth <= hi)))
                length = float(np.mean(hi - lo))
                rej = float(np.mean([r["reject"] for r in sub]))
            rows.append(MethodSummary(m, float(t), float(truth), float(np.mean(est) - truth), se,
                                      cov, length, rej, len(sub)))
    return rows


def standardized_errors(report: MonteCarloReport, method: str = "IQTE", tau=None) -> np.ndarray:
    out = [
        (r["estimate"] - r["delta_true"]) / math.sqrt(r["v_hat"])
        for r in report.records
        if r["method"] == method and (tau is None or abs(r["tau"] - tau) < 1e-12)
    ]
    return np.array(out)


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

REPORT_FORMATS = ("text", "csv", "json")
CSV_COLUMNS = ("setting", "n1", "n2", "p", "tau", "method", "delta_true", "rejection_rate",
               "coverage", "length", "bias", "se", "n_ok")
_TABLE_METRICS = (("rejection_rate", "RR"), ("coverage", "CR"), ("length", "Len"),
                  ("bias", "Bias"), ("se", "SE"))


def _row_dict(report: MonteCarloReport, r: MethodSummary) -> dict:
    c = report.config
    d = {"setting": c["setting"], "n1": c["n1"], "n2": c["n2"], "p": c["p"]}
    d.update({k: getattr(r, k) for k in CSV_COLUMNS if hasattr(r, k)})
    return d


def emit_report(report: MonteCarloReport, fmt: str = "text") -> str:
    """Render ``report`` as an aligned table, CSV or JSON.

    Runtimes are left out so identical configurations give identical bytes.
    """
    if fmt not in REPORT_FORMATS:
        raise ConfigurationError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    if fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        for r in report.rows:
            d = _row_dict(report, r)
            lines.append(",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k])
                                  for k in CSV_COLUMNS))
        return "\n".join(lines) + "\n"
    if fmt == "json":
        doc = {
            "schema_version": 1,
            "config": report.config,
            "metadata": report.metadata,
            "rows": [_row_dict(report, r) for r in report.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"
    return _render_table(report)


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def _render_table(report: MonteCarloReport) -> str:
    c = report.config
    methods = [m for m in c.get("methods", METHODS) if any(r.method == m for r in report.rows)]
    head = ["(n1,n2)", "tau"] + [f"{m}:{short}" for m in methods for _, short in _TABLE_METRICS]
    body = []
    for t in c["taus"]:
        cells = [f"({c['n1']},{c['n2']})", f"{t:.2f}"]
        for m in methods:
            r = report.row(m, t)
            cells += [_fmt(getattr(r, k)) for k, _ in _TABLE_METRICS]
        body.append(cells)
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    out = [f"# setting={c['setting']} p={c['p']} reps={c['n_reps']} "
           f"alpha={c['alpha']} config={report.metadata.get('config_hash', '')[:12]}"]
    for row in [head] + body:
        out.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(out) + "\n"


def parse_report_csv(text: str) -> list[dict]:
    """Inverse of the CSV rendering, for round-trip checks and downstream use."""
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split(",")
    ints = {"n1", "n2", "p", "n_ok"}
    out = []
    for ln in lines[1:]:
        vals = ln.split(",")
        d = {}
        for k, v in zip(header, vals):
            d[k] = int(v) if k in ints else v if k in ("setting", "method") else float(v)
        out.append(d)
    return out
