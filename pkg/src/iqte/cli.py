"""Command-line entry point: ``iqte analyze | simulate | diagnose``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import (
    TAU_MAX,
    TAU_MIN,
    ConfigurationError,
    DataError,
    DegenerateVarianceError,
    DimensionError,
    GroupSample,
    InfeasibleProjectionError,
    IqteError,
    Loading,
    SolverOptions,
)
from .inference import analyze_group, estimate_iqte, oracle_bias_diagnostics
from .simharness import (
    REPORT_FORMATS,
    ExperimentError,
    SimulationConfig,
    emit_report,
    generate_scenario,
    run_monte_carlo,
    validate_config_dict,
)

log = logging.getLogger("iqte")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    return [c.strip() for c in rows[0]], rows[1:]


def _parse_cell(text, path, line, col):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: non-numeric value {text!r} at row {line}, column '{col}'") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: non-finite value {text!r} at row {line}, column '{col}'")
    return v


def read_table(path, response_col, group_col=None):
    """Parse a CSV into ``(X, y, groups, covariate_names)``.

    Row numbers in error messages count the header as row 1.
    """
    header, rows = _read_rows(path)
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    if response_col not in header:
        raise DataError(f"{path}: response column '{response_col}' not in header")
    if group_col is not None and group_col not in header:
        raise DataError(f"{path}: group column '{group_col}' not in header")
    cov = [c for c in header if c not in (response_col, group_col)]
    if not cov:
        raise DataError(f"{path}: no covariate columns")
    X = np.empty((len(rows), len(cov)))
    y = np.empty(len(rows))
    groups = []
    pos = {c: i for i, c in enumerate(header)}
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} fields, header has {len(header)}")
        y[i] = _parse_cell(row[pos[response_col]], path, line, response_col)
        for j, c in enumerate(cov):
            X[i, j] = _parse_cell(row[pos[c]], path, line, c)
        if group_col is not None:
            groups.append(row[pos[group_col]].strip())
    return X, y, groups, cov


def ingest_csv(path, response_col="y", *, group_col=None, group_value=None, group_id=1):
    """Load one group from a CSV file into a :class:`GroupSample`."""
    X, y, groups, _ = read_table(path, response_col, group_col)
    if group_col is not None:
        keep = np.array([g == str(group_value) for g in groups], dtype=bool)
        X, y = X[keep], y[keep]
    if len(y) < 2:
        raise DataError(f"{path}: need at least 2 observations, found {len(y)}")
    return GroupSample(X, y, group_id)


def center_pooled(s1: GroupSample, s2: GroupSample):
    """Subtract the column means of both groups combined; returns the offsets."""
    mu = np.vstack([s1.X, s2.X]).mean(axis=0)
    return (GroupSample(s1.X - mu, s1.y, s1.group_id),
            GroupSample(s2.X - mu, s2.y, s2.group_id), mu)


def read_loading(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8") if Path(path).exists() else None
    if text is None:
        raise DataError(f"{path}: loading file not found")
    vals = []
    for k, tok in enumerate(text.replace(",", " ").split()):
        try:
            v = float(tok)
        except ValueError:
            raise DataError(f"{path}: non-numeric loading entry {tok!r} at position {k + 1}") from None
        if not math.isfinite(v):
            raise DataError(f"{path}: non-finite loading entry at position {k + 1}")
        vals.append(v)
    if not vals:
        raise DataError(f"{path}: empty loading vector")
    return np.array(vals)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc


def _solver_options(path, seed=None) -> SolverOptions:
    d = {} if path is None else _load_json(path)
    if "solver" in d and isinstance(d["solver"], dict):
        d = d["solver"]
    if seed is not None:
        d = dict(d, cv_seed=int(seed))
    return SolverOptions.from_dict(d)


def _parse_taus(text):
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"cannot parse quantile levels {text!r}") from None
    bad = [t for t in taus if not (TAU_MIN < t < TAU_MAX)]
    if not taus or bad:
        raise ConfigurationError(f"quantile levels must lie in ({TAU_MIN}, {TAU_MAX}); got {text!r}")
    return taus


def _write(out, name, text):
    if out is None:
        sys.stdout.write(text)
        return None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    return out / name


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

ANALYZE_COLUMNS = ("tau", "IQTE", "lower", "upper", "z", "reject", "se", "status")


def render_analysis(rows, fmt):
    if fmt == "json":
        return json.dumps({"schema_version": SCHEMA_VERSION, "rows": rows}, indent=2,
                          sort_keys=True) + "\n"
    if fmt == "csv":
        lines = [",".join(ANALYZE_COLUMNS)]
        for r in rows:
            lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                                  for k in ANALYZE_COLUMNS))
        return "\n".join(lines) + "\n"
    cells = [list(ANALYZE_COLUMNS)]
    for r in rows:
        cells.append([
            f"{r['tau']:.2f}",
            *("-" if r[k] is None else f"{r[k]:.4f}" for k in ("IQTE", "lower", "upper", "z")),
            "-" if r["reject"] is None else ("yes" if r["reject"] else "no"),
            "-" if r["se"] is None else f"{r['se']:.4f}",
            r["status"],
        ])
    w = [max(len(row[i]) for row in cells) for i in range(len(ANALYZE_COLUMNS))]
    return "\n".join("  ".join(c.rjust(k) for c, k in zip(row, w)) for row in cells) + "\n"


def _load_groups(args):
    if args.data is not None:
        if args.group_col is None:
            raise ConfigurationError("--data requires --group-col")
        X, y, groups, names = read_table(args.data, args.response_col, args.group_col)
        labels = sorted(set(groups))
        if args.group_values:
            g1v, g2v = args.group_values
        elif len(labels) == 2:
            g1v, g2v = labels
        else:
            raise DataError(f"{args.data}: group column has {len(labels)} distinct values; "
                            "pass --group-values")
        masks = [np.array([g == v for g in groups]) for v in (g1v, g2v)]
        for v, m in zip((g1v, g2v), masks):
            if m.sum() < 2:
                raise DataError(f"{args.data}: group '{v}' has fewer than 2 rows")
        s1 = GroupSample(X[masks[0]], y[masks[0]], 1)
        s2 = GroupSample(X[masks[1]], y[masks[1]], 2)
        return s1, s2, names, {"data": str(args.data), "group_values": [g1v, g2v]}
    if args.group1 is None or args.group2 is None:
        raise ConfigurationError("pass --group1 and --group2, or --data with --group-col")
    X1, y1, _, n1 = read_table(args.group1, args.response_col)
    X2, y2, _, n2 = read_table(args.group2, args.response_col)
    if n1 != n2:
        raise DataError("group files have different covariate columns")
    if len(y1) < 2 or len(y2) < 2:
        raise DataError("each group needs at least 2 observations")
    return (GroupSample(X1, y1, 1), GroupSample(X2, y2, 2), n1,
            {"group1": str(args.group1), "group2": str(args.group2)})


def cmd_analyze(args) -> int:
    taus = _parse_taus(args.taus)
    if not (0.0 < args.alpha <= 0.5):
        raise ConfigurationError(f"--alpha must lie in (0, 0.5], got {args.alpha}")
    opts = _solver_options(args.config, args.seed)
    s1, s2, names, source = _load_groups(args)
    x = read_loading(args.loading)
    if x.size != s1.p:
        raise DimensionError(f"loading has length {x.size} but the data have {s1.p} covariates")
    loading = Loading(x)
    offsets = None
    if args.center:
        s1, s2, mu = center_pooled(s1, s2)
        offsets = dict(zip(names, mu.tolist()))

    rows, details = [], []
    for t in taus:
        try:
            g1 = analyze_group(s1, loading, t, opts)
            g2 = analyze_group(s2, loading, t, opts)
            est = estimate_iqte(g1.functional, g2.functional, args.alpha)
        except (InfeasibleProjectionError, DegenerateVarianceError) as exc:
            rows.append({"tau": t, "IQTE": None, "lower": None, "upper": None, "z": None,
                         "reject": None, "se": None, "status": type(exc).__name__})
            details.append({"tau": t, "error": str(exc)})
            continue
        rows.append({"tau": t, "IQTE": est.delta_hat, "lower": est.ci_lower,
                     "upper": est.ci_upper, "z": est.z_stat, "reject": est.one_sided_reject,
                     "se": est.se, "status": "ok"})
        details.append({"tau": t, "estimate": est.to_json(),
                        "groups": [g1.manifest(), g2.manifest()]})

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": "analyze",
        "inputs": source,
        "response_col": args.response_col,
        "n": [s1.n, s2.n],
        "p": s1.p,
        "taus": taus,
        "alpha": args.alpha,
        "center_covariates": bool(args.center),
        "centering_offsets": offsets,
        "loading_centered": False,
        "solver": opts.to_dict(),
        "results": details,
    }
    _write(args.out, f"analysis.{_ext(args.format)}", render_analysis(rows, args.format))
    if args.out is not None:
        _write(args.out, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True,
                                                     default=_json_default) + "\n")
    if all(r["status"] != "ok" for r in rows):
        return EXIT_SOLVER
    return EXIT_OK


def _ext(fmt):
    return {"text": "txt", "csv": "csv", "json": "json"}[fmt]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


# --------------------------------------------------------------------------
# simulate / diagnose
# --------------------------------------------------------------------------

def load_simulation_config(path, seed=None) -> SimulationConfig:
    d = _load_json(path)
    if seed is not None and isinstance(d, dict):
        d = dict(d, seed=int(seed))
    problems = validate_config_dict(d, require_all=True)
    if isinstance(d, dict) and isinstance(d.get("solver"), dict):
        try:
            SolverOptions.from_dict(d["solver"])
        except ConfigurationError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))
    return SimulationConfig.from_dict(d)


def cmd_simulate(args) -> int:
    cfg = load_simulation_config(args.config, args.seed)
    if args.workers:
        cfg.workers = int(args.workers)
    print(f"config sha256 {cfg.digest()}", file=sys.stderr)
    report = run_monte_carlo(cfg)
    formats = REPORT_FORMATS if args.format == "all" else (args.format,)
    if args.out is None:
        for f in formats:
            sys.stdout.write(emit_report(report, f))
    else:
        for f in formats:
            _write(args.out, f"report.{_ext(f)}", emit_report(report, f))
    return EXIT_OK


def run_diagnostics(cfg: SimulationConfig, rep: int = 0, *, oracle_fit: bool = False) -> dict:
    """Oracle error decomposition for each group and level of one replication."""
    draw = generate_scenario(cfg, rep)
    out = []
    for t in cfg.taus:
        for g, s in ((1, draw.sample1), (2, draw.sample2)):
            truth = (draw.true_beta1 if g == 1 else draw.true_beta2)[t]
            sp = draw.true_sparsity(g, t)
            res = analyze_group(s, draw.x_new, t, cfg.solver)
            fit, eta = res.fit, res.sparsity.eta
            if oracle_fit:
                fit = type(fit)(**{**asdict(fit), "beta": truth.copy()})
                eta = sp
            d = oracle_bias_diagnostics(s, fit, eta, res.projection, draw.x_new, truth, sp,
                                        draw.cond_cdf(g))
            scale = max(abs(d.total_error), abs(d.u_term), 1e-300)
            out.append({
                "tau": t, "group": g, "U": d.u_term,
                "delta": dict(zip(("d1", "d2", "d3", "d4", "d5"), d.bias_terms)),
                "max_abs_delta": max(abs(v) for v in d.bias_terms),
                "total_error": d.total_error,
                "identity_residual": d.identity_residual,
                "relative_identity_residual": abs(d.identity_residual) / scale,
            })
    return {"schema_version": SCHEMA_VERSION, "config_hash": cfg.digest(), "rep": rep,
            "oracle_fit": oracle_fit, "terms": out}


def cmd_diagnose(args) -> int:
    cfg = load_simulation_config(args.config, args.seed)
    doc = run_diagnostics(cfg, args.rep, oracle_fit=args.oracle_fit)
    _write(args.out, "diagnostics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iqte", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate the effect at each quantile level from data")
    a.add_argument("--group1")
    a.add_argument("--group2")
    a.add_argument("--data", help="single CSV holding both groups")
    a.add_argument("--group-col")
    a.add_argument("--group-values", nargs=2, metavar=("G1", "G2"),
                   help="labels of group 1 and group 2 in --group-col")
    a.add_argument("--response-col", default="y")
    a.add_argument("--loading", required=True, help="file with the p loading entries")
    a.add_argument("--taus", default="0.25,0.5,0.75")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--center", action=argparse.BooleanOptionalAction, default=True,
                   help="subtract pooled covariate means (the loading is never centered)")
    a.add_argument("--config", help="JSON file with solver options")
    a.add_argument("--out", help="output directory (default: report to stdout)")
    a.add_argument("--format", choices=REPORT_FORMATS, default="text")
    a.add_argument("--seed", type=int, help="cross-validation fold seed")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--format", choices=REPORT_FORMATS + ("all",), default="all")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="oracle bias decomposition for one replication")
    d.add_argument("--config", required=True)
    d.add_argument("--out")
    d.add_argument("--rep", type=int, default=0)
    d.add_argument("--seed", type=int)
    d.add_argument("--oracle-fit", action="store_true",
                   help="inject the true coefficients and sparsity")
    d.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleProjectionError, DegenerateVarianceError, ExperimentError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IqteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
