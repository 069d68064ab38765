import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from iqte.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    center_pooled,
    ingest_csv,
    main,
    read_loading,
)
from iqte.core import DataError
from iqte.simharness import SimulationConfig, generate_scenario

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "two_groups.csv"
LOADING = DATA / "loading.txt"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_sample(path, s):
    return _write_csv(path, ["y"] + [f"x{j}" for j in range(s.p)],
                      [[repr(float(s.y[i]))] + [repr(float(v)) for v in s.X[i]] for i in range(s.n)])


class TestIngest:
    def test_small_clean_file(self, tmp_path):
        f = _write_csv(tmp_path / "g.csv", ["y", "a", "b"], [[1, 2, 3], [4, 5, 6], [7, 8, 9.5]])
        s = ingest_csv(f)
        assert (s.n, s.p) == (3, 2)
        np.testing.assert_array_equal(s.y, [1, 4, 7])
        np.testing.assert_array_equal(s.X[2], [8, 9.5])

    def test_na_cell_names_row_and_column(self, tmp_path):
        f = _write_csv(tmp_path / "g.csv", ["y", "a", "b"], [[1, 2, 3], [4, "NA", 6]])
        with pytest.raises(DataError, match=r"row 3, column 'a'"):
            ingest_csv(f)

    @pytest.mark.parametrize("bad", ["inf", "nan", "1,5"])
    def test_nonfinite_or_garbled(self, tmp_path, bad):
        f = tmp_path / "g.csv"
        f.write_text(f"y,a\n1,2\n3,{bad}\n")
        with pytest.raises(DataError):
            ingest_csv(f)

    def test_too_few_rows(self, tmp_path):
        f = _write_csv(tmp_path / "g.csv", ["y", "a"], [[1, 2]])
        with pytest.raises(DataError):
            ingest_csv(f)

    def test_missing_response_column(self, tmp_path):
        f = _write_csv(tmp_path / "g.csv", ["z", "a"], [[1, 2], [3, 4]])
        with pytest.raises(DataError, match="response column"):
            ingest_csv(f)

    def test_group_column_mode(self):
        s = ingest_csv(FIXTURE, "hdl", group_col="exposure", group_value="low")
        assert (s.n, s.p) == (60, 12)

    def test_pooled_centering(self):
        a = ingest_csv(FIXTURE, "hdl", group_col="exposure", group_value="low")
        b = ingest_csv(FIXTURE, "hdl", group_col="exposure", group_value="high", group_id=2)
        ca, cb, mu = center_pooled(a, b)
        pooled = np.vstack([ca.X, cb.X]).mean(axis=0)
        assert np.abs(pooled).max() <= 1e-12
        np.testing.assert_allclose(ca.X + mu, a.X, atol=1e-12)

    def test_loading_reader(self, tmp_path):
        f = tmp_path / "x.txt"
        f.write_text("1, 2\n3.5\n")
        np.testing.assert_array_equal(read_loading(f), [1, 2, 3.5])
        f.write_text("1 two\n")
        with pytest.raises(DataError):
            read_loading(f)


def _analyze(tmp_path, *extra, loading=LOADING):
    out = tmp_path / "out"
    code = main(["analyze", "--data", str(FIXTURE), "--group-col", "exposure",
                 "--group-values", "low", "high", "--response-col", "hdl",
                 "--loading", str(loading), "--out", str(out), *extra])
    return code, out


class TestAnalyze:
    def test_fixture_end_to_end(self, tmp_path):
        code, out = _analyze(tmp_path, "--format", "json", "--taus", "0.5")
        assert code == EXIT_OK
        doc = json.loads((out / "analysis.json").read_text())
        (row,) = doc["rows"]
        assert row["status"] == "ok"
        # 95% interval width is 2 z_{0.025} se
        assert row["upper"] - row["lower"] == pytest.approx(2 * 1.959963984540054 * row["se"], abs=1e-9)
        man = json.loads((out / "manifest.json").read_text())
        assert man["schema_version"] == 1 and man["center_covariates"] is True
        assert man["loading_centered"] is False
        assert set(man["centering_offsets"]) == {f"c{j}" for j in range(1, 13)}
        g = man["results"][0]["groups"][0]
        assert {"qr_lambda", "bandwidth", "projection_multiplier"} <= set(g)

    def test_wrong_length_loading(self, tmp_path, capsys):
        short = tmp_path / "short.txt"
        short.write_text("1 2 3\n")
        code, out = _analyze(tmp_path, loading=short)
        assert code == EXIT_DATA
        assert "length 3" in capsys.readouterr().err
        assert not (out / "manifest.json").exists()

    def test_missing_file_is_data_error(self, tmp_path):
        code = main(["analyze", "--group1", str(tmp_path / "nope.csv"), "--group2", str(FIXTURE),
                     "--loading", str(LOADING)])
        assert code == EXIT_DATA

    def test_bad_taus_and_alpha(self, tmp_path):
        assert _analyze(tmp_path, "--taus", "0.5,1.2")[0] == EXIT_CONFIG
        assert _analyze(tmp_path, "--alpha", "0.7")[0] == EXIT_CONFIG

    def test_deterministic(self, tmp_path):
        _, a = _analyze(tmp_path / "a", "--format", "csv", "--taus", "0.5")
        _, b = _analyze(tmp_path / "b", "--format", "csv", "--taus", "0.5")
        assert (a / "analysis.csv").read_bytes() == (b / "analysis.csv").read_bytes()

    def test_recovers_simulated_truth(self, tmp_path):
        cfg = SimulationConfig(n1=300, n2=300, p=12, setting="dense", taus=(0.5,), n_reps=1, seed=21)
        d = generate_scenario(cfg, 0)
        g1 = _write_sample(tmp_path / "g1.csv", d.sample1)
        g2 = _write_sample(tmp_path / "g2.csv", d.sample2)
        lf = tmp_path / "x.txt"
        lf.write_text(" ".join(repr(float(v)) for v in d.x_new.x_new))
        out = tmp_path / "o"
        # the design has no intercept, so centering would misspecify the model
        code = main(["analyze", "--group1", str(g1), "--group2", str(g2), "--loading", str(lf),
                     "--taus", "0.5", "--no-center", "--format", "json", "--out", str(out)])
        assert code == EXIT_OK
        row = json.loads((out / "analysis.json").read_text())["rows"][0]
        assert abs(row["IQTE"] - d.delta_true[0.5]) <= 3 * row["se"]


def _sim_config(tmp_path, **over):
    d = {"n1": 30, "n2": 30, "p": 12, "setting": "dense", "taus": [0.5], "n_reps": 2,
         "alpha": 0.05, "seed": 5, "methods": ["IQTE", "Lasso"]}
    d.update(over)
    for k in [k for k, v in d.items() if v is None]:
        del d[k]
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps(d))
    return f


class TestSimulate:
    def test_identical_bytes(self, tmp_path, capsys):
        cfg = _sim_config(tmp_path)
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
        for name in ("report.txt", "report.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "config sha256" in capsys.readouterr().err

    def test_zero_reps_rejected(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(_sim_config(tmp_path, n_reps=0))]) == EXIT_CONFIG
        assert "n_reps" in capsys.readouterr().err

    def test_missing_setting_named(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(_sim_config(tmp_path, setting=None))]) == EXIT_CONFIG
        assert "'setting'" in capsys.readouterr().err

    def test_all_errors_listed(self, tmp_path, capsys):
        cfg = _sim_config(tmp_path, n_reps=0, p=5, bogus=1)
        assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "n_reps" in err and "'p'" in err and "bogus" in err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_CONFIG


class TestDiagnose:
    def _run(self, tmp_path, *extra):
        cfg = _sim_config(tmp_path, n1=100, n2=100, p=30)
        out = tmp_path / "d"
        assert main(["diagnose", "--config", str(cfg), "--out", str(out), *extra]) == EXIT_OK
        return json.loads((out / "diagnostics.json").read_text())

    def test_oracle_fit_collapses(self, tmp_path):
        doc = self._run(tmp_path, "--oracle-fit")
        for term in doc["terms"]:
            assert term["max_abs_delta"] <= 1e-12 * (1 + abs(term["U"]))
            assert abs(term["identity_residual"]) < 1e-12

    def test_default_identity(self, tmp_path):
        doc = self._run(tmp_path)
        assert len(doc["terms"]) == 2
        assert all(t["relative_identity_residual"] < 1e-10 for t in doc["terms"])
        assert all(math.isfinite(t["U"]) for t in doc["terms"])
