import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from longimpute import cli
from longimpute.dataset import write_csv
from longimpute.simgen import DropoutConfig, TrialGeneratorConfig, generate

SCHEMA = Path(__file__).resolve().parents[1] / "docs" / "report.schema.json"


def run(*argv):
    return cli.main([str(a) for a in argv])


def strip_time(doc):
    doc = json.loads(doc) if isinstance(doc, str) else doc
    doc["provenance"].pop("timestamp")
    return doc


@pytest.fixture(scope="module")
def trial_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "trial.csv"
    path.write_text(write_csv(generate(TrialGeneratorConfig(n_per_arm=40, seed=2)).observed))
    return path


@pytest.fixture(scope="module")
def complete_csv(tmp_path_factory):
    cfg = TrialGeneratorConfig(n_per_arm=25, seed=3, dropout=DropoutConfig(mechanism="none"))
    path = tmp_path_factory.mktemp("data") / "complete.csv"
    path.write_text(write_csv(generate(cfg).observed))
    return path


def validate(doc):
    jsonschema = pytest.importorskip("jsonschema")
    jsonschema.validate(doc, json.loads(SCHEMA.read_text()))


class TestDescribe:
    def test_files_written(self, trial_csv, tmp_path):
        assert run("describe", "--input", trial_csv, "--allow-negative", "--out", tmp_path) == 0
        text = (tmp_path / "describe.csv").read_text()
        assert text.startswith("table,arm,pattern,month")

    def test_json_validates(self, trial_csv, tmp_path):
        assert run("describe", "--input", trial_csv, "--allow-negative", "--format", "json",
                   "--out", tmp_path) == 0
        doc = json.loads((tmp_path / "describe.json").read_text())
        validate(doc)
        assert doc["command"] == "describe"

    def test_missing_file(self, tmp_path, capsys):
        missing = tmp_path / "nope.csv"
        assert run("describe", "--input", missing) == 2
        assert str(missing) in capsys.readouterr().err

    def test_parse_error_line(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("subject_id,arm,age,month,sqrt_cd4,art\na,placebo,1,0,x,0\n")
        assert run("describe", "--input", p, "--out", tmp_path) == 2
        assert "line 2" in capsys.readouterr().err

    def test_negative_needs_flag(self, trial_csv, tmp_path, capsys):
        assert run("describe", "--input", trial_csv, "--out", tmp_path) == 2
        assert "negative" in capsys.readouterr().err


class TestDiagnose:
    def test_json(self, trial_csv, tmp_path):
        assert run("diagnose", "--input", trial_csv, "--allow-negative", "--format", "json",
                   "--dropout-start", 2, "--out", tmp_path) == 0
        doc = json.loads((tmp_path / "diagnose.json").read_text())
        validate(doc)
        names = [r["variable"] for r in doc["diagnostics"]["dropout_model"]["odds_ratios"]]
        assert names == ["month", "art", "delta_cd4", "prednisolone"]

    def test_csv_stdout(self, trial_csv, capsys):
        assert run("diagnose", "--input", trial_csv, "--allow-negative", "--out", "-") == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0][0] == "section"
        assert {r[0] for r in rows[1:]} == {"dropout_model", "mcar_test", "pattern_chi2"}


class TestAnalyze:
    def analyze_json(self, path, out, *extra):
        code = run("analyze", "--input", path, "--allow-negative", "--format", "json",
                   "--out", out, "--mi-k", 5, *extra)
        return code, (out / "analyze.json").read_text()

    def test_table_layout(self, trial_csv, capsys):
        assert run("analyze", "--input", trial_csv, "--allow-negative", "--seed", 7,
                   "--mi-k", 5, "--out", "-") == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0][:4] == ["coef", "cc_est", "cc_std", "cc_p"]
        assert len(rows[0]) == 1 + 5 * 3
        assert [r[0] for r in rows[1:]][:3] == ["intercept", "prednisolone", "month"]

    def test_plain_layout(self, trial_csv, capsys):
        assert run("analyze", "--input", trial_csv, "--allow-negative", "--mi-k", 5,
                   "--layout", "plain", "--out", "-") == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["method", "coef", "estimate", "se", "ci_low", "ci_high", "p", "df"]
        assert len(rows) == 1 + 5 * 7

    def test_json_schema_and_methods(self, trial_csv, tmp_path):
        code, text = self.analyze_json(trial_csv, tmp_path, "--seed", 7)
        assert code == 0
        doc = json.loads(text)
        validate(doc)
        assert [m["method"] for m in doc["methods"]] == ["cc", "locf", "bocf", "ml", "mi"]
        assert len(doc["coefficients"]) == 5 * 7

    def test_deterministic_across_runs_and_threads(self, trial_csv, tmp_path):
        docs = []
        for i, threads in enumerate((1, 1, 2, 8)):
            out = tmp_path / str(i)
            _, text = self.analyze_json(trial_csv, out, "--seed", 11, "--threads", threads)
            docs.append(strip_time(text))
        assert all(d == docs[0] for d in docs[1:])

    def test_method_independence(self, trial_csv, tmp_path):
        _, all_text = self.analyze_json(trial_csv, tmp_path / "a", "--seed", 3)
        _, some = self.analyze_json(trial_csv, tmp_path / "b", "--seed", 3,
                                    "--methods", "mi,cc")
        full = {(r["method"], r["coef"]): r for r in json.loads(all_text)["coefficients"]}
        for r in json.loads(some)["coefficients"]:
            assert r == full[(r["method"], r["coef"])]

    def test_seed_env_fallback(self, trial_csv, tmp_path, monkeypatch):
        _, a = self.analyze_json(trial_csv, tmp_path / "a", "--seed", 42, "--methods", "mi")
        monkeypatch.setenv(cli.SEED_ENV, "42")
        _, b = self.analyze_json(trial_csv, tmp_path / "b", "--methods", "mi")
        assert strip_time(a) == strip_time(b)
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        assert run("analyze", "--input", trial_csv, "--allow-negative", "--out", tmp_path) == 2

    def test_complete_data_methods_agree(self, complete_csv, tmp_path):
        _, text = self.analyze_json(complete_csv, tmp_path, "--methods", "cc,locf,bocf,ml")
        coefs = json.loads(text)["coefficients"]
        by = {}
        for r in coefs:
            by.setdefault(r["coef"], []).append(r["estimate"])
        for values in by.values():
            assert np.ptp(values) <= 1e-10

    def test_all_methods_fail(self, tmp_path, capsys):
        # nobody completes, so the complete-case set is empty
        rows = ["subject_id,arm,age,month,sqrt_cd4,art"]
        for i in range(6):
            arm = "placebo" if i % 2 else "prednisolone"
            rows += [f"s{i},{arm},30,0,{10 + i},0", f"s{i},{arm},30,0.5,{11 + i},0"]
        p = tmp_path / "short.csv"
        p.write_text("\n".join(rows) + "\n")
        assert run("analyze", "--input", p, "--methods", "cc", "--out", tmp_path) == 3
        assert "EmptyAnalysisSetError" in capsys.readouterr().err

    def test_bad_arguments(self, trial_csv, tmp_path):
        with pytest.raises(SystemExit) as err:
            run("analyze", "--input", trial_csv, "--methods", "cc,xx")
        assert err.value.code == 2
        assert run("analyze", "--input", trial_csv, "--allow-negative", "--mi-k", 1,
                   "--out", tmp_path) == 2


class TestSimulateAndStudy:
    def test_simulate(self, tmp_path):
        assert run("simulate", "--seed", 1, "--out", tmp_path) == 0
        assert {p.name for p in tmp_path.iterdir()} == {"full.csv", "observed.csv", "config.json"}
        first = (tmp_path / "observed.csv").read_bytes()
        assert run("simulate", "--seed", 1, "--out", tmp_path) == 0
        assert (tmp_path / "observed.csv").read_bytes() == first

    def test_simulate_config(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('n_per_arm = 5\n[dropout]\nmechanism = "none"\n')
        assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 0
        assert "NA" not in (tmp_path / "o" / "observed.csv").read_text()

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dropout": {"mechanism": "sometimes"}}))
        assert run("simulate", "--config", cfg, "--out", tmp_path) == 2
        assert "dropout.mechanism" in capsys.readouterr().err

    def test_study_rejects_zero_reps(self, tmp_path):
        assert run("study", "--reps", 0, "--out", tmp_path) == 2

    def test_study_summary(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("n_per_arm = 30\n")
        args = ("study", "--config", cfg, "--reps", 3, "--methods", "cc,ml,mi", "--mi-k", 3,
                "--seed", 1)
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--threads", 2, "--out", tmp_path / "b") == 0
        a = (tmp_path / "a" / "summary.csv").read_bytes()
        assert a == (tmp_path / "b" / "summary.csv").read_bytes()
        rows = list(csv.reader(io.StringIO(a.decode())))
        assert len(rows) == 1 + 3 * 7
        doc = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert doc["n_reps"] == 3 and doc["failures"] == {"cc": 0, "ml": 0, "mi": 0}
