"""Tests for utivad.report — tables and JSON reports."""

import json

import numpy as np

from utivad.metrics import PUBLISHED_CONFUSION, ConfusionMatrix
from utivad.report import (PUBLISHED_LABEL, UNDEFINED, build_report, classification_report, dumps, fmt,
                           paper_report, render_ablation, render_classification, render_resynthesis,
                           render_text, write_csv, write_report)


class TestFormatting:

    def test_fmt(self):
        assert fmt(None) == UNDEFINED
        assert fmt(0.852789) == "0.8528"
        assert fmt(np.int64(3)) == "3"
        assert fmt(np.float32(0.5), digits=2) == "0.50"
        assert fmt("bilstm") == "bilstm"


class TestRunReport:

    def test_empty(self):
        report = build_report([], "r1")
        assert report["metrics"] == {}
        assert "(no runs)" in render_text(report)

    def test_one_row_per_metric(self):
        report = build_report([{"name": "dev", "metrics": {"accuracy": 0.9, "kappa": None}}], "r2")
        lines = render_text(report).splitlines()
        body = lines[4:]
        assert len(body) == 2
        assert body[0].startswith("accuracy")
        assert body[1].endswith(UNDEFINED)

    def test_numpy_values_serialize(self):
        report = build_report([{"name": "a", "metrics": {"mcd": np.float64(3.2), "n": np.int32(4)}}])
        assert json.loads(dumps(report))["metrics"]["a"] == {"mcd": 3.2, "n": 4}

    def test_write_report_is_deterministic(self, tmp_path):
        report = build_report([{"name": "dev", "metrics": {"f1": 0.91}}], "r3", {"seed": 0})
        json_a, text_a = write_report(str(tmp_path / "a"), "eval", report)
        json_b, _ = write_report(str(tmp_path / "b"), "eval", report)
        assert open(json_a, "rb").read() == open(json_b, "rb").read()
        assert "0.9100" in open(text_a, encoding="utf-8").read()

    def test_write_csv(self, tmp_path):
        path = str(tmp_path / "t.csv")
        write_csv(path, ["keep_ms", "mcd"], [[0, 1.5], [180, 2.25]])
        assert open(path, encoding="utf-8").read() == "keep_ms,mcd\n0,1.5\n180,2.25\n"


class TestClassificationTables:

    def test_published_columns_are_labelled(self):
        report = classification_report({"test": PUBLISHED_CONFUSION["test"]}, aucs={"test": 0.86})
        text = render_classification(report)
        assert f"test {PUBLISHED_LABEL}" in text
        assert "0.8528" in text
        assert "Confusion matrix (test)" in text
        assert "8096" in text

    def test_without_paper_refs(self):
        report = classification_report({"dev": ConfusionMatrix(5, 0, 0, 0)}, published=False)
        assert report["paper_refs"] == {}
        text = render_classification(report)
        assert PUBLISHED_LABEL not in text
        assert UNDEFINED in text


class TestExperimentTables:

    def test_ablation_rows(self):
        row = {"net": "ssi_conv3d",
               "removed": {"mse_dev": 0.5, "mse_test": 0.6, "mcd": 4.0},
               "keep180": {"mse_dev": 0.4, "mse_test": 0.5, "mcd": 4.1}}
        text = render_ablation([row])
        assert "measured" in text
        assert PUBLISHED_LABEL in text
        assert "0.4600" in text

    def test_resynthesis_missing_values(self):
        text = render_resynthesis({"configs": {"A": {"mcd_all": 1.2, "mcd_speech": None}}}, published=False)
        assert "1.2000" in text
        assert UNDEFINED in text
        assert PUBLISHED_LABEL not in text

    def test_paper_report(self):
        report, text = paper_report()
        assert PUBLISHED_LABEL in text
        assert "0.8528" in text
        assert set(report["metrics"]) == {"fixture_dev", "fixture_test"}
        assert "measured" not in report
        assert report["run_id"] == "paper-report"
        assert set(report["paper_refs"]) == {"classification", "ssi", "resynthesis_mcd"}
