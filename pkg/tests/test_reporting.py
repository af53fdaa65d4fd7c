"""Reporting tests: CSV round trip and SVG determinism."""

import numpy as np
import pytest

from serkit.errors import DataError
from serkit.evaluation import EvalReport
from serkit.reporting import read_report_csv, svg_bar_chart, write_report_csv


@pytest.fixture
def report():
    return EvalReport(
        uar_7=0.61, uar_4=0.72, weighted_accuracy=0.66,
        per_class_recall=(0.5, 0.6, 0.7, 0.8, 0.4, 0.3, 0.9),
        ccc_arousal=0.41, ccc_valence=0.52, ccc_dominance=0.63, n_scored=140,
    )


class TestReportCSV:
    def test_round_trip(self, tmp_path, report):
        path = str(tmp_path / "r.csv")
        write_report_csv(path, report)
        metrics = read_report_csv(path)
        assert metrics["uar_7"] == 0.61
        assert metrics["n_scored"] == 140.0
        assert metrics["recall_disgusted"] == 0.9
        assert len(metrics) == len(report.rows())

    def test_byte_reproducible(self, tmp_path, report):
        p1, p2 = str(tmp_path / "1.csv"), str(tmp_path / "2.csv")
        write_report_csv(p1, report)
        write_report_csv(p2, report)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_nan_recall_survives_round_trip(self, tmp_path, report):
        report.per_class_recall = (0.5, float("nan"), 0.7, 0.8, 0.4, 0.3, 0.9)
        path = str(tmp_path / "nan.csv")
        write_report_csv(path, report)
        assert np.isnan(read_report_csv(path)["recall_happy"])

    def test_header_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("wrong,header\nuar_7,0.5\n")
        with pytest.raises(DataError, match="header"):
            read_report_csv(str(path))


class TestSvgChart:
    def test_deterministic_output(self):
        groups = [("run_a", {"uar_7": 0.55, "uar_4": 0.71})]
        assert svg_bar_chart(groups) == svg_bar_chart(groups)

    def test_multiple_groups(self):
        groups = [("a", {"uar_7": 0.5, "uar_4": 0.6}),
                  ("b", {"uar_7": 0.7, "uar_4": 0.8})]
        svg = svg_bar_chart(groups)
        assert svg.count("<rect") == 4 + 2  # 4 bars + 2 legend swatches
        assert ">a<" in svg and ">b<" in svg

    def test_missing_metric_skipped(self):
        svg = svg_bar_chart([("only7", {"uar_7": 0.5})])
        assert svg.count('fill="#4878a8"') == 2  # bar + legend swatch, no uar_4 bar

    def test_empty_groups_rejected(self):
        with pytest.raises(DataError):
            svg_bar_chart([])
