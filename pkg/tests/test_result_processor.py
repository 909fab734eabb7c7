"""Tests for CSV and table output."""

from rich.table import Table

from result_processor import LEVEL_COLUMNS, METRIC_COLUMNS, ResultProcessor
from tools.evaluation import MetricReport, SourceMetrics
from tools.noise_model import NoiseLevels


def test_csv_round_trip(tmp_path):
    levels = [NoiseLevels.compose(1.0, 2.0, 2.0), NoiseLevels.compose(0.5, 0.0, 0.0, xi=0.25)]
    rows = ResultProcessor.levels_rows(levels, labels=[10.0, 20.0])
    header = ["intensity", *LEVEL_COLUMNS]
    path = ResultProcessor.write_csv(tmp_path / "out" / "levels.csv", header, rows, "abc123")
    assert path.read_text(encoding="utf-8").splitlines()[:2] == ["# config_hash=abc123", ",".join(header)]
    config_hash, parsed = ResultProcessor.read_csv(path)
    assert config_hash == "abc123"
    assert float(parsed[0]["sigma_total"]) == 3.0
    assert float(parsed[1]["xi"]) == 0.25


def test_metric_rows_and_table():
    metrics = SourceMetrics(bias=0.6, std=0.8, rms=1.0, rmse=1.2)
    report = MetricReport(count=4, sources={"pn": metrics, "total": metrics})
    rows = ResultProcessor.metrics_rows(report)
    assert rows[0] == ["pn", 0.6, 0.8, 1.0, 1.2, 4]
    table = ResultProcessor.to_table("Metrics", METRIC_COLUMNS, rows)
    assert isinstance(table, Table)
    assert table.row_count == 2


def test_loss_rows_are_one_based():
    assert ResultProcessor.loss_rows([3.0, 2.0]) == [[1, 3.0], [2, 2.0]]
