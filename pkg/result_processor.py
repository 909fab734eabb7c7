"""
Result processor for noise source estimator outputs.

Turns levels, metric reports, sensitivity pairs, benchmark results and
session fits into CSV rows (stable column schemas) and rich tables.

Every CSV starts with a `# config_hash=<sha256>` comment line followed by
the header row.
"""

import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from rich.table import Table

from tools.evaluation import BenchResult, MetricReport, SensitivityPair
from tools.noise_model import NoiseLevels
from tools.realnoise import ProcessedSession

# Setup logging
logger = logging.getLogger("nse-results")

LEVEL_COLUMNS = ["sigma_pn", "sigma_dcsn", "sigma_rn", "xi", "sigma_total"]
METRIC_COLUMNS = ["source", "bias", "std", "rms", "rmse", "count"]
SENSITIVITY_COLUMNS = ["param", "param_value", "physical_sigma_total", "model_sigma_total", "deviation", "classification"]
BENCH_COLUMNS = ["mean_ms", "std_ms", "threads", "n_patches", "repetitions", "warmup"]
FIT_COLUMNS = ["pair", "exposure", "rn_mu", "rn_sigma", "dcsn_mu", "dcsn_sigma"]
LOSS_COLUMNS = ["epoch", "loss"]

Rows = List[List[Any]]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ResultProcessor:
    """Format results as CSV rows and rich tables."""

    @staticmethod
    def levels_rows(levels: Sequence[NoiseLevels], labels: Optional[Sequence[Any]] = None) -> Rows:
        rows = []
        for i, level in enumerate(levels):
            label = labels[i] if labels is not None else i
            rows.append([label, *level.as_tuple()])
        return rows

    @staticmethod
    def metrics_rows(report: MetricReport) -> Rows:
        return [
            [source, m.bias, m.std, m.rms, m.rmse, report.count]
            for source, m in report.sources.items()
        ]

    @staticmethod
    def sensitivity_rows(pairs: Iterable[SensitivityPair]) -> Rows:
        return [
            [p.param, p.param_value, p.physical, p.model, p.deviation, p.classification]
            for p in pairs
        ]

    @staticmethod
    def bench_rows(result: BenchResult) -> Rows:
        return [[result.mean_ms, result.std_ms, result.threads, result.n_patches, result.repetitions, result.warmup]]

    @staticmethod
    def fit_rows(processed: ProcessedSession, exposures: Sequence[float]) -> Rows:
        return [
            [i, exposures[i] if i < len(exposures) else None, rn.mu, rn.sigma, dcsn.mu, dcsn.sigma]
            for i, (rn, dcsn) in enumerate(zip(processed.rn_fits, processed.dcsn_fits))
        ]

    @staticmethod
    def loss_rows(losses: Sequence[float]) -> Rows:
        return [[epoch + 1, loss] for epoch, loss in enumerate(losses)]

    @staticmethod
    def to_csv(header: Sequence[str], rows: Rows, config_hash: str) -> str:
        """CSV text with the config-hash comment and a header row."""
        buffer = io.StringIO()
        buffer.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return buffer.getvalue()

    @staticmethod
    def write_csv(path: Union[str, Path], header: Sequence[str], rows: Rows, config_hash: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ResultProcessor.to_csv(header, rows, config_hash), encoding="utf-8")
        logger.info(f"Wrote {len(rows)} rows to {path}")
        return path

    @staticmethod
    def read_csv(path: Union[str, Path]) -> Tuple[str, List[Dict[str, str]]]:
        """(config hash, rows as dicts) of a CSV written by write_csv."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        config_hash = ""
        if lines and lines[0].startswith("# config_hash="):
            config_hash = lines[0].split("=", 1)[1]
            lines = lines[1:]
        return config_hash, list(csv.DictReader(lines))

    @staticmethod
    def to_table(title: str, header: Sequence[str], rows: Rows, precision: int = 4) -> Table:
        """Rich table with floats rounded for display."""
        table = Table(title=title)
        for column in header:
            table.add_column(column, justify="left" if column in ("source", "param", "classification") else "right")
        for row in rows:
            table.add_row(*[f"{v:.{precision}g}" if isinstance(v, float) else _cell(v) for v in row])
        return table
