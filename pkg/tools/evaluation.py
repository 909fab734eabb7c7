"""
Evaluation: accuracy metrics, a model-free baseline, unexpected-noise
scenarios, model vs. physics sensitivity comparison and runtime benchmark.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage

from tools.dataset import TrainingRecord
from tools.errors import DomainError
from tools.estimator import Estimate, Estimator, estimate_batch
from tools.noise_model import (
    SWEEPABLE,
    VARIABLE_RANGES,
    CameraMetadata,
    NoiseLevels,
    Patch,
    predict_sigmas,
    sensitivity_sweep,
)
from tools.utils import make_rng

logger = logging.getLogger("nse-evaluation")

SOURCE_FIELDS: Dict[str, str] = {
    "pn": "sigma_pn",
    "dcsn": "sigma_dcsn",
    "rn": "sigma_rn",
    "xi": "xi",
    "total": "sigma_total",
}
DEFAULT_SOURCES = ("pn", "dcsn", "rn", "total")
SCENARIO_PARAMS = ("thermal_white_noise", "sensor_temperature")

# Box-filter residual keeps sqrt(8/9) of white noise.
_RESIDUAL_GAIN = math.sqrt(8.0 / 9.0)
_MAD_TO_STD = 1.4826


class SourceMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    bias: float
    std: float
    rms: float
    rmse: float

    @model_validator(mode="after")
    def check_identity(self):
        expected = math.sqrt(self.bias ** 2 + self.std ** 2)
        if abs(self.rms - expected) > 1e-9 * max(1.0, expected):
            raise ValueError("rms must equal sqrt(bias^2 + std^2)")
        return self


class MetricReport(BaseModel):
    """Bias, Std and RMS per source plus the per-sample RMSE."""

    count: int
    sources: Dict[str, SourceMetrics]


@dataclass(frozen=True)
class TotalOnly:
    """Adapter for estimates that carry only sigma_total."""

    sigma_total: float


# -- metrics -----------------------------------------------------------------

def _source_metrics(estimated: np.ndarray, true: np.ndarray) -> SourceMetrics:
    bias = abs(float(np.mean(true)) - float(np.mean(estimated)))
    std = float(np.std(estimated))
    rmse = float(np.sqrt(np.mean((estimated - true) ** 2)))
    return SourceMetrics(bias=bias, std=std, rms=math.sqrt(bias ** 2 + std ** 2), rmse=rmse)


def compute_metrics(estimates: Sequence, truths: Sequence, sources: Sequence[str] = DEFAULT_SOURCES) -> MetricReport:
    """
    Bias = |E[sigma] - E[sigma_hat]|, Std = sqrt(E[(sigma_hat - E[sigma_hat])^2]),
    RMS = sqrt(Bias^2 + Std^2), per source.
    """
    if len(estimates) != len(truths):
        raise DomainError(f"{len(estimates)} estimates but {len(truths)} truths")
    if len(estimates) < 2:
        raise DomainError("metrics need at least two samples")
    report = {}
    for source in sources:
        if source not in SOURCE_FIELDS:
            raise DomainError(f"unknown source {source!r}")
        attr = SOURCE_FIELDS[source]
        estimated = np.array([getattr(e, attr) for e in estimates], dtype=np.float64)
        true = np.array([getattr(t, attr) for t in truths], dtype=np.float64)
        report[source] = _source_metrics(estimated, true)
    return MetricReport(count=len(estimates), sources=report)


def estimate_levels(estimates: Sequence[Estimate]) -> List:
    """Metric inputs of estimator outputs (NoiseLevels, or TotalOnly for DrneCust)."""
    return [e.levels if e.levels is not None else TotalOnly(e.sigma_total) for e in estimates]


def evaluate_records(
    model: Estimator,
    records: Sequence[TrainingRecord],
    clamp_metadata: bool = False,
    batch_size: int = 64,
):
    """Run the estimator over records; returns (estimates, MetricReport)."""
    metas = [r.meta_fed for r in records] if model.kind.uses_metadata else None
    estimates = estimate_batch(model, [r.noisy for r in records], metas, batch_size, clamp_metadata)
    sources = DEFAULT_SOURCES if model.kind.branched else ("total",)
    report = compute_metrics(estimate_levels(estimates), [r.truth for r in records], sources)
    return estimates, report


def xi_detection_summary(estimates: Sequence[Estimate], records: Sequence[TrainingRecord]) -> Dict[str, float]:
    """Median |xi_hat| over matched and over mismatched records."""
    if len(estimates) != len(records):
        raise DomainError(f"{len(estimates)} estimates but {len(records)} records")
    matched = [abs(e.levels.xi) for e, r in zip(estimates, records) if e.levels is not None and not r.mismatched]
    mismatched = [abs(e.levels.xi) for e, r in zip(estimates, records) if e.levels is not None and r.mismatched]
    return {
        "matched_count": float(len(matched)),
        "mismatched_count": float(len(mismatched)),
        "matched_median_abs_xi": float(np.median(matched)) if matched else float("nan"),
        "mismatched_median_abs_xi": float(np.median(mismatched)) if mismatched else float("nan"),
    }


# -- baseline ----------------------------------------------------------------

def baseline_block_estimate(patch: Patch, block: int = 8) -> float:
    """
    Model-free sigma_total from the flattest blocks of a patch.

    The high-frequency residual (patch minus its 3x3 box filter) is pooled
    over the quarter of 8x8 blocks with the least low-pass variance; the
    result is the MAD-based std, rescaled for the box filter.
    """
    data = patch.intensities.astype(np.float64)
    height, width = data.shape
    if height < 16 or width < 16:
        raise DomainError(f"baseline needs at least 16x16 pixels, got {width}x{height}")

    smooth = ndimage.uniform_filter(data, size=3, mode="reflect")
    residual = data - smooth
    rows, cols = height // block, width // block

    def blocks(a: np.ndarray) -> np.ndarray:
        return a[: rows * block, : cols * block].reshape(rows, block, cols, block).swapaxes(1, 2).reshape(-1, block * block)

    texture = blocks(smooth).var(axis=1)
    keep = np.argsort(texture, kind="stable")[: max(1, len(texture) // 4)]
    values = blocks(residual)[keep].ravel()
    mad = float(np.median(np.abs(values - np.median(values))))
    return _MAD_TO_STD * mad / _RESIDUAL_GAIN


# -- scenarios ---------------------------------------------------------------

def added_noise_xi(sigma_model: float, sigma_n: float) -> float:
    """xi of an image with extra N(0, sigma_n^2) noise the metadata do not know about."""
    return sigma_model - math.sqrt(sigma_model ** 2 + sigma_n ** 2)


def scenario_add_gaussian(records: Sequence[TrainingRecord], sigma_n: float = 5.0, seed: int = 0) -> List[TrainingRecord]:
    """Add unexplained Gaussian noise to every noisy patch and update xi."""
    out = []
    for index, record in enumerate(records):
        if record.truth.xi != 0.0:
            raise DomainError(f"record {index} already has xi={record.truth.xi!r}")
        rng = make_rng(seed, index)
        noisy = record.noisy.intensities.astype(np.float64)
        noisy = np.clip(np.rint(noisy + rng.normal(0.0, sigma_n, size=noisy.shape)), 0.0, 255.0)
        xi = added_noise_xi(record.truth.model_sigma, sigma_n)
        out.append(replace(record, noisy=Patch(noisy.astype(np.float32)), truth=record.truth.with_xi(xi)))
    logger.info(f"Added N(0, {sigma_n}^2) noise to {len(out)} records")
    return out


def scenario_double_param(records: Sequence[TrainingRecord], param: str) -> List[TrainingRecord]:
    """
    Feed the estimator metadata with one parameter doubled.

    Images are unchanged; xi = sigma_total(doubled fed metadata) -
    sigma_total(used metadata). Doubled values may leave the declared range.
    """
    if param not in VARIABLE_RANGES:
        raise DomainError(f"cannot double {param!r}; expected a numeric metadata field")
    out = []
    for record in records:
        fed = record.meta_fed.with_values_unchecked(**{param: 2.0 * getattr(record.meta_fed, param)})
        mean = record.clean.mean()
        xi = predict_sigmas(fed, mean).sigma_total - predict_sigmas(record.meta_used, mean).sigma_total
        out.append(replace(record, meta_fed=fed, truth=record.truth.with_xi(xi)))
    logger.info(f"Doubled {param} in the fed metadata of {len(out)} records")
    return out


# -- sensitivity -------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityPair:
    param: str
    param_value: float
    physical: float
    model: Optional[float] = None

    @property
    def deviation(self) -> Optional[float]:
        return None if self.model is None else abs(self.model - self.physical)

    @property
    def classification(self) -> str:
        deviation = self.deviation
        if deviation is None:
            return ""
        if deviation < 1.0:
            return "ok"
        return "minor" if deviation <= 2.0 else "significant"


def compare_sensitivity(
    model: Optional[Estimator] = None,
    fixed: Optional[CameraMetadata] = None,
    params: Sequence[str] = SWEEPABLE,
    n_samples: int = 10,
    mean_intensity: float = 128.0,
) -> List[SensitivityPair]:
    """
    Physical sensitivity sweep, paired with the estimator run on uncorrupted
    uniform patches (xi excluded from the estimator total).
    """
    fixed = fixed or CameraMetadata.maxima()
    pairs = []
    for param in params:
        rows = sensitivity_sweep(param, n_samples, fixed, mean_intensity)
        model_values: List[Optional[float]] = [None] * len(rows)
        if model is not None:
            size = model.variant.patch_size
            patches, metas = [], []
            for row in rows:
                intensity = row.param_value if param == "mean_intensity" else mean_intensity
                patches.append(Patch.constant(intensity, size, size))
                metas.append(fixed if param == "mean_intensity" else fixed.with_values(**{param: row.param_value}))
            estimates = estimate_batch(model, patches, metas if model.kind.uses_metadata else None)
            model_values = [e.levels.model_sigma if e.levels is not None else e.sigma_total for e in estimates]
        pairs.extend(
            SensitivityPair(param, row.param_value, row.sigma_total, value) for row, value in zip(rows, model_values)
        )
    return pairs


# -- runtime -----------------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    mean_ms: float
    std_ms: float
    threads: int
    n_patches: int
    repetitions: int
    warmup: int


def runtime_bench(
    model: Estimator,
    n_patches: int = 1000,
    repetitions: int = 5,
    warmup: int = 50,
    threads: int = 1,
    seed: int = 0,
) -> BenchResult:
    """Wall-clock milliseconds per patch, single-patch inference."""
    size = model.variant.patch_size
    rng = make_rng(seed)
    patch = Patch(np.clip(rng.normal(128.0, 5.0, size=(size, size)), 0.0, 255.0).astype(np.float32))
    meta = CameraMetadata.maxima() if model.kind.uses_metadata else None

    def run(count: int) -> None:
        for _ in range(count):
            estimate_batch(model, [patch], [meta] if meta is not None else None, 1)

    run(warmup)
    shares = [n_patches // threads + (1 if i < n_patches % threads else 0) for i in range(threads)]
    timings = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for _ in range(repetitions):
            start = time.perf_counter()
            list(pool.map(run, shares))
            timings.append(1000.0 * (time.perf_counter() - start) / max(n_patches, 1))
    result = BenchResult(
        mean_ms=float(np.mean(timings)),
        std_ms=float(np.std(timings)),
        threads=threads,
        n_patches=n_patches,
        repetitions=repetitions,
        warmup=warmup,
    )
    logger.info(f"Benchmark: {result.mean_ms:.3f} +- {result.std_ms:.3f} ms/patch ({threads} threads)")
    return result
