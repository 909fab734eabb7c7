"""
Post-processing of recorded dark and bias frames into noise samples.

For every (RN, DCSN) frame pair of a session the truncated noise histogram
is repaired by mirroring its upper half around the mode, a Gaussian is
fitted, the DCSN fit is rectified against the RN fit and both are
resampled. Fixed-pattern noise is then removed from each resampled list
with the mean of its first `s_fpn` images.

Session directory layout
    session.txt        key=value: bit_depth, rn_exposure, exposures
                       (comma list, one per pair) and camera metadata
    rn_0000.pgm ...    bias frames (minimum exposure), 8 or 16-bit PGM
    dcsn_0000.pgm ...  dark frames at the listed exposures
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import curve_fit

from tools.errors import (
    DegenerateDistributionError,
    DomainError,
    NegativeVarianceError,
    ShapeError,
)
from tools.image_io import read_grayscale, write_grayscale
from tools.noise_model import VARIABLE_RANGES, CameraMetadata, SensorType
from tools.utils import derive_seed, format_value, make_rng, read_key_value_file, write_key_value_file

logger = logging.getLogger("nse-realnoise")

SESSION_MANIFEST = "session.txt"
PROCESSED_MANIFEST = "processed.txt"
MIN_EXPOSURE = VARIABLE_RANGES["exposure_time"][0]


class FittedGaussian(BaseModel):
    """Gaussian parameters of a noise frame, in DN."""

    model_config = ConfigDict(frozen=True)

    mu: float
    sigma: float = Field(ge=0.0)


@dataclass
class NoiseSession:
    """Frame pairs recorded at one camera gain."""

    rn_images: List[np.ndarray]
    dcsn_images: List[np.ndarray]
    exposures: List[float]
    meta: CameraMetadata
    bit_depth: int = 8
    rn_exposure: float = MIN_EXPOSURE

    def __post_init__(self):
        if not (len(self.rn_images) == len(self.dcsn_images) == len(self.exposures)):
            raise DomainError(
                f"session needs one exposure per pair: {len(self.rn_images)} RN, "
                f"{len(self.dcsn_images)} DCSN, {len(self.exposures)} exposures"
            )
        if not math.isclose(self.rn_exposure, MIN_EXPOSURE):
            raise DomainError(f"RN frames must use the minimum exposure {MIN_EXPOSURE} s, got {self.rn_exposure}")
        if self.bit_depth < 8 or self.bit_depth > 16:
            raise DomainError(f"unsupported bit depth {self.bit_depth}")

    def __len__(self) -> int:
        return len(self.rn_images)


@dataclass
class ProcessedSession:
    """Per-pair fits and the FPN-corrected resampled images."""

    rn_fits: List[FittedGaussian]
    dcsn_fits: List[FittedGaussian]
    rn_images: List[np.ndarray]
    dcsn_images: List[np.ndarray]
    exposures: List[float] = field(default_factory=list)
    bit_depth: int = 8


# -- histogram ---------------------------------------------------------------

def image_histogram(image: np.ndarray) -> np.ndarray:
    """Counts per integer DN bin, starting at 0."""
    values = np.rint(np.asarray(image, dtype=np.float64)).astype(np.int64).ravel()
    return np.bincount(np.clip(values, 0, None)).astype(np.float64)


def histogram_peak(hist: np.ndarray) -> int:
    """Most populated bin above 0."""
    if len(hist) < 2 or not np.any(hist[1:] > 0):
        raise DegenerateDistributionError("noise image has no pixel above 0")
    return int(np.argmax(hist[1:])) + 1


def fix_histogram(hist: np.ndarray, x_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rebuild the clipped lower tail by mirroring the bins at x >= 2*x_max to
    2*x_max - x.

    Mirrored bins replace the original bin at the same position, so the
    clipped mass collected in bin 0 is dropped.

    Returns:
        (bin positions, counts); positions may be negative
    """
    top = len(hist) - 1
    low = min(0, 2 * x_max - top)
    positions = np.arange(low, top + 1)
    counts = np.zeros(len(positions), dtype=np.float64)
    counts[-low:] = hist
    for x in range(2 * x_max, top + 1):
        counts[2 * x_max - x - low] = hist[x]
    return positions, counts


def _moments(positions: np.ndarray, counts: np.ndarray) -> Tuple[float, float]:
    total = counts.sum()
    mean = float(np.dot(positions, counts) / total)
    var = float(np.dot((positions - mean) ** 2, counts) / total)
    return mean, math.sqrt(max(var, 0.0))


def _gaussian(x, amplitude, mu, sigma):
    return amplitude * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def fit_histogram(positions: np.ndarray, counts: np.ndarray) -> FittedGaussian:
    """Weighted least-squares Gaussian fit, initialized from the moments."""
    mu0, sigma0 = _moments(positions, counts)
    if np.count_nonzero(counts) < 3 or sigma0 == 0.0:
        return FittedGaussian(mu=mu0, sigma=sigma0)

    amplitude0 = counts.sum() / (sigma0 * math.sqrt(2.0 * math.pi))
    try:
        params, _ = curve_fit(
            _gaussian,
            positions.astype(np.float64),
            counts,
            p0=[amplitude0, mu0, sigma0],
            sigma=np.sqrt(np.maximum(counts, 1.0)),
            maxfev=5000,
        )
    except (RuntimeError, ValueError) as e:
        logger.warning(f"Gaussian fit failed, using moments: {str(e)}")
        return FittedGaussian(mu=mu0, sigma=sigma0)
    return FittedGaussian(mu=float(params[1]), sigma=abs(float(params[2])))


def fix_noise_distribution(image: np.ndarray) -> FittedGaussian:
    """Fit a Gaussian to a frame after repairing its truncated histogram."""
    hist = image_histogram(image)
    x_max = histogram_peak(hist)
    positions, counts = fix_histogram(hist, x_max)
    return fit_histogram(positions, counts)


# -- rectification and resampling --------------------------------------------

def rectify_dcsn(dcsn_fit: FittedGaussian, rn_fit: FittedGaussian) -> FittedGaussian:
    """Remove the readout contribution from a dark-frame fit."""
    if dcsn_fit.sigma < rn_fit.sigma:
        raise NegativeVarianceError(dcsn_fit, rn_fit)
    return FittedGaussian(
        mu=dcsn_fit.mu - rn_fit.mu,
        sigma=math.sqrt(dcsn_fit.sigma ** 2 - rn_fit.sigma ** 2),
    )


def resample_noise_image(fit: FittedGaussian, width: int, height: int, seed: int) -> np.ndarray:
    """i.i.d. Gaussian image with the fitted parameters."""
    if fit.sigma == 0.0:
        return np.full((height, width), fit.mu, dtype=np.float64)
    return make_rng(seed).normal(fit.mu, fit.sigma, size=(height, width))


def correct_fpn(images: Sequence[np.ndarray], s_fpn: int = 20) -> List[np.ndarray]:
    """Subtract the mean of the first `s_fpn` images from the rest."""
    if len(images) <= s_fpn:
        raise DomainError(f"FPN correction needs more than {s_fpn} images, got {len(images)}")
    shape = np.shape(images[0])
    for image in images:
        if np.shape(image) != shape:
            raise ShapeError("FPN images differ in shape", shape, np.shape(image))
    pattern = np.mean(np.stack(images[:s_fpn]).astype(np.float64), axis=0)
    return [np.asarray(image, dtype=np.float64) - pattern for image in images[s_fpn:]]


def to_8bit(image: np.ndarray, bit_depth: int) -> np.ndarray:
    """Scale native DN to the 8-bit range."""
    return np.asarray(image, dtype=np.float64) / 2.0 ** (bit_depth - 8)


# -- session pipeline ---------------------------------------------------------

def _process_pair(index: int, rn_image: np.ndarray, dcsn_image: np.ndarray, seed: int):
    height, width = np.shape(rn_image)
    try:
        rn_fit = fix_noise_distribution(rn_image)
        rn_resampled = resample_noise_image(rn_fit, width, height, derive_seed(seed, index, 0))
        dcsn_fit = rectify_dcsn(fix_noise_distribution(dcsn_image), rn_fit)
        dcsn_resampled = resample_noise_image(dcsn_fit, width, height, derive_seed(seed, index, 1))
    except NegativeVarianceError as e:
        raise NegativeVarianceError(e.dcsn_fit, e.rn_fit, pair_index=index)
    except DegenerateDistributionError as e:
        raise DegenerateDistributionError(f"pair {index}: {str(e)}")
    logger.debug(f"pair {index}: rn sigma={rn_fit.sigma:.4f} dcsn sigma={dcsn_fit.sigma:.4f}")
    return rn_fit, dcsn_fit, rn_resampled, dcsn_resampled


def process_session(session: NoiseSession, seed: int, s_fpn: int = 20, threads: int = 1) -> ProcessedSession:
    """
    Fit, rectify and resample every pair, then remove fixed-pattern noise.

    Pairs run in parallel with per-pair derived seeds; FPN correction waits
    for all of them.
    """
    if len(session) <= s_fpn:
        raise DomainError(f"session has {len(session)} pairs, FPN correction needs more than {s_fpn}")

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(
            pool.map(
                lambda i: _process_pair(i, session.rn_images[i], session.dcsn_images[i], seed),
                range(len(session)),
            )
        )

    rn_fits = [r[0] for r in results]
    dcsn_fits = [r[1] for r in results]
    rn_images = correct_fpn([r[2] for r in results], s_fpn)
    dcsn_images = correct_fpn([r[3] for r in results], s_fpn)
    logger.info(f"Processed session: {len(session)} pairs, {len(rn_images)} corrected images per list")
    return ProcessedSession(
        rn_fits=rn_fits,
        dcsn_fits=dcsn_fits,
        rn_images=rn_images,
        dcsn_images=dcsn_images,
        exposures=list(session.exposures[s_fpn:]),
        bit_depth=session.bit_depth,
    )


# -- session files -----------------------------------------------------------

def _frame_name(kind: str, index: int) -> str:
    return f"{kind}_{index:04d}.pgm"


def write_session(session: NoiseSession, directory: Union[str, Path]) -> Path:
    """Write frames and session manifest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    depth = 8 if session.bit_depth == 8 else 16
    for index, (rn, dcsn) in enumerate(zip(session.rn_images, session.dcsn_images)):
        write_grayscale(root / _frame_name("rn", index), rn, depth)
        write_grayscale(root / _frame_name("dcsn", index), dcsn, depth)

    manifest = {
        "bit_depth": session.bit_depth,
        "rn_exposure": session.rn_exposure,
        "exposures": list(session.exposures),
    }
    for key, value in session.meta.model_dump(exclude={"fixed", "exposure_time"}).items():
        manifest[key] = value.value if isinstance(value, SensorType) else value
    write_key_value_file(root / SESSION_MANIFEST, manifest, header="noise session")
    return root


def load_session(directory: Union[str, Path]) -> NoiseSession:
    """Read a session directory."""
    root = Path(directory)
    manifest_path = root / SESSION_MANIFEST
    if not manifest_path.is_file():
        raise DomainError(f"no {SESSION_MANIFEST} in {directory}")
    values = read_key_value_file(manifest_path)

    exposures = [float(v) for v in values.get("exposures", "").split(",") if v.strip()]
    meta_fields = {}
    for name in CameraMetadata.model_fields:
        if name in values and name not in ("fixed", "exposure_time"):
            meta_fields[name] = values[name] if name == "sensor_type" else float(values[name])
    meta = CameraMetadata.maxima().with_values(**meta_fields)

    rn_images, dcsn_images = [], []
    for index in range(len(exposures)):
        rn_path, dcsn_path = root / _frame_name("rn", index), root / _frame_name("dcsn", index)
        if not rn_path.is_file() or not dcsn_path.is_file():
            raise DomainError(f"session {directory}: missing frame pair {index}")
        rn_images.append(read_grayscale(rn_path)[0])
        dcsn_images.append(read_grayscale(dcsn_path)[0])

    logger.info(f"Loaded session {directory}: {len(exposures)} pairs")
    return NoiseSession(
        rn_images=rn_images,
        dcsn_images=dcsn_images,
        exposures=exposures,
        meta=meta,
        bit_depth=int(values.get("bit_depth", 8)),
        rn_exposure=float(values.get("rn_exposure", MIN_EXPOSURE)),
    )


def write_processed_session(result: ProcessedSession, directory: Union[str, Path]) -> Path:
    """
    Write the corrected images as little-endian float32 files, scaled to the
    8-bit DN range, plus a manifest.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for kind, images in (("rn", result.rn_images), ("dcsn", result.dcsn_images)):
        for index, image in enumerate(images):
            data = to_8bit(image, result.bit_depth).astype("<f4")
            (root / f"{kind}_{index:04d}.f32").write_bytes(data.tobytes())
    height, width = np.shape(result.rn_images[0]) if result.rn_images else (0, 0)
    write_key_value_file(
        root / PROCESSED_MANIFEST,
        {
            "count": len(result.rn_images),
            "width": width,
            "height": height,
            "source_bit_depth": result.bit_depth,
            "exposures": [format_value(e) for e in result.exposures],
        },
        header="FPN-corrected noise images, 8-bit DN scale",
    )
    return root


def synthetic_frame(
    fit: FittedGaussian,
    width: int,
    height: int,
    seed: int,
    bit_depth: int = 8,
    pattern: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Integer frame drawn from a Gaussian, clipped to the sensor range like a real capture."""
    frame = make_rng(seed).normal(fit.mu, fit.sigma, size=(height, width))
    if pattern is not None:
        frame = frame + pattern
    return np.clip(np.rint(frame), 0, 2 ** bit_depth - 1).astype(np.int64)
