"""
Labeled training records: generation, serialization and loading.

Dataset directory layout
    manifest.txt           key=value: format_version, patch_width,
                           patch_height, record_count, seed, mismatch_prob
    record_000000.f32      clean then noisy patch, little-endian float32,
                           row-major
    record_000000.txt      key=value sidecar: fed_* and used_* metadata
                           fields, truth_* noise levels
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from tools.errors import (
    DatasetError,
    DomainError,
    RecordInvariantError,
    TruncatedDataError,
    VersionMismatchError,
)
from tools.image_io import list_images, read_8bit
from tools.noise_model import (
    VARIABLE_RANGES,
    CameraMetadata,
    FixedMetadata,
    NoiseLevels,
    Patch,
    SensorType,
    corrupt_patch,
    predict_sigmas,
)
from tools.utils import derive_seed, hash_directory, make_rng, read_key_value_file, write_key_value_file

logger = logging.getLogger("nse-dataset")

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
INTENSITY_SHIFT = 20.0

# Substream indices of one record seed.
_AUGMENT, _METADATA, _MISMATCH, _CORRUPT = range(4)


@dataclass(frozen=True)
class TrainingRecord:
    """Clean and corrupted patch with the metadata on both sides of the model."""

    clean: Patch
    noisy: Patch
    meta_fed: CameraMetadata
    meta_used: CameraMetadata
    truth: NoiseLevels

    @property
    def mismatched(self) -> bool:
        return self.meta_fed != self.meta_used


# -- generation --------------------------------------------------------------

def sample_metadata(seed: int) -> CameraMetadata:
    """Draw every variable field uniformly over its range (gain in dB)."""
    rng = make_rng(seed)
    values = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in VARIABLE_RANGES.items()}
    values["sensor_type"] = SensorType.CMOS if rng.random() < 0.5 else SensorType.CCD
    return CameraMetadata(**values)


def augment_intensity(patch: Patch, seed: int) -> Patch:
    """Shift all pixels by one offset drawn from U[-20, 20] DN, then clip."""
    offset = make_rng(seed).uniform(-INTENSITY_SHIFT, INTENSITY_SHIFT)
    shifted = np.clip(patch.intensities.astype(np.float64) + offset, 0.0, 255.0)
    return Patch(shifted.astype(np.float32))


def make_record(clean: Patch, seed: int, mismatch_prob: float = 0.5) -> TrainingRecord:
    """
    Build one record.

    With probability `mismatch_prob` the camera gain used for corruption is
    re-drawn, so the metadata fed to the estimator no longer describes the
    noise in the image and truth.xi becomes nonzero.
    """
    if not 0.0 <= mismatch_prob <= 1.0:
        raise DomainError(f"mismatch_prob {mismatch_prob!r} outside [0, 1]")

    augmented = augment_intensity(clean, derive_seed(seed, _AUGMENT))
    meta_fed = sample_metadata(derive_seed(seed, _METADATA))

    rng = make_rng(seed, _MISMATCH)
    meta_used = meta_fed
    if rng.random() < mismatch_prob:
        lo, hi = VARIABLE_RANGES["camera_gain"]
        meta_used = meta_fed.with_values(camera_gain=float(rng.uniform(lo, hi)))

    noisy, truth = corrupt_patch(augmented, meta_used, derive_seed(seed, _CORRUPT))
    if meta_used != meta_fed:
        fed_total = predict_sigmas(meta_fed, augmented.mean()).sigma_total
        truth = truth.with_xi(fed_total - truth.sigma_total)
    return TrainingRecord(augmented, noisy, meta_fed, meta_used, truth)


def tile_image(image: np.ndarray, patch_size: int = 128) -> List[Patch]:
    """Non-overlapping row-major tiles; partial tiles are dropped."""
    pixels = np.asarray(image)
    if pixels.ndim != 2:
        raise DomainError(f"expected a 2-D image, got shape {pixels.shape}")
    height, width = pixels.shape
    if height < patch_size or width < patch_size:
        raise DomainError(f"image {width}x{height} smaller than one {patch_size}x{patch_size} tile")
    patches = []
    for top in range(0, height - patch_size + 1, patch_size):
        for left in range(0, width - patch_size + 1, patch_size):
            patches.append(Patch(pixels[top:top + patch_size, left:left + patch_size].astype(np.float32)))
    return patches


def synthetic_clean_image(width: int = 256, height: int = 256, seed: int = 0) -> np.ndarray:
    """Noise-free test image: smooth gradient with flat rectangles and discs."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    ramp = np.cos(angle) * xx / max(width, 1) + np.sin(angle) * yy / max(height, 1)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    low, high = sorted(rng.uniform(20.0, 235.0, size=2))
    image = low + (high - low) * ramp

    for _ in range(int(rng.integers(2, 6))):
        x0, y0 = rng.integers(0, width), rng.integers(0, height)
        w, h = rng.integers(width // 8 + 1, width // 2 + 2), rng.integers(height // 8 + 1, height // 2 + 2)
        image[y0:y0 + h, x0:x0 + w] = rng.uniform(20.0, 235.0)

    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        radius = rng.uniform(min(width, height) / 10.0, min(width, height) / 3.0)
        image[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2] = rng.uniform(20.0, 235.0)

    return np.clip(image, 0.0, 255.0).astype(np.float32)


def load_clean_corpus(directory: Union[str, Path]) -> List[np.ndarray]:
    """8-bit grayscale images of a directory (PGM/PNG), sorted by name."""
    paths = list_images(directory)
    if not paths:
        raise DatasetError(f"no PGM/PNG images in {directory}")
    logger.info(f"Loaded {len(paths)} clean images from {directory}")
    return [read_8bit(p) for p in paths]


def generate_dataset(
    images: Sequence[np.ndarray],
    count: int,
    seed: int,
    mismatch_prob: float = 0.5,
    patch_size: int = 128,
    threads: int = 1,
) -> List[TrainingRecord]:
    """
    Build `count` records from tiles of the clean images.

    Record i uses the tile and seed derived from (seed, i), so the result
    does not depend on the thread count.
    """
    tiles = [tile for image in images for tile in tile_image(image, patch_size)]
    if not tiles and count:
        raise DomainError("clean corpus yields no tiles")

    def build(index: int) -> TrainingRecord:
        tile = tiles[int(make_rng(seed, index, len(tiles)).integers(len(tiles)))]
        return make_record(tile, derive_seed(seed, index), mismatch_prob)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        records = list(pool.map(build, range(count)))
    logger.info(f"Generated {len(records)} records from {len(tiles)} tiles (seed={seed})")
    return records


def training_targets(record: TrainingRecord, xi_max: float = 64.0) -> np.ndarray:
    """Patch-level targets: sigma_pn, sigma_dcsn, sigma_rn in DN and xi/xi_max in [-1, 1]."""
    truth = record.truth
    xi = float(np.clip(truth.xi / xi_max, -1.0, 1.0))
    return np.array([truth.sigma_pn, truth.sigma_dcsn, truth.sigma_rn, xi], dtype=np.float64)


# -- validation --------------------------------------------------------------

def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def validate_record(record: TrainingRecord, name: Optional[str] = None) -> None:
    """Raise RecordInvariantError unless the record is internally consistent."""
    if record.clean.intensities.shape != record.noisy.intensities.shape:
        raise RecordInvariantError("clean and noisy shapes differ", name)

    truth = record.truth
    mean = record.clean.mean()
    used = predict_sigmas(record.meta_used, mean)
    for field in ("sigma_pn", "sigma_dcsn", "sigma_rn"):
        if not _close(getattr(truth, field), getattr(used, field)):
            raise RecordInvariantError(f"truth.{field} does not match the corrupting metadata", name)

    if not record.mismatched:
        if truth.xi != 0.0:
            raise RecordInvariantError(f"xi={truth.xi!r} with matching metadata", name)
        return

    fed, used_values = record.meta_fed.model_dump(), record.meta_used.model_dump()
    differing = sorted(k for k in fed if fed[k] != used_values[k])
    if differing != ["camera_gain"]:
        raise RecordInvariantError(f"fed and used metadata differ in {differing}, expected camera_gain only", name)
    expected = predict_sigmas(record.meta_fed, mean).sigma_total - used.sigma_total
    if not _close(truth.xi, expected):
        raise RecordInvariantError(f"xi={truth.xi!r} but metadata imply {expected!r}", name)


# -- serialization -----------------------------------------------------------

def _record_stem(index: int) -> str:
    return f"record_{index:06d}"


def _metadata_fields(prefix: str, meta: CameraMetadata) -> Dict[str, object]:
    fields = {}
    for key, value in meta.model_dump(exclude={"fixed"}).items():
        fields[f"{prefix}_{key}"] = value.value if isinstance(value, SensorType) else value
    for key, value in meta.fixed.model_dump().items():
        fields[f"{prefix}_fixed_{key}"] = value
    return fields


def _parse_metadata(prefix: str, values: Dict[str, str]) -> CameraMetadata:
    fixed_prefix = f"{prefix}_fixed_"
    fixed = {k[len(fixed_prefix):]: float(v) for k, v in values.items() if k.startswith(fixed_prefix)}
    fields = {}
    for name in CameraMetadata.model_fields:
        if name == "fixed":
            continue
        raw = values[f"{prefix}_{name}"]
        fields[name] = raw if name == "sensor_type" else float(raw)
    return CameraMetadata(fixed=FixedMetadata(**fixed), **fields)


def write_dataset(
    records: Iterable[TrainingRecord],
    path: Union[str, Path],
    seed: int = 0,
    mismatch_prob: Optional[float] = None,
    patch_size: Optional[int] = None,
) -> Path:
    """Write records and manifest; the manifest goes last."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = list(records)

    width = height = patch_size or 0
    if records:
        height, width = records[0].clean.intensities.shape

    for index, record in enumerate(records):
        if record.clean.intensities.shape != (height, width):
            raise DomainError(f"record {index} has shape {record.clean.intensities.shape}, expected {(height, width)}")
        stem = _record_stem(index)
        payload = np.concatenate([record.clean.intensities.ravel(), record.noisy.intensities.ravel()])
        (root / f"{stem}.f32").write_bytes(payload.astype("<f4").tobytes())

        sidecar: Dict[str, object] = {}
        sidecar.update(_metadata_fields("fed", record.meta_fed))
        sidecar.update(_metadata_fields("used", record.meta_used))
        for key, value in record.truth.model_dump().items():
            sidecar[f"truth_{key}"] = value
        write_key_value_file(root / f"{stem}.txt", sidecar)

    manifest = {
        "format_version": FORMAT_VERSION,
        "patch_width": width,
        "patch_height": height,
        "record_count": len(records),
        "seed": seed,
    }
    if mismatch_prob is not None:
        manifest["mismatch_prob"] = mismatch_prob
    write_key_value_file(root / MANIFEST_NAME, manifest, header="noise source estimator dataset")
    logger.info(f"Wrote {len(records)} records to {root}")
    return root


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    """Manifest of a dataset directory, version-checked."""
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {path}")
    manifest = read_key_value_file(manifest_path)
    try:
        version = int(manifest["format_version"])
        for key in ("patch_width", "patch_height", "record_count"):
            int(manifest[key])
    except (KeyError, ValueError) as e:
        raise DatasetError(f"malformed manifest in {path}: {str(e)}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, supported {FORMAT_VERSION}")
    return manifest


def read_dataset(path: Union[str, Path]) -> List[TrainingRecord]:
    """Load and validate every record of a dataset directory."""
    root = Path(path)
    manifest = read_manifest(root)
    width, height = int(manifest["patch_width"]), int(manifest["patch_height"])
    count = int(manifest["record_count"])
    expected_bytes = 2 * width * height * 4

    records = []
    for index in range(count):
        stem = _record_stem(index)
        data_path, sidecar_path = root / f"{stem}.f32", root / f"{stem}.txt"
        if not data_path.is_file() or not sidecar_path.is_file():
            raise TruncatedDataError(f"{stem}: missing record files ({count} records expected)")
        raw = data_path.read_bytes()
        if len(raw) != expected_bytes:
            raise TruncatedDataError(f"{data_path.name}: {len(raw)} bytes, expected {expected_bytes}")
        pixels = np.frombuffer(raw, dtype="<f4").astype(np.float32)

        try:
            clean = Patch(pixels[: width * height].reshape(height, width))
            noisy = Patch(pixels[width * height:].reshape(height, width))
            values = read_key_value_file(sidecar_path)
            record = TrainingRecord(
                clean=clean,
                noisy=noisy,
                meta_fed=_parse_metadata("fed", values),
                meta_used=_parse_metadata("used", values),
                truth=NoiseLevels(**{k: float(values[f"truth_{k}"]) for k in NoiseLevels.model_fields}),
            )
        except (KeyError, ValueError, ValidationError) as e:
            raise RecordInvariantError(f"unreadable record: {str(e)}", stem)
        validate_record(record, stem)
        records.append(record)

    logger.info(f"Read {len(records)} records from {root}")
    return records


def dataset_hash(path: Union[str, Path]) -> str:
    """SHA-256 over manifest and record files."""
    return hash_directory(path)
