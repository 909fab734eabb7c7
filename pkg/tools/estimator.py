"""
Noise source estimators.

Four variants share one convolutional trunk:

    DrneCust     two residual blocks, global max pool, one FCB -> sigma_total
    WithoutMeta  trunk + PN/DCSN/RN heads + xi head, no metadata
    MinMeta      every source head also sees gain, exposure and temperature
    FullMeta     every source head sees the metadata subset of its source

The xi head concatenates the pooled features with the three source outputs.
sigma_total of a four-branch estimate is always composed from the branch
outputs, never predicted.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tools.dataset import TrainingRecord, tile_image, training_targets
from tools.errors import CheckpointError, DomainError, MissingMetadataError, TrainingDivergedError
from tools.noise_model import VARIABLE_FIELDS, VARIABLE_RANGES, CameraMetadata, NoiseLevels, Patch, SensorType
from tools.tensor_nn import (
    AdamState,
    FullyConnectedBlock,
    Graph,
    Module,
    ResidualBlock,
    Tensor,
    adam_step,
    concat,
    global_max_pool,
    load_checkpoint,
    mse,
    save_checkpoint,
)
from tools.utils import make_rng

logger = logging.getLogger("nse-estimator")

BASE_CHANNELS = 64
FCB_WIDTHS = (32, 16, 8)
SOURCES = ("pn", "dcsn", "rn")

MIN_META_FIELDS = ("camera_gain", "exposure_time", "sensor_temperature")
FULL_META_ROUTES: Dict[str, Tuple[str, ...]] = {
    "pn": ("camera_gain", "full_well_capacity"),
    "dcsn": ("camera_gain", "exposure_time", "sensor_temperature", "dark_signal_fom", "sensor_pixel_size"),
    "rn": ("camera_gain", "pixel_clock_rate", "sense_node_gain", "sense_node_reset_factor", "thermal_white_noise"),
}


class VariantKind(str, enum.Enum):
    DRNE_CUST = "DrneCust"
    WITHOUT_META = "WithoutMeta"
    MIN_META = "MinMeta"
    FULL_META = "FullMeta"

    @classmethod
    def parse(cls, value: Union[str, "VariantKind"]) -> "VariantKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise DomainError(f"unknown variant {value!r}; expected one of {', '.join(k.value for k in cls)}")

    @property
    def uses_metadata(self) -> bool:
        return self in (VariantKind.MIN_META, VariantKind.FULL_META)

    @property
    def branched(self) -> bool:
        return self is not VariantKind.DRNE_CUST


class ModelVariant(BaseModel):
    """Architecture choice plus size knobs."""

    model_config = ConfigDict(frozen=True)

    kind: VariantKind = VariantKind.FULL_META
    channel_scale: float = Field(1.0, gt=0.0)
    patch_size: int = Field(128, ge=16)

    @property
    def channels(self) -> int:
        return max(1, int(round(BASE_CHANNELS * self.channel_scale)))


class EstimatorManifest(BaseModel):
    """Everything needed to rebuild an estimator from a checkpoint."""

    variant: VariantKind
    channel_scale: float
    patch_size: int
    metadata_fields: List[str] = Field(default_factory=lambda: list(VARIABLE_FIELDS))
    xi_max: float = 64.0
    seed: int = 0


@dataclass(frozen=True)
class Estimate:
    """
    One patch estimate.

    `levels` is None for DrneCust, which only predicts sigma_total. Raw
    outputs are the branch values before clamping and xi denormalization.
    """

    sigma_total: float
    levels: Optional[NoiseLevels]
    raw: Tuple[float, ...]


@dataclass
class ImageEstimate:
    estimates: List[Estimate]
    mean: Dict[str, float] = field(default_factory=dict)


# -- metadata ----------------------------------------------------------------

def normalize_metadata(meta: CameraMetadata, clamp: bool = False) -> np.ndarray:
    """
    Min-max normalize the variable fields in VARIABLE_FIELDS order.

    sensor_type maps CCD -> 0, CMOS -> 1. Out-of-range values are a
    DomainError unless `clamp` is set, in which case they are clipped to
    [0, 1] with a warning.
    """
    vec = np.empty(len(VARIABLE_FIELDS), dtype=np.float64)
    for i, name in enumerate(VARIABLE_FIELDS):
        if name == "sensor_type":
            vec[i] = 1.0 if meta.sensor_type == SensorType.CMOS else 0.0
            continue
        lo, hi = VARIABLE_RANGES[name]
        vec[i] = (getattr(meta, name) - lo) / (hi - lo)

    outside = [VARIABLE_FIELDS[i] for i in np.flatnonzero((vec < 0.0) | (vec > 1.0))]
    if outside:
        if not clamp:
            raise DomainError(f"metadata outside the normalization range: {', '.join(outside)}")
        logger.warning(f"Clamping out-of-range metadata: {', '.join(outside)}")
        vec = np.clip(vec, 0.0, 1.0)
    return vec


def route_metadata(vec: np.ndarray, kind: Union[str, VariantKind]) -> Dict[str, np.ndarray]:
    """Per-branch metadata columns of a (k,) or (N, k) normalized vector."""
    kind = VariantKind.parse(kind)
    vec = np.asarray(vec)
    columns = {name: i for i, name in enumerate(VARIABLE_FIELDS)}

    def select(names: Sequence[str]) -> np.ndarray:
        return vec[..., [columns[n] for n in names]]

    if kind is VariantKind.FULL_META:
        return {source: select(FULL_META_ROUTES[source]) for source in SOURCES}
    if kind is VariantKind.MIN_META:
        return {source: select(MIN_META_FIELDS) for source in SOURCES}
    return {source: vec[..., :0] for source in SOURCES}


# -- network -----------------------------------------------------------------

class NoiseSourceNetwork(Module):
    """Trunk and heads of one variant."""

    def __init__(self, variant: ModelVariant, seed: int = 0):
        super().__init__()
        self.variant = variant
        rng = make_rng(seed)
        channels = variant.channels
        self.blocks = [
            self.add_module("block0", ResidualBlock(1, channels, rng)),
            self.add_module("block1", ResidualBlock(channels, channels, rng)),
        ]
        kind = variant.kind
        if not kind.branched:
            self.heads = {"total": self.add_module("head_total", FullyConnectedBlock(channels, rng, FCB_WIDTHS))}
            return

        widths = {source: 0 for source in SOURCES}
        if kind is VariantKind.FULL_META:
            widths = {source: len(FULL_META_ROUTES[source]) for source in SOURCES}
        elif kind is VariantKind.MIN_META:
            widths = {source: len(MIN_META_FIELDS) for source in SOURCES}
        self.heads = {
            source: self.add_module(f"head_{source}", FullyConnectedBlock(channels + widths[source], rng, FCB_WIDTHS))
            for source in SOURCES
        }
        self.heads["xi"] = self.add_module("head_xi", FullyConnectedBlock(channels + len(SOURCES), rng, FCB_WIDTHS))

    def concat_widths(self) -> Dict[str, int]:
        """Input width of every head."""
        return {name: head.hidden[0].weight.shape[0] for name, head in self.heads.items()}

    def features(self, graph: Optional[Graph], x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(graph, h)
        return global_max_pool(graph, h)

    def __call__(self, graph: Optional[Graph], x: Tensor, meta: Optional[np.ndarray] = None) -> Tensor:
        """(N,1,P,P) patches -> (N,1) total or (N,4) [pn, dcsn, rn, xi_norm]."""
        pooled = self.features(graph, x)
        if not self.variant.kind.branched:
            return self.heads["total"](graph, pooled)

        routes = route_metadata(meta, self.variant.kind) if meta is not None else {}
        outputs = []
        for source in SOURCES:
            subset = routes.get(source)
            parts = [pooled]
            if subset is not None and subset.shape[-1]:
                parts.append(Tensor(subset))
            outputs.append(self.heads[source](graph, concat(graph, parts) if len(parts) > 1 else pooled))
        xi = self.heads["xi"](graph, concat(graph, [pooled, *outputs]))
        return concat(graph, [*outputs, xi])


class Estimator:
    """A network plus the manifest it was built from."""

    def __init__(self, variant: ModelVariant, seed: int = 0, xi_max: float = 64.0):
        self.variant = variant
        self.seed = seed
        self.xi_max = xi_max
        self.network = NoiseSourceNetwork(variant, seed)

    @property
    def kind(self) -> VariantKind:
        return self.variant.kind

    def manifest(self) -> EstimatorManifest:
        return EstimatorManifest(
            variant=self.variant.kind,
            channel_scale=self.variant.channel_scale,
            patch_size=self.variant.patch_size,
            xi_max=self.xi_max,
            seed=self.seed,
        )

    def parameters(self) -> Dict[str, Tensor]:
        return self.network.named_parameters()

    def parameter_count(self) -> int:
        return self.network.parameter_count()

    def metadata_batch(self, metas: Optional[Sequence[Optional[CameraMetadata]]], count: int, clamp: bool) -> Optional[np.ndarray]:
        if not self.kind.uses_metadata:
            return None
        if metas is None or len(metas) != count or any(m is None for m in metas):
            raise MissingMetadataError(f"{self.kind.value} needs camera metadata for every patch")
        return np.stack([normalize_metadata(m, clamp=clamp) for m in metas])

    def input_batch(self, patches: Sequence[Patch]) -> np.ndarray:
        size = self.variant.patch_size
        for patch in patches:
            if patch.intensities.shape != (size, size):
                raise DomainError(f"patch shape {patch.intensities.shape} does not match model patch size {size}")
        stack = np.stack([p.intensities for p in patches]).astype(np.float32)
        return (stack / 255.0)[:, None, :, :]

    def forward_raw(
        self,
        patches: Sequence[Patch],
        metas: Optional[Sequence[Optional[CameraMetadata]]] = None,
        clamp_metadata: bool = False,
    ) -> np.ndarray:
        """Raw network outputs for a batch, no tape."""
        x = Tensor(self.input_batch(patches))
        meta = self.metadata_batch(metas, len(patches), clamp_metadata)
        return np.asarray(self.network(None, x, meta).data, dtype=np.float64)

    def to_estimate(self, raw: np.ndarray) -> Estimate:
        raw_tuple = tuple(float(v) for v in raw)
        if not self.kind.branched:
            return Estimate(sigma_total=max(raw_tuple[0], 0.0), levels=None, raw=raw_tuple)
        pn, dcsn, rn = (max(v, 0.0) for v in raw_tuple[:3])
        levels = NoiseLevels.compose(pn, dcsn, rn, raw_tuple[3] * self.xi_max)
        return Estimate(sigma_total=levels.sigma_total, levels=levels, raw=raw_tuple)

    def save(self, path: Union[str, Path]) -> str:
        return save_model(self, path)


# -- operations --------------------------------------------------------------

def build_model(variant: ModelVariant, seed: int = 0, xi_max: float = 64.0) -> Estimator:
    """Fresh estimator with He-uniform weights drawn from `seed`."""
    model = Estimator(variant, seed, xi_max)
    logger.debug(f"built {variant.kind.value} (channels={variant.channels}): {model.parameter_count()} parameters")
    return model


def estimate_batch(
    model: Estimator,
    patches: Sequence[Patch],
    metas: Optional[Sequence[Optional[CameraMetadata]]] = None,
    batch_size: int = 64,
    clamp_metadata: bool = False,
) -> List[Estimate]:
    """Estimates for many patches, evaluated in chunks."""
    estimates = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        chunk_meta = metas[start:start + batch_size] if metas is not None else None
        raw = model.forward_raw(chunk, chunk_meta, clamp_metadata)
        estimates.extend(model.to_estimate(row) for row in raw)
    return estimates


def estimate(
    model: Estimator,
    patch: Patch,
    meta: Optional[CameraMetadata] = None,
    clamp_metadata: bool = False,
) -> Estimate:
    """Noise levels of one patch."""
    return estimate_batch(model, [patch], [meta] if model.kind.uses_metadata else None, 1, clamp_metadata)[0]


def estimate_image(model: Estimator, image: np.ndarray, meta: Optional[CameraMetadata] = None) -> ImageEstimate:
    """Estimate every tile of an image and average each component."""
    patches = tile_image(image, model.variant.patch_size)
    metas = [meta] * len(patches) if model.kind.uses_metadata else None
    estimates = estimate_batch(model, patches, metas)
    mean = {"sigma_total": float(np.mean([e.sigma_total for e in estimates]))}
    if model.kind.branched:
        for name in ("sigma_pn", "sigma_dcsn", "sigma_rn", "xi"):
            mean[name] = float(np.mean([getattr(e.levels, name) for e in estimates]))
    return ImageEstimate(estimates, mean)


# -- training ----------------------------------------------------------------

class TrainingSettings(BaseModel):
    """Optimization knobs; defaults are desk scale."""

    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    xi_max: float = Field(64.0, gt=0.0)

    @classmethod
    def from_config(cls, config) -> "TrainingSettings":
        return cls(
            batch_size=config.batch_size,
            epochs=config.epochs,
            learning_rate=config.learning_rate,
            xi_max=config.xi_max,
        )


def record_targets(kind: VariantKind, records: Sequence[TrainingRecord], xi_max: float) -> np.ndarray:
    """Training targets: (N,1) sigma_total for DrneCust, else (N,4)."""
    if not kind.branched:
        return np.array([[r.truth.sigma_total] for r in records], dtype=np.float64)
    return np.stack([training_targets(r, xi_max) for r in records])


def train(
    variant: ModelVariant,
    records: Sequence[TrainingRecord],
    settings: Optional[TrainingSettings] = None,
    seed: int = 0,
    checkpoint: Optional[Union[str, Path]] = None,
) -> Tuple[Estimator, List[float]]:
    """
    Joint MSE training of all branches with Adam.

    Returns the trained estimator and the mean training loss of every epoch.
    """
    if not records:
        raise DomainError("cannot train on an empty dataset")
    settings = settings or TrainingSettings()
    model = build_model(variant, seed, settings.xi_max)
    params = model.parameters()
    state = AdamState(lr=settings.learning_rate)

    patches = [r.noisy for r in records]
    inputs = model.input_batch(patches)
    metas = model.metadata_batch([r.meta_fed for r in records], len(records), clamp=False)
    targets = record_targets(variant.kind, records, settings.xi_max).astype(np.float32)

    losses: List[float] = []
    step = 0
    for epoch in range(settings.epochs):
        order = make_rng(seed, epoch, 0x7EA1).permutation(len(records))
        total, seen = 0.0, 0
        for start in range(0, len(order), settings.batch_size):
            batch = order[start:start + settings.batch_size]
            graph = Graph()
            out = model.network(graph, Tensor(inputs[batch]), metas[batch] if metas is not None else None)
            loss = mse(graph, out, Tensor(targets[batch]))
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            graph.backward(loss)
            adam_step(state, params)
            model.network.zero_grad()
            total += value * len(batch)
            seen += len(batch)
        losses.append(total / seen)
        logger.info(f"{variant.kind.value} epoch {epoch + 1}/{settings.epochs}: loss={losses[-1]:.6g}")

    if checkpoint is not None:
        save_model(model, checkpoint)
    return model, losses


# -- persistence -------------------------------------------------------------

def save_model(model: Estimator, path: Union[str, Path]) -> str:
    """Write parameters and estimator manifest; returns the checkpoint hash."""
    digest = save_checkpoint(path, model.parameters(), model.manifest().model_dump(mode="json"))
    logger.info(f"Saved {model.kind.value} estimator to {path}")
    return digest


def load_model(path: Union[str, Path]) -> Estimator:
    """Rebuild an estimator from a checkpoint."""
    tensors, raw_manifest = load_checkpoint(path)
    manifest = EstimatorManifest(**raw_manifest)
    if manifest.metadata_fields != list(VARIABLE_FIELDS):
        raise CheckpointError(f"{path}: unsupported metadata field order {manifest.metadata_fields}")
    variant = ModelVariant(kind=manifest.variant, channel_scale=manifest.channel_scale, patch_size=manifest.patch_size)
    model = Estimator(variant, manifest.seed, manifest.xi_max)
    params = model.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"{path}: parameter names do not match the {variant.kind.value} layout: {missing[:5]}")
    for name, tensor in params.items():
        if tensor.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {tensor.shape}")
        tensor.data = np.ascontiguousarray(tensors[name], dtype=tensor.data.dtype)
    return model
