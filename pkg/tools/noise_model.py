"""
Physics-based camera noise model.

Simulates the sensor signal chain from camera metadata: photon shot noise
(PN), dark current shot noise (DCSN) and readout noise (RN, sense-node reset
plus source follower). Sigmas are reported in digital numbers (DN) of an
8-bit output image.

Signal chain
    electrons --A_SN--> volts at sense node --A_SF--> --A_CDS--> --ADC--> DN
    --> digital camera gain 10^(gain_dB/20)

The ADC is scaled so that `full_well_capacity` electrons map to 255 DN at
0 dB, i.e. one electron is worth 255/FWC DN before camera gain regardless of
the analog gains. Patch intensities are output values (after camera gain),
so a brighter gain setting needs fewer photo-electrons for the same DN.
"""

import enum
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import integrate, stats

from tools.errors import DomainError
from tools.utils import make_rng

logger = logging.getLogger("nse-noise-model")

BOLTZMANN = 1.380649e-23          # J/K
BOLTZMANN_EV = 8.617333262e-5     # eV/K
ELECTRON_CHARGE = 1.602176634e-19  # C
KELVIN_OFFSET = 273.15
DARK_CURRENT_CONSTANT = 2.55e15
MAX_DN = 255.0
SF_GRID_POINTS = 8192


class SensorType(str, enum.Enum):
    """Sensor construction type."""

    CCD = "CCD"
    CMOS = "CMOS"


# Declared ranges of the variable metadata.
VARIABLE_RANGES: Dict[str, Tuple[float, float]] = {
    "camera_gain": (0.0, 24.0),
    "exposure_time": (0.001, 0.2),
    "sensor_temperature": (0.0, 80.0),
    "dark_signal_fom": (0.0, 1.0),
    "full_well_capacity": (2e3, 100e3),
    "pixel_clock_rate": (8e6, 150e6),
    "sense_node_gain": (1e-6, 5e-6),
    "sense_node_reset_factor": (0.0, 1.0),
    "sensor_pixel_size": (0.0009, 0.01),
    "thermal_white_noise": (1e-9, 60e-9),
}

# Field order of the metadata vector fed to the estimator.
VARIABLE_FIELDS: Tuple[str, ...] = (
    "camera_gain",
    "exposure_time",
    "sensor_temperature",
    "dark_signal_fom",
    "full_well_capacity",
    "pixel_clock_rate",
    "sense_node_gain",
    "sense_node_reset_factor",
    "sensor_pixel_size",
    "sensor_type",
    "thermal_white_noise",
)

SWEEPABLE = tuple(VARIABLE_RANGES) + ("mean_intensity",)


class FixedMetadata(BaseModel):
    """Sensor parameters held constant at training and inference time."""

    model_config = ConfigDict(frozen=True)

    camera_offset: float = 0.0
    cds_gain: float = 1.0
    cds_sample_to_sample_time: float = 1e-6
    cds_time_factor: float = 0.5
    flicker_corner_frequency: float = 1e-6
    source_follower_current_modulation: float = 1e-8
    source_follower_gain: float = 1.0


class CameraMetadata(BaseModel):
    """
    Fixed and variable camera parameters.

    Construction validates every variable field against VARIABLE_RANGES. Use
    `CameraMetadata.unchecked(...)` for deliberately out-of-range values
    (fault injection, zero exposure overrides).
    """

    model_config = ConfigDict(frozen=True)

    camera_gain: float = Field(24.0, description="dB")
    exposure_time: float = Field(0.2, description="s")
    sensor_temperature: float = Field(80.0, description="degrees Celsius")
    dark_signal_fom: float = 1.0
    full_well_capacity: float = Field(100e3, description="electrons")
    pixel_clock_rate: float = Field(150e6, description="Hz")
    sense_node_gain: float = Field(5e-6, description="V/e-")
    sense_node_reset_factor: float = 1.0
    sensor_pixel_size: float = Field(0.01, description="mm")
    sensor_type: SensorType = SensorType.CMOS
    thermal_white_noise: float = Field(60e-9, description="V/sqrt(Hz)")
    fixed: FixedMetadata = Field(default_factory=FixedMetadata)

    @field_validator("sensor_type", mode="before")
    @classmethod
    def parse_sensor_type(cls, v):
        """Accept enum members and their names in any case."""
        if isinstance(v, str):
            return SensorType(v.strip().upper())
        return v

    @model_validator(mode="after")
    def check_ranges(self):
        """Reject out-of-range variable fields."""
        for name, (lo, hi) in VARIABLE_RANGES.items():
            value = getattr(self, name)
            if not (lo <= value <= hi) or math.isnan(value):
                raise ValueError(f"{name}={value!r} outside [{lo}, {hi}]")
        return self

    @classmethod
    def maxima(cls, sensor_type: SensorType = SensorType.CMOS) -> "CameraMetadata":
        """All variable parameters at their upper bound."""
        values = {name: hi for name, (_, hi) in VARIABLE_RANGES.items()}
        return cls(sensor_type=sensor_type, **values)

    @classmethod
    def minima(cls, sensor_type: SensorType = SensorType.CCD) -> "CameraMetadata":
        """All variable parameters at their lower bound."""
        values = {name: lo for name, (lo, _) in VARIABLE_RANGES.items()}
        return cls(sensor_type=sensor_type, **values)

    @classmethod
    def unchecked(cls, **values: Any) -> "CameraMetadata":
        """Build metadata without range validation."""
        if "sensor_type" in values and isinstance(values["sensor_type"], str):
            values["sensor_type"] = SensorType(values["sensor_type"].upper())
        if isinstance(values.get("fixed"), dict):
            values["fixed"] = FixedMetadata(**values["fixed"])
        defaults = cls.maxima().model_dump()
        defaults["fixed"] = FixedMetadata()
        defaults.update(values)
        return cls.model_construct(**defaults)

    def with_values(self, **changes: Any) -> "CameraMetadata":
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(changes)
        return CameraMetadata(**data)

    def with_values_unchecked(self, **changes: Any) -> "CameraMetadata":
        """Copy with some fields replaced, without range validation."""
        data = self.model_dump()
        data.update(changes)
        return CameraMetadata.unchecked(**data)

    def in_range(self) -> bool:
        """True when every variable field lies within its declared range."""
        return all(lo <= getattr(self, n) <= hi for n, (lo, hi) in VARIABLE_RANGES.items())

    def variable_values(self) -> Dict[str, Any]:
        """Variable fields in VARIABLE_FIELDS order."""
        return {name: getattr(self, name) for name in VARIABLE_FIELDS}


class NoiseLevels(BaseModel):
    """
    Per-source noise levels in DN.

    sigma_total = sqrt(sigma_pn^2 + sigma_dcsn^2 + sigma_rn^2) + xi
    """

    model_config = ConfigDict(frozen=True)

    sigma_pn: float = Field(ge=0.0)
    sigma_dcsn: float = Field(ge=0.0)
    sigma_rn: float = Field(ge=0.0)
    xi: float = 0.0
    sigma_total: float

    @model_validator(mode="after")
    def check_composition(self):
        """sigma_total must equal the composed value."""
        expected = self.model_sigma + self.xi
        if abs(self.sigma_total - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError(f"sigma_total={self.sigma_total!r} does not compose to {expected!r}")
        return self

    @classmethod
    def compose(cls, sigma_pn: float, sigma_dcsn: float, sigma_rn: float, xi: float = 0.0) -> "NoiseLevels":
        """Build levels with sigma_total composed from the components."""
        model = math.sqrt(sigma_pn ** 2 + sigma_dcsn ** 2 + sigma_rn ** 2)
        return cls(
            sigma_pn=float(sigma_pn),
            sigma_dcsn=float(sigma_dcsn),
            sigma_rn=float(sigma_rn),
            xi=float(xi),
            sigma_total=float(model + xi),
        )

    @property
    def model_sigma(self) -> float:
        """Total noise implied by the three sources alone."""
        return math.sqrt(self.sigma_pn ** 2 + self.sigma_dcsn ** 2 + self.sigma_rn ** 2)

    def with_xi(self, xi: float) -> "NoiseLevels":
        """Same sources, new residual term."""
        return NoiseLevels.compose(self.sigma_pn, self.sigma_dcsn, self.sigma_rn, xi)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.sigma_pn, self.sigma_dcsn, self.sigma_rn, self.xi, self.sigma_total)


@dataclass(frozen=True)
class Patch:
    """A 2-D grayscale patch in DN, stored as float32."""

    intensities: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.intensities, dtype=np.float32)
        if data.ndim != 2:
            raise DomainError(f"patch must be 2-D, got shape {data.shape}")
        if data.size and (np.nanmin(data) < 0.0 or np.nanmax(data) > MAX_DN or np.isnan(data).any()):
            raise DomainError("patch intensities must lie within [0, 255]")
        object.__setattr__(self, "intensities", data)

    @classmethod
    def constant(cls, value: float, width: int = 128, height: int = 128) -> "Patch":
        return cls(np.full((height, width), value, dtype=np.float32))

    @property
    def width(self) -> int:
        return int(self.intensities.shape[1])

    @property
    def height(self) -> int:
        return int(self.intensities.shape[0])

    def mean(self) -> float:
        return float(np.mean(self.intensities, dtype=np.float64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Patch):
            return NotImplemented
        return self.intensities.shape == other.intensities.shape and bool(
            np.array_equal(self.intensities, other.intensities)
        )

    __hash__ = None


# -- signal chain ------------------------------------------------------------

def kelvin(celsius: float) -> float:
    return celsius + KELVIN_OFFSET


def camera_gain_factor(meta: CameraMetadata) -> float:
    """Linear digital gain."""
    return 10.0 ** (meta.camera_gain / 20.0)


def volts_per_electron(meta: CameraMetadata) -> float:
    """Charge-to-voltage conversion up to the ADC input."""
    return meta.sense_node_gain * meta.fixed.source_follower_gain * meta.fixed.cds_gain


def adc_gain(meta: CameraMetadata) -> float:
    """DN per volt at the ADC input, full well mapped to 255 DN at 0 dB."""
    return MAX_DN / (meta.full_well_capacity * volts_per_electron(meta))


def dn_per_electron(meta: CameraMetadata) -> float:
    """Output DN per electron collected in the pixel, camera gain included."""
    return volts_per_electron(meta) * adc_gain(meta) * camera_gain_factor(meta)


def electrons_per_dn(meta: CameraMetadata) -> float:
    return 1.0 / dn_per_electron(meta)


def dn_per_sf_volt(meta: CameraMetadata) -> float:
    """Output DN per volt at the source follower output."""
    return meta.fixed.cds_gain * adc_gain(meta) * camera_gain_factor(meta)


def photoelectrons(meta: CameraMetadata, intensity):
    """Mean photo-electron count behind an output intensity."""
    return np.asarray(intensity, dtype=np.float64) * electrons_per_dn(meta)


def band_gap(t_kelvin: float) -> float:
    """Silicon band gap in eV (Varshni)."""
    return 1.1557 - 7.021e-4 * t_kelvin ** 2 / (1108.0 + t_kelvin)


def dark_current_electrons(meta: CameraMetadata) -> float:
    """
    Mean dark electrons per pixel over the exposure.

    D_R = 2.55e15 * P_A * DFM * T^1.5 * exp(-E_gap / (2 k T)) electrons/s,
    with the pixel area P_A in cm^2.
    """
    t_k = kelvin(meta.sensor_temperature)
    pixel_area_cm2 = (meta.sensor_pixel_size * 0.1) ** 2
    rate = (
        DARK_CURRENT_CONSTANT
        * pixel_area_cm2
        * meta.dark_signal_fom
        * t_k ** 1.5
        * math.exp(-band_gap(t_k) / (2.0 * BOLTZMANN_EV * t_k))
    )
    return rate * max(meta.exposure_time, 0.0)


def reset_sigma_volts(meta: CameraMetadata) -> float:
    """Sense-node reset (kTC) noise left after CDS, in volts at the sense node."""
    if meta.sensor_type == SensorType.CCD:
        return 0.0
    t_k = kelvin(meta.sensor_temperature)
    ktc = math.sqrt(BOLTZMANN * t_k * meta.sense_node_gain / ELECTRON_CHARGE)
    return meta.sense_node_reset_factor * ktc


@lru_cache(maxsize=4096)
def _source_follower_variance(
    white: float,
    clock_rate: float,
    corner: float,
    modulation: float,
    sample_time: float,
    time_factor: float,
) -> float:
    freq = np.logspace(0.0, math.log10(clock_rate), SF_GRID_POINTS)
    tau_rts = 1.0 / clock_rate
    psd = (
        white ** 2 * (1.0 + corner / freq)
        + 2.0 * modulation ** 2 * tau_rts / (4.0 + (2.0 * np.pi * freq * tau_rts) ** 2)
    )
    tau_d = time_factor * sample_time
    cds = (2.0 - 2.0 * np.cos(2.0 * np.pi * freq * sample_time)) / (1.0 + (2.0 * np.pi * freq * tau_d) ** 2)
    return float(integrate.trapezoid(psd * cds, freq))


def source_follower_sigma_volts(meta: CameraMetadata) -> float:
    """Source-follower noise after the CDS filter, in volts."""
    fixed = meta.fixed
    variance = _source_follower_variance(
        float(meta.thermal_white_noise),
        float(meta.pixel_clock_rate),
        float(fixed.flicker_corner_frequency),
        float(fixed.source_follower_current_modulation),
        float(fixed.cds_sample_to_sample_time),
        float(fixed.cds_time_factor),
    )
    return math.sqrt(max(variance, 0.0))


def readout_sigma_volts(meta: CameraMetadata) -> float:
    """Readout noise at the source follower output: reset and SF noise in quadrature."""
    reset = reset_sigma_volts(meta) * meta.fixed.source_follower_gain
    follower = source_follower_sigma_volts(meta)
    return math.sqrt(reset ** 2 + follower ** 2)


# -- prediction --------------------------------------------------------------

def censored_std(mean: float, sigma: float, low: float = 0.0, high: float = MAX_DN) -> float:
    """Standard deviation of N(mean, sigma^2) clipped to [low, high]."""
    if sigma <= 0.0:
        return 0.0
    a, b = low - mean, high - mean
    alpha, beta = a / sigma, b / sigma
    cdf_a, sf_b = stats.norm.cdf(alpha), stats.norm.sf(beta)
    pdf_a, pdf_b = stats.norm.pdf(alpha), stats.norm.pdf(beta)
    inside = 1.0 - cdf_a - sf_b
    first = a * cdf_a + b * sf_b + sigma * (pdf_a - pdf_b)
    second = a * a * cdf_a + b * b * sf_b + sigma ** 2 * (inside + alpha * pdf_a - beta * pdf_b)
    return math.sqrt(max(second - first ** 2, 0.0))


def noise_budget(meta: CameraMetadata, mean_intensity: float) -> Tuple[float, float, float]:
    """Unclipped (sigma_pn, sigma_dcsn, sigma_rn) in DN."""
    gain = dn_per_electron(meta)
    sigma_pn = math.sqrt(float(photoelectrons(meta, max(mean_intensity, 0.0)))) * gain
    sigma_dcsn = math.sqrt(dark_current_electrons(meta)) * gain
    sigma_rn = readout_sigma_volts(meta) * dn_per_sf_volt(meta)
    return sigma_pn, sigma_dcsn, sigma_rn


def _check_intensity(mean_intensity: float) -> float:
    value = float(mean_intensity)
    if not (0.0 <= value <= MAX_DN):
        raise DomainError(f"mean intensity {mean_intensity!r} outside [0, 255]")
    return value


def predict_sigmas(meta: CameraMetadata, mean_intensity: float, clip_aware: bool = True) -> NoiseLevels:
    """
    Model-predicted noise levels at a mean intensity (xi = 0).

    With `clip_aware`, the three components are scaled by the ratio of the
    clipped to the unclipped output standard deviation, so the levels
    describe the noise visible in a [0, 255] image.
    """
    intensity = _check_intensity(mean_intensity)
    pn, dcsn, rn = noise_budget(meta, intensity)
    if clip_aware:
        total = math.sqrt(pn ** 2 + dcsn ** 2 + rn ** 2)
        if total > 0.0:
            ratio = min(censored_std(intensity, total) / total, 1.0)
            pn, dcsn, rn = pn * ratio, dcsn * ratio, rn * ratio
    return NoiseLevels.compose(pn, dcsn, rn)


def sample_shot_electrons(mean, rng: np.random.Generator, size=None) -> np.ndarray:
    """Poisson electron counts."""
    return rng.poisson(mean, size=size)


def corrupt_patch(clean: Patch, meta: CameraMetadata, seed: int) -> Tuple[Patch, NoiseLevels]:
    """
    Add one realization of PN, DCSN and RN to a clean patch.

    Shot noise is sampled in the electron domain, readout noise in volts;
    both pass the gain chain, the result is rounded half-to-even and clipped
    to [0, 255]. The dark signal mean is removed (offset-calibrated output).
    """
    rng = make_rng(seed)
    signal = clean.intensities.astype(np.float64)
    gain = dn_per_electron(meta)

    photons = photoelectrons(meta, signal)
    shot = sample_shot_electrons(photons, rng) - photons

    dark_mean = dark_current_electrons(meta)
    dark = sample_shot_electrons(dark_mean, rng, size=signal.shape) - dark_mean

    readout = rng.normal(0.0, readout_sigma_volts(meta), size=signal.shape) * dn_per_sf_volt(meta)

    noisy = signal + (shot + dark) * gain + readout
    noisy = np.clip(np.rint(noisy), 0.0, MAX_DN)
    truth = predict_sigmas(meta, clean.mean())
    return Patch(noisy.astype(np.float32)), truth


# -- sensitivity -------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    """One sampled parameter value and its predicted levels."""

    param: str
    param_value: float
    sigma_total: float
    levels: NoiseLevels


def sweep_values(param: str, n_samples: int = 10) -> np.ndarray:
    """
    Uniform samples over a parameter range, endpoints included.

    Camera gain is sampled uniformly in the linear domain and converted to dB.
    """
    if param not in SWEEPABLE:
        raise DomainError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEPABLE)}")
    if n_samples < 2:
        raise DomainError("a sweep needs at least two samples")
    if param == "mean_intensity":
        return np.linspace(0.0, MAX_DN, n_samples)
    lo, hi = VARIABLE_RANGES[param]
    if param == "camera_gain":
        linear = np.linspace(10.0 ** (lo / 20.0), 10.0 ** (hi / 20.0), n_samples)
        return np.clip(20.0 * np.log10(linear), lo, hi)
    return np.linspace(lo, hi, n_samples)


def sensitivity_sweep(
    param: str,
    n_samples: int = 10,
    fixed: Optional[CameraMetadata] = None,
    mean_intensity: float = 128.0,
) -> List[SweepRow]:
    """
    One-parameter-at-a-time total noise sweep.

    The non-swept parameters come from `fixed` (default: all maxima, CMOS).
    """
    fixed = fixed or CameraMetadata.maxima()
    values = sweep_values(param, n_samples)
    rows = []
    for value in values:
        if param == "mean_intensity":
            levels = predict_sigmas(fixed, float(value))
        else:
            levels = predict_sigmas(fixed.with_values(**{param: float(value)}), mean_intensity)
        rows.append(SweepRow(param, float(value), levels.sigma_total, levels))
    rows.sort(key=lambda row: row.param_value)
    logger.debug(f"sweep {param}: {[round(r.sigma_total, 3) for r in rows]}")
    return rows
