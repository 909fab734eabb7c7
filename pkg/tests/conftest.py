"""Shared fixtures for the noise source estimator tests."""

import os

import numpy as np
import pytest

from config import reset_config
from tools.dataset import generate_dataset, synthetic_clean_image
from tools.noise_model import CameraMetadata
from tools.realnoise import FittedGaussian, NoiseSession, synthetic_frame


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_config(monkeypatch, tmp_path):
    """Fresh settings per test, free of NSE_* variables from the shell."""
    for name in list(os.environ):
        if name.startswith("NSE_"):
            monkeypatch.delenv(name)
    reset_config()
    yield
    reset_config()


@pytest.fixture
def max_cmos():
    return CameraMetadata.maxima()


@pytest.fixture
def clean_images():
    return [synthetic_clean_image(64, 64, seed=s) for s in range(2)]


@pytest.fixture
def small_records(clean_images):
    return generate_dataset(clean_images, count=12, seed=3, mismatch_prob=0.5, patch_size=16)


@pytest.fixture
def matched_records(clean_images):
    return generate_dataset(clean_images, count=8, seed=5, mismatch_prob=0.0, patch_size=16)


@pytest.fixture
def flat_image():
    return np.full((64, 64), 128.0, dtype=np.float32)


@pytest.fixture
def make_session():
    """Builder of synthetic dark/bias sessions with known Gaussian parameters."""

    def build(pairs=22, size=32, bit_depth=8, rn=(3.0, 1.5), dcsn=(5.0, 2.5)):
        scale = 2 ** (bit_depth - 8)
        rn_fit = FittedGaussian(mu=rn[0] * scale, sigma=rn[1] * scale)
        dcsn_fit = FittedGaussian(mu=dcsn[0] * scale, sigma=dcsn[1] * scale)
        return NoiseSession(
            rn_images=[synthetic_frame(rn_fit, size, size, seed=2 * i, bit_depth=bit_depth) for i in range(pairs)],
            dcsn_images=[synthetic_frame(dcsn_fit, size, size, seed=2 * i + 1, bit_depth=bit_depth) for i in range(pairs)],
            exposures=[0.01 * (i + 1) for i in range(pairs)],
            meta=CameraMetadata.maxima().with_values(camera_gain=6.0),
            bit_depth=bit_depth,
        )

    return build
