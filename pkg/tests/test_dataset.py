"""Tests for record generation and the dataset directory format."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from tools.dataset import (
    FORMAT_VERSION,
    MANIFEST_NAME,
    augment_intensity,
    dataset_hash,
    generate_dataset,
    make_record,
    read_dataset,
    read_manifest,
    sample_metadata,
    tile_image,
    training_targets,
    validate_record,
    write_dataset,
)
from tools.errors import DomainError, RecordInvariantError, TruncatedDataError, VersionMismatchError
from tools.noise_model import VARIABLE_RANGES, Patch, predict_sigmas
from tools.utils import read_key_value_file, write_key_value_file


def test_sample_metadata_in_range():
    for seed in range(20):
        assert sample_metadata(seed).in_range()


def test_augment_shift_is_uniform_and_clipped():
    patch = Patch(np.array([[0.0, 100.0], [200.0, 255.0]], dtype=np.float32))
    shifted = augment_intensity(patch, seed=4).intensities
    offset = shifted[0, 1] - 100.0
    assert -20.0 <= offset <= 20.0
    assert shifted[1, 0] - 200.0 == pytest.approx(offset)
    assert shifted.min() >= 0.0 and shifted.max() <= 255.0


class TestMakeRecord:
    def test_matched_record(self, flat_image):
        record = make_record(Patch(flat_image[:16, :16]), seed=1, mismatch_prob=0.0)
        assert not record.mismatched
        assert record.truth.xi == 0.0
        assert record.truth == predict_sigmas(record.meta_used, record.clean.mean())
        validate_record(record)

    def test_mismatched_record(self, flat_image):
        record = make_record(Patch(flat_image[:16, :16]), seed=1, mismatch_prob=1.0)
        assert record.mismatched
        assert record.meta_fed.camera_gain != record.meta_used.camera_gain
        expected = predict_sigmas(record.meta_fed, record.clean.mean()).sigma_total
        assert record.truth.model_sigma + record.truth.xi == pytest.approx(expected)
        validate_record(record)

    def test_deterministic(self, flat_image):
        patch = Patch(flat_image[:16, :16])
        assert make_record(patch, 9) == make_record(patch, 9)

    def test_bad_probability(self, flat_image):
        with pytest.raises(DomainError):
            make_record(Patch(flat_image[:16, :16]), 0, mismatch_prob=1.5)


class TestTiling:
    def test_tiles_drop_partial(self):
        image = np.arange(40 * 50, dtype=np.float32).reshape(40, 50) % 256
        tiles = tile_image(image, 16)
        assert len(tiles) == 2 * 3
        assert np.array_equal(tiles[1].intensities, image[:16, 16:32])

    def test_image_too_small(self):
        with pytest.raises(DomainError):
            tile_image(np.zeros((8, 8)), 16)


def test_generation_independent_of_threads(clean_images):
    single = generate_dataset(clean_images, 6, seed=7, patch_size=16, threads=1)
    parallel = generate_dataset(clean_images, 6, seed=7, patch_size=16, threads=3)
    assert single == parallel


def test_training_targets_clip_xi(small_records):
    record = small_records[0]
    big = replace(record, truth=record.truth.with_xi(-500.0))
    targets = training_targets(big, xi_max=64.0)
    assert targets[3] == -1.0
    assert targets[:3] == pytest.approx([record.truth.sigma_pn, record.truth.sigma_dcsn, record.truth.sigma_rn])


class TestSerialization:
    def test_round_trip(self, small_records, tmp_path):
        write_dataset(small_records, tmp_path / "ds", seed=3, mismatch_prob=0.5)
        loaded = read_dataset(tmp_path / "ds")
        assert loaded == small_records
        manifest = read_manifest(tmp_path / "ds")
        assert int(manifest["format_version"]) == FORMAT_VERSION
        assert int(manifest["record_count"]) == len(small_records)
        assert (int(manifest["patch_width"]), int(manifest["patch_height"])) == (16, 16)

    def test_hash_is_stable(self, small_records, tmp_path):
        write_dataset(small_records, tmp_path / "a", seed=3)
        write_dataset(small_records, tmp_path / "b", seed=3)
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")

    def test_version_mismatch(self, small_records, tmp_path):
        root = write_dataset(small_records, tmp_path / "ds")
        manifest = read_key_value_file(root / MANIFEST_NAME)
        manifest["format_version"] = str(FORMAT_VERSION + 1)
        write_key_value_file(root / MANIFEST_NAME, manifest)
        with pytest.raises(VersionMismatchError):
            read_dataset(root)

    def test_truncated_record(self, small_records, tmp_path):
        root = write_dataset(small_records, tmp_path / "ds")
        path = root / "record_000002.f32"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedDataError):
            read_dataset(root)

    def test_missing_record(self, small_records, tmp_path):
        root = write_dataset(small_records, tmp_path / "ds")
        (root / "record_000005.txt").unlink()
        with pytest.raises(TruncatedDataError):
            read_dataset(root)

    def test_inconsistent_truth(self, matched_records, tmp_path):
        root = write_dataset(matched_records, tmp_path / "ds")
        sidecar = read_key_value_file(root / "record_000001.txt")
        sidecar["truth_sigma_pn"] = repr(float(sidecar["truth_sigma_pn"]) + 1.0)
        sidecar["truth_sigma_total"] = repr(float(sidecar["truth_sigma_total"]) + 5.0)
        write_key_value_file(root / "record_000001.txt", sidecar)
        with pytest.raises(RecordInvariantError) as excinfo:
            read_dataset(root)
        assert excinfo.value.record == "record_000001"

    def test_mismatch_in_wrong_field(self, matched_records):
        record = matched_records[0]
        fed = record.meta_fed.with_values_unchecked(exposure_time=record.meta_fed.exposure_time / 2.0)
        broken = replace(record, meta_fed=fed)
        with pytest.raises(RecordInvariantError):
            validate_record(broken)


class TestSamplingProperties:
    def test_exposure_time_mean(self):
        lo, hi = VARIABLE_RANGES["exposure_time"]
        exposures = np.array([sample_metadata(seed).exposure_time for seed in range(10_000)])
        spread = (hi - lo) / math.sqrt(12.0 * exposures.size)
        assert exposures.mean() == pytest.approx((lo + hi) / 2.0, abs=4.0 * spread)
        assert exposures.min() >= lo and exposures.max() <= hi

    def test_augment_shift_distribution(self):
        patch = Patch.constant(128.0, 4, 4)
        offsets = [float(augment_intensity(patch, seed).intensities[0, 0]) - 128.0 for seed in range(2000)]
        assert stats.kstest(offsets, "uniform", args=(-20.0, 40.0)).pvalue > 0.01

    def test_record_invariants_hold_for_many_seeds(self, flat_image):
        patch = Patch(flat_image[:16, :16])
        mismatched = 0
        for seed in range(1000):
            record = make_record(patch, seed, mismatch_prob=0.5)
            validate_record(record)
            assert record.truth.sigma_total == pytest.approx(record.truth.model_sigma + record.truth.xi)
            mismatched += record.mismatched
        assert 400 <= mismatched <= 600
