"""Tests for the estimator variants, inference, persistence and training."""

import numpy as np
import pytest

from tools.dataset import generate_dataset, synthetic_clean_image, tile_image
from tools.errors import CheckpointError, DomainError, MissingMetadataError, TrainingDivergedError
from tools.estimator import (
    FULL_META_ROUTES,
    ModelVariant,
    TrainingSettings,
    VariantKind,
    build_model,
    estimate,
    estimate_batch,
    estimate_image,
    load_model,
    normalize_metadata,
    record_targets,
    route_metadata,
    save_model,
    train,
)
from tools.evaluation import evaluate_records, xi_detection_summary
from tools.noise_model import VARIABLE_FIELDS, CameraMetadata, Patch, SensorType, corrupt_patch

TINY = dict(channel_scale=0.0625, patch_size=16)


def tiny(kind: VariantKind, seed: int = 0):
    return build_model(ModelVariant(kind=kind, **TINY), seed=seed)


class TestArchitecture:
    def test_full_size_parameter_counts(self):
        assert build_model(ModelVariant(kind=VariantKind.DRNE_CUST)).parameter_count() == 336385
        assert build_model(ModelVariant(kind=VariantKind.FULL_META)).parameter_count() == 345124

    def test_full_meta_concat_widths(self):
        model = build_model(ModelVariant(kind=VariantKind.FULL_META))
        assert model.network.concat_widths() == {"pn": 66, "dcsn": 69, "rn": 69, "xi": 67}

    def test_min_meta_concat_widths(self):
        model = build_model(ModelVariant(kind=VariantKind.MIN_META, channel_scale=0.125))
        assert model.network.concat_widths() == {"pn": 11, "dcsn": 11, "rn": 11, "xi": 11}

    def test_same_seed_same_weights(self):
        a, b = tiny(VariantKind.FULL_META, 3), tiny(VariantKind.FULL_META, 3)
        for (name, x), (_, y) in zip(a.parameters().items(), b.parameters().items()):
            assert np.array_equal(x.data, y.data), name

    def test_parse_variant(self):
        assert VariantKind.parse("fullmeta") is VariantKind.FULL_META
        with pytest.raises(DomainError):
            VariantKind.parse("HalfMeta")


class TestMetadata:
    def test_normalized_extremes(self):
        assert normalize_metadata(CameraMetadata.maxima()) == pytest.approx(np.ones(len(VARIABLE_FIELDS)))
        assert normalize_metadata(CameraMetadata.minima()) == pytest.approx(np.zeros(len(VARIABLE_FIELDS)))

    def test_sensor_type_encoding(self):
        index = VARIABLE_FIELDS.index("sensor_type")
        assert normalize_metadata(CameraMetadata.maxima(SensorType.CCD))[index] == 0.0

    def test_out_of_range_needs_clamp(self):
        meta = CameraMetadata.maxima().with_values_unchecked(sensor_temperature=160.0)
        with pytest.raises(DomainError):
            normalize_metadata(meta)
        assert normalize_metadata(meta, clamp=True).max() == 1.0

    def test_full_meta_routes(self):
        routes = route_metadata(np.arange(11.0), "FullMeta")
        assert {k: v.shape[-1] for k, v in routes.items()} == {k: len(v) for k, v in FULL_META_ROUTES.items()}
        assert routes["pn"].tolist() == [0.0, 4.0]

    def test_without_meta_routes_are_empty(self):
        routes = route_metadata(np.ones((2, 11)), VariantKind.WITHOUT_META)
        assert all(v.shape == (2, 0) for v in routes.values())


class TestInference:
    def test_branched_estimate_composes(self):
        model = tiny(VariantKind.FULL_META)
        result = estimate(model, Patch.constant(100.0, 16, 16), CameraMetadata.maxima())
        levels = result.levels
        assert levels.sigma_pn >= 0 and levels.sigma_dcsn >= 0 and levels.sigma_rn >= 0
        assert result.sigma_total == pytest.approx(levels.model_sigma + levels.xi)
        assert levels.xi == pytest.approx(result.raw[3] * model.xi_max)

    def test_drne_predicts_total_only(self):
        result = estimate(tiny(VariantKind.DRNE_CUST), Patch.constant(50.0, 16, 16))
        assert result.levels is None
        assert result.sigma_total >= 0.0
        assert len(result.raw) == 1

    def test_metadata_required(self):
        with pytest.raises(MissingMetadataError):
            estimate(tiny(VariantKind.MIN_META), Patch.constant(50.0, 16, 16))

    def test_without_meta_ignores_metadata(self):
        model = tiny(VariantKind.WITHOUT_META)
        assert estimate(model, Patch.constant(50.0, 16, 16)).levels is not None

    def test_wrong_patch_size(self):
        with pytest.raises(DomainError):
            estimate(tiny(VariantKind.WITHOUT_META), Patch.constant(50.0, 32, 32))

    def test_batching_does_not_change_results(self):
        model = tiny(VariantKind.FULL_META)
        rng = np.random.default_rng(0)
        patches = [Patch(rng.uniform(0, 255, size=(16, 16))) for _ in range(5)]
        metas = [CameraMetadata.maxima()] * 5
        one = estimate_batch(model, patches, metas, batch_size=1)
        all_at_once = estimate_batch(model, patches, metas, batch_size=5)
        for a, b in zip(one, all_at_once):
            assert a.raw == pytest.approx(b.raw, rel=1e-4, abs=1e-5)

    def test_estimate_image_averages_tiles(self):
        model = tiny(VariantKind.FULL_META)
        image = np.random.default_rng(1).uniform(0, 255, size=(40, 48)).astype(np.float32)
        result = estimate_image(model, image, CameraMetadata.maxima())
        assert len(result.estimates) == 2 * 3
        assert result.mean["sigma_total"] == pytest.approx(np.mean([e.sigma_total for e in result.estimates]))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        model = tiny(VariantKind.MIN_META, seed=5)
        digest = save_model(model, tmp_path / "m.ckpt")
        loaded = load_model(tmp_path / "m.ckpt")
        assert len(digest) == 64
        assert loaded.variant == model.variant
        patch, meta = Patch.constant(80.0, 16, 16), CameraMetadata.maxima()
        assert estimate(loaded, patch, meta).raw == estimate(model, patch, meta).raw

    def test_corrupted_checkpoint(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_model(tiny(VariantKind.DRNE_CUST), path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_model(path)


class TestTraining:
    def test_targets(self, small_records):
        assert record_targets(VariantKind.DRNE_CUST, small_records, 64.0).shape == (12, 1)
        targets = record_targets(VariantKind.FULL_META, small_records, 64.0)
        assert targets.shape == (12, 4)
        assert np.all(np.abs(targets[:, 3]) <= 1.0)

    def test_train_is_deterministic(self, small_records, tmp_path):
        variant = ModelVariant(kind=VariantKind.FULL_META, **TINY)
        settings = TrainingSettings(batch_size=4, epochs=2, learning_rate=1e-3)
        model, losses = train(variant, small_records, settings, seed=1, checkpoint=tmp_path / "a.ckpt")
        _, again = train(variant, small_records, settings, seed=1)
        assert len(losses) == 2
        assert all(np.isfinite(losses))
        assert losses == again
        assert (tmp_path / "a.ckpt").is_file()
        assert load_model(tmp_path / "a.ckpt").parameter_count() == model.parameter_count()

    def test_empty_dataset(self):
        with pytest.raises(DomainError):
            train(ModelVariant(**TINY), [])

    def test_divergence_detected(self, small_records):
        settings = TrainingSettings(batch_size=4, epochs=3, learning_rate=1e30)
        with pytest.raises(TrainingDivergedError):
            with np.errstate(all="ignore"):
                train(ModelVariant(kind=VariantKind.DRNE_CUST, **TINY), small_records, settings)

    @pytest.mark.slow
    def test_loss_decreases(self, small_records):
        settings = TrainingSettings(batch_size=4, epochs=40, learning_rate=1e-3)
        _, losses = train(ModelVariant(kind=VariantKind.FULL_META, **TINY), small_records, settings, seed=2)
        assert losses[-1] < losses[0]


DARK_ONLY_FIELDS = ("exposure_time", "sensor_temperature", "dark_signal_fom", "sensor_pixel_size")


class TestSourceSeparation:
    def test_dark_fields_move_only_dark_branch(self, small_records):
        settings = TrainingSettings(batch_size=4, epochs=3, learning_rate=1e-3)
        model, _ = train(ModelVariant(kind=VariantKind.FULL_META, **TINY), small_records, settings, seed=6)
        patch = small_records[0].noisy
        hot = CameraMetadata.maxima()
        cold = hot.with_values(**{name: CameraMetadata.minima().model_dump()[name] for name in DARK_ONLY_FIELDS})
        a = np.asarray(estimate(model, patch, hot).raw)
        b = np.asarray(estimate(model, patch, cold).raw)
        delta = np.abs(a - b)
        assert delta[0] == 0.0
        assert delta[2] == 0.0
        assert delta[1] > max(delta[0], delta[2])


TRAIN_SCALE = dict(channel_scale=0.25, patch_size=32)
TRAIN_SETTINGS = TrainingSettings(batch_size=32, epochs=8, learning_rate=1e-3)


@pytest.fixture(scope="module")
def trained_pair():
    images = [synthetic_clean_image(256, 256, seed=s) for s in range(8)]
    records = generate_dataset(images, count=2000, seed=11, mismatch_prob=0.5, patch_size=32)
    held_images = [synthetic_clean_image(256, 256, seed=100 + s) for s in range(4)]
    held_out = generate_dataset(held_images, count=400, seed=12, mismatch_prob=0.5, patch_size=32)
    full, full_losses = train(ModelVariant(kind=VariantKind.FULL_META, **TRAIN_SCALE), records, TRAIN_SETTINGS, seed=1)
    blind, _ = train(ModelVariant(kind=VariantKind.WITHOUT_META, **TRAIN_SCALE), records, TRAIN_SETTINGS, seed=1)
    return full, full_losses, blind, held_out


@pytest.mark.slow
class TestTrainedEstimator:
    def test_loss_halves(self, trained_pair):
        _, losses, _, _ = trained_pair
        assert losses[-1] <= 0.5 * losses[0]

    def test_metadata_lowers_dark_and_readout_error(self, trained_pair):
        full, _, blind, held_out = trained_pair
        _, with_meta = evaluate_records(full, held_out)
        _, without_meta = evaluate_records(blind, held_out)
        for source in ("dcsn", "rn"):
            assert with_meta.sources[source].rms < without_meta.sources[source].rms

    def test_mismatch_shows_in_xi(self, trained_pair):
        full, _, _, held_out = trained_pair
        estimates, _ = evaluate_records(full, held_out)
        summary = xi_detection_summary(estimates, held_out)
        assert summary["matched_count"] > 0 and summary["mismatched_count"] > 0
        assert summary["matched_median_abs_xi"] < summary["mismatched_median_abs_xi"]

    def test_sigma_rises_with_gain(self, trained_pair):
        full, _, _, _ = trained_pair
        tiles = tile_image(synthetic_clean_image(128, 128, seed=200), 32)
        gains = np.linspace(0.0, 24.0, 9)
        means = []
        for gain in gains:
            meta = CameraMetadata.maxima().with_values(camera_gain=float(gain))
            patches = [corrupt_patch(tile, meta, seed=300 + i)[0] for i, tile in enumerate(tiles)]
            estimates = estimate_batch(full, patches, [meta] * len(patches))
            means.append(np.mean([e.levels.model_sigma for e in estimates]))
        rising = np.count_nonzero(np.diff(means) > 0)
        assert rising >= 0.8 * (len(gains) - 1)
