"""Tests for Adam, projection, the per-image and corpus training loops."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.models.errors import DivergenceError, NonFiniteError
from src.models.experiment import LossWeights, TrainConfig, TrainMode
from src.models.image import ImagePlanes
from src.models.params import AdamState
from src.services import optimizer as optimizer_module
from src.services.jfif_codec import encode_baseline, encode_image, reconstruct
from src.services.metrics import mse
from src.services.optimizer import (
    AdamOptimizer,
    adam_step,
    batch_gradients,
    init_params,
    loss_and_gradients,
    project_params,
    sample_crops,
    train_per_image,
    train_qtables_corpus,
)
from tests.conftest import make_natural

S = 1e-5


def config(**overrides) -> TrainConfig:
    base = {"steps": 20, "log_every": 5, "seed": 0}
    base.update(overrides)
    return TrainConfig(**base)


class TestInitParams:

    def test_table_range(self):
        params = init_params((3, 4), config())
        for table in (params.tables.luma, params.tables.chroma):
            assert table.min() >= 1.0 * S and table.max() <= 2.0 * S
        assert 1.0 <= params.tables.effective_luma.min() and params.tables.effective_luma.max() <= 2.0

    def test_attention_by_mode(self):
        qa = init_params((3, 4), config(mode=TrainMode.PER_IMAGE_QA))
        q = init_params((3, 4), config(mode=TrainMode.PER_IMAGE_Q))
        assert qa.attention.grid == (3, 4)
        np.testing.assert_allclose(qa.attention.luma, 0.5)
        assert q.attention is None

    def test_deterministic(self):
        a = init_params((2, 2), config(seed=5))
        b = init_params((2, 2), config(seed=5))
        c = init_params((2, 2), config(seed=6))
        np.testing.assert_array_equal(a.tables.luma, b.tables.luma)
        assert not np.array_equal(a.tables.luma, c.tables.luma)


class TestProjection:

    def test_examples(self):
        projected = project_params(
            {"q_luma": np.full((8, 8), 0.5 * S), "q_chroma": np.full((8, 8), 300.0 * S)}, S
        )
        np.testing.assert_allclose(projected["q_luma"], 1.0 * S)
        np.testing.assert_allclose(projected["q_chroma"], 255.0 * S)

    def test_logits_untouched(self):
        logits = np.full((1, 1, 8, 8), -50.0)
        projected = project_params(
            {"q_luma": np.full((8, 8), 3 * S), "q_chroma": np.full((8, 8), 3 * S), "logits_luma": logits}, S
        )
        np.testing.assert_array_equal(projected["logits_luma"], logits)


class TestAdam:

    def test_zero_gradient(self):
        params = {"p": np.array([1.0, -2.0, 3.0])}
        updated, state = adam_step(AdamState(learning_rate=0.1), params, {"p": np.zeros(3)})
        np.testing.assert_array_equal(updated["p"], params["p"])
        assert state.step_count == 1

    def test_first_step_size(self):
        g = np.array([0.5, -4.0, 1e-3])
        updated, _ = adam_step(AdamState(learning_rate=0.01), {"p": np.zeros(3)}, {"p": g})
        np.testing.assert_allclose(updated["p"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-9)

    def test_state_not_mutated(self):
        state = AdamState(learning_rate=0.1)
        adam_step(state, {"p": np.ones(2)}, {"p": np.ones(2)})
        assert state.step_count == 0 and state.first_moment == {}

    def test_non_finite_gradient(self):
        grads = {"p": np.array([0.0, np.inf, 1.0])}
        with pytest.raises(NonFiniteError) as exc:
            adam_step(AdamState(), {"p": np.zeros(3)}, grads)
        assert exc.value.index == (1,)
        assert "p" in exc.value.where

    def test_group_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), {"a": np.zeros(2)}, {"b": np.zeros(2)})

    def test_quadratic_converges(self):
        target = np.array([3.0, -2.0, 0.5])
        opt = AdamOptimizer(learning_rate=0.01)
        params = {"p": np.zeros(3)}
        losses = []
        for _ in range(3000):
            losses.append(float(np.sum((params["p"] - target) ** 2)))
            params = opt.step(params, {"p": 2.0 * (params["p"] - target)})
        assert losses[200] < losses[0]
        assert losses[-1] < 1e-3 * losses[0]


class TestLossAndGradients:

    def test_rate_term_included(self):
        image = ImagePlanes.from_array(np.full((8, 8, 3), 128.0))
        params = init_params((1, 1), config(mode=TrainMode.PER_IMAGE_Q))
        weights = LossWeights(**{"lambda": 1e-2}, alpha=10.0)
        report, grads = loss_and_gradients(image, params, weights)
        assert report.distortion_mse == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(
            grads.d_q_luma, -10.0 / (params.tables.effective_luma ** 2 * S), rtol=1e-9
        )


class TestBatchGradients:

    def test_identical_crops_scale_gradient(self):
        crop = ImagePlanes.from_array(make_natural(16, 16, seed=3))
        params = init_params((2, 2), config(mode=TrainMode.CORPUS_Q))
        weights = LossWeights(**{"lambda": 1e-2})
        _, single = batch_gradients([crop], params, weights)
        _, eight = batch_gradients([crop] * 8, params, weights, max_workers=4)
        np.testing.assert_allclose(eight.d_q_luma, 8.0 * single.d_q_luma, rtol=1e-12)
        np.testing.assert_allclose(eight.d_q_chroma, 8.0 * single.d_q_chroma, rtol=1e-12)

    def test_empty_batch(self):
        params = init_params((2, 2), config(mode=TrainMode.CORPUS_Q))
        with pytest.raises(ValueError):
            batch_gradients([], params, LossWeights(**{"lambda": 1e-2}))


class TestSampleCrops:

    def test_reproducible(self):
        dataset = [ImagePlanes.from_array(make_natural(40, 48, seed=i)) for i in range(3)]
        a = sample_crops(dataset, 16, 4, seed=1, step=7)
        b = sample_crops(dataset, 16, 4, seed=1, step=7)
        c = sample_crops(dataset, 16, 4, seed=1, step=8)
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
        assert not all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, c))
        assert all(x.pixels.shape == (16, 16, 3) for x in a)


class TestTrainPerImage:

    def test_steps_must_be_positive(self):
        with pytest.raises(ValidationError):
            config(steps=0)

    def test_runs_and_stays_in_range(self):
        image = ImagePlanes.from_array(make_natural(16, 24, seed=1))
        result = train_per_image(image, 1e-2, config(steps=30))
        tables = result.params.tables
        assert tables.effective_luma.min() >= 1.0 - 1e-9
        assert tables.effective_luma.max() <= 255.0 + 1e-9
        assert result.params.attention.grid == (2, 3)
        assert [r.total for r in result.trace] and len(result.trace) == 1 + 30 // 5
        assert result.report.total == pytest.approx(
            1e-2 * result.report.distortion_mse + result.report.rate_total
        )

    def test_rate_pressure_raises_tables(self):
        image = ImagePlanes.from_array(make_natural(16, 16, seed=2))
        result = train_per_image(image, 1e-4, config(steps=50, mode=TrainMode.PER_IMAGE_Q))
        assert result.params.attention is None
        assert result.params.tables.effective_luma.mean() > 1.5

    def test_deterministic(self):
        image = ImagePlanes.from_array(make_natural(16, 16, seed=4))
        a = train_per_image(image, 1e-2, config(steps=10))
        b = train_per_image(image, 1e-2, config(steps=10))
        np.testing.assert_array_equal(a.params.tables.luma, b.params.tables.luma)
        np.testing.assert_array_equal(a.params.attention.logits_luma, b.params.attention.logits_luma)

    def test_invariants_hold_over_long_run(self):
        image = ImagePlanes.from_array(make_natural(16, 16, seed=5))
        result = train_per_image(image, 1e-3, config(steps=500, log_every=100, check_invariants=True))
        assert result.steps == 500

    def test_corpus_mode_rejected(self):
        image = ImagePlanes.from_array(make_natural(16, 16))
        with pytest.raises(ValueError):
            train_per_image(image, 1e-2, config(mode=TrainMode.CORPUS_Q))

    def test_divergence(self, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteError("total loss")

        monkeypatch.setattr(optimizer_module, "total_loss", explode)
        image = ImagePlanes.from_array(make_natural(16, 16))
        with pytest.raises(DivergenceError) as exc:
            train_per_image(image, 1e-2, config())
        assert exc.value.step == 1


class TestTrainCorpus:

    def test_matches_per_image_on_single_full_crop(self):
        image = ImagePlanes.from_array(make_natural(32, 32, seed=6))
        cfg = config(steps=10, crop_size=32, batch_size=1, mode=TrainMode.PER_IMAGE_Q)
        per_image = train_per_image(image, 1e-2, cfg)
        corpus = train_qtables_corpus([image], 1e-2, cfg)
        np.testing.assert_array_equal(per_image.params.tables.luma, corpus.params.tables.luma)
        np.testing.assert_array_equal(per_image.params.tables.chroma, corpus.params.tables.chroma)
        assert corpus.mode is TrainMode.CORPUS_Q

    def test_small_images_skipped(self):
        dataset = [
            ImagePlanes.from_array(make_natural(16, 16)),
            ImagePlanes.from_array(make_natural(40, 40, seed=1)),
        ]
        result = train_qtables_corpus(dataset, 1e-2, config(steps=3, crop_size=32, batch_size=2))
        assert result.params.attention is None

    def test_no_usable_image(self):
        dataset = [ImagePlanes.from_array(make_natural(16, 16))]
        with pytest.raises(ValueError):
            train_qtables_corpus(dataset, 1e-2, config(steps=3, crop_size=32))

    def test_seed_changes_tables(self):
        dataset = [ImagePlanes.from_array(make_natural(48, 48, seed=i)) for i in range(2)]
        a = train_qtables_corpus(dataset, 1e-2, config(steps=5, crop_size=16, batch_size=2, seed=0))
        b = train_qtables_corpus(dataset, 1e-2, config(steps=5, crop_size=16, batch_size=2, seed=1))
        assert not np.array_equal(a.params.tables.luma, b.params.tables.luma)


@pytest.mark.slow
class TestEndToEnd:

    def test_lambda_controls_rate(self):
        image = ImagePlanes.from_array(make_natural(64, 64, seed=8))
        cfg = config(steps=300, log_every=100, mode=TrainMode.PER_IMAGE_QA)
        sizes = {}
        for lam in (1e-4, 1e-1):
            params = train_per_image(image, lam, cfg).params
            result = encode_image(image, params.tables, params.attention_stack(8, 8))
            sizes[lam] = result.file.size_bytes
        assert sizes[1e-4] < sizes[1e-1]

    def test_distortion_only_beats_quality_90(self):
        image = ImagePlanes.from_array(make_natural(64, 64, seed=9))
        cfg = config(steps=200, log_every=100, mode=TrainMode.PER_IMAGE_Q)
        cfg = cfg.model_copy(update={"weights": LossWeights(**{"lambda": 1e-1}, alpha=0.0, beta=0.0)})
        params = train_per_image(image, 1e-1, cfg).params
        ours = encode_image(image, params.tables)
        baseline = encode_baseline(image, 90)
        ours_mse = mse(image, reconstruct(ours.blocks, ours.tables, 64, 64))
        baseline_mse = mse(image, reconstruct(baseline.blocks, baseline.tables, 64, 64))
        assert ours_mse <= baseline_mse
