"""
Tests for the numpy detector network: gradients, dropout, Adam and training
"""
import math

import numpy as np
import pytest
from scipy.special import expit

from features import SynthSpec, synth_generate
from mlp import (
    MlpConfig,
    adam_step,
    backward,
    forward_batch,
    init_params,
    loss_weighted_bce,
    predict_batch,
    train,
)
from utils import DataError, TraceError

H = 1e-4


def small_config(**overrides):
    values = dict(hidden_sizes=[5, 4], dropout_rate=0.0, pos_class_weight=2.5, weight_decay=0.0, seed=0)
    values.update(overrides)
    return MlpConfig(**values)


def batch_loss(model, inputs, targets):
    logits = forward_batch(model, inputs, mode="infer").logits
    return float(np.mean(loss_weighted_bce(expit(logits), targets, model.config.pos_class_weight)))


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_parameter_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        config = small_config(seed=seed, activation="leaky_relu" if seed % 2 else "relu")
        model = init_params(config, 6)
        inputs = rng.normal(size=(3, 6))
        targets = np.array([1.0, 0.0, 0.4])
        grads = backward(model, forward_batch(model, inputs, mode="train"), targets)

        for param, analytic in zip(model.parameters(), grads.parameters()):
            numeric = np.zeros_like(param)
            for index in np.ndindex(param.shape):
                original = param[index]
                param[index] = original + H
                up = batch_loss(model, inputs, targets)
                param[index] = original - H
                down = batch_loss(model, inputs, targets)
                param[index] = original
                numeric[index] = (up - down) / (2 * H)
            assert relative_error(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_input_gradients_are_per_sample(self, seed):
        rng = np.random.default_rng(100 + seed)
        model = init_params(small_config(seed=seed), 6)
        inputs = rng.normal(size=(3, 6))
        targets = np.array([1.0, 0.0, 1.0])
        grads = backward(model, forward_batch(model, inputs, mode="train"), targets)

        for row in range(3):
            numeric = np.zeros(6)
            for column in range(6):
                shifted = inputs[row:row + 1].copy()
                shifted[0, column] += H
                up = batch_loss(model, shifted, targets[row:row + 1])
                shifted[0, column] -= 2 * H
                down = batch_loss(model, shifted, targets[row:row + 1])
                numeric[column] = (up - down) / (2 * H)
            assert relative_error(grads.inputs[row], numeric) < 1e-4

    def test_input_gradients_restricted_to_indices(self):
        model = init_params(small_config(), 6)
        inputs = np.random.default_rng(0).normal(size=(2, 6))
        trace = forward_batch(model, inputs, mode="train")
        full = backward(model, trace, [1.0, 0.0])
        subset = backward(model, trace, [1.0, 0.0], input_indices=np.array([1, 4]))
        assert subset.inputs.shape == (2, 2)
        assert np.allclose(subset.inputs, full.inputs[:, [1, 4]])


class TestTraces:
    def test_backward_requires_train_mode(self):
        model = init_params(small_config(), 6)
        with pytest.raises(TraceError):
            backward(model, forward_batch(model, np.ones((1, 6)), mode="infer"), [1.0])

    def test_stale_trace_rejected(self):
        model = init_params(small_config(), 6)
        trace = forward_batch(model, np.ones((1, 6)), mode="train")
        adam_step(model, backward(model, trace, [1.0]))
        with pytest.raises(TraceError):
            backward(model, trace, [1.0])

    def test_dimension_mismatch(self):
        model = init_params(small_config(), 6)
        with pytest.raises(DataError):
            forward_batch(model, np.ones((1, 7)))


class TestDropout:
    def test_inverted_dropout_preserves_expected_activation(self):
        model = init_params(small_config(hidden_sizes=[3], dropout_rate=0.5), 6)
        sample = np.random.default_rng(1).normal(size=(1, 6))
        clean = forward_batch(model, sample, mode="infer").post_activations[0][0]
        repeated = np.repeat(sample, 10000, axis=0)
        noisy = forward_batch(model, repeated, mode="train", rng=np.random.default_rng(2)).post_activations[0]
        standard_error = noisy.std(axis=0, ddof=1) / np.sqrt(noisy.shape[0])
        assert np.all(np.abs(noisy.mean(axis=0) - clean) <= 3 * standard_error + 1e-12)

    def test_train_mode_dropout_needs_rng(self):
        model = init_params(small_config(dropout_rate=0.5), 6)
        with pytest.raises(ValueError):
            forward_batch(model, np.ones((1, 6)), mode="train")

    def test_successive_masks_differ_on_a_shared_stream(self):
        model = init_params(small_config(hidden_sizes=[16], dropout_rate=0.5), 6)
        rng = np.random.default_rng(5)
        first = forward_batch(model, np.ones((1, 6)), mode="train", rng=rng).dropout_masks[0]
        second = forward_batch(model, np.ones((1, 6)), mode="train", rng=rng).dropout_masks[0]
        assert not np.array_equal(first, second)

    def test_inference_is_deterministic(self):
        model = init_params(small_config(dropout_rate=0.7), 6)
        sample = np.ones((2, 6))
        assert np.array_equal(forward_batch(model, sample).logits, forward_batch(model, sample).logits)


class TestAdam:
    def test_first_step_moves_each_parameter_by_learning_rate(self):
        config = small_config(learning_rate=0.01)
        model = init_params(config, 6)
        before = [p.copy() for p in model.parameters()]
        inputs = np.random.default_rng(0).normal(size=(4, 6))
        grads = backward(model, forward_batch(model, inputs, mode="train"), [1.0, 0.0, 1.0, 0.0])
        adam_step(model, grads)
        for old, new, grad in zip(before, model.parameters(), grads.parameters()):
            moved = np.abs(new - old)[np.abs(grad) > 1e-4]
            assert np.allclose(moved, 0.01, rtol=1e-3)
        assert model.step == 1

    def test_weight_decay_shrinks_parameters_without_gradient(self):
        model = init_params(small_config(weight_decay=0.5, learning_rate=0.1), 6)
        before = model.weights[0].copy()
        grads = backward(model, forward_batch(model, np.zeros((1, 6)), mode="train"), [0.0])
        adam_step(model, grads)
        assert np.allclose(model.weights[0], before * (1 - 0.05))


class TestLoss:
    def test_weighted_bce_values(self):
        assert loss_weighted_bce(0.5, 1.0, 2.0) == pytest.approx(2 * math.log(2))
        assert loss_weighted_bce(0.5, 0.0, 2.0) == pytest.approx(math.log(2))

    def test_probability_is_clamped(self):
        assert math.isfinite(loss_weighted_bce(1.0, 0.0))
        assert math.isfinite(loss_weighted_bce(0.0, 1.0, 8.5))


TRAIN_DATA = synth_generate(SynthSpec(d=60, n_samples=400, malware_ratio=0.3), 0)


class TestTraining:
    def test_training_is_bit_reproducible(self):
        config = MlpConfig(hidden_sizes=[16], epochs=3, seed=4)
        a = train(TRAIN_DATA, config)
        b = train(TRAIN_DATA, config)
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)
        assert a.history == b.history

    def test_restores_best_validation_epoch(self):
        model = train(TRAIN_DATA, MlpConfig(hidden_sizes=[16], epochs=4, seed=1))
        assert len(model.history) == 4
        assert model.best_epoch == int(np.argmax(model.history))

    def test_learns_planted_signature(self):
        dataset = synth_generate(SynthSpec(d=200, n_samples=1000, malware_ratio=0.1), 7)
        model = train(dataset, MlpConfig(seed=0))
        assert max(model.history) >= 0.95

    def test_zero_epochs_returns_initial_parameters(self):
        config = MlpConfig(hidden_sizes=[8], epochs=0, seed=2)
        model = train(TRAIN_DATA, config)
        fresh = init_params(config, TRAIN_DATA.dimension)
        assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), fresh.parameters()))

    def test_predictions_carry_embeddings(self):
        model = init_params(MlpConfig(hidden_sizes=[16, 3]), TRAIN_DATA.dimension)
        predictions = predict_batch(model, TRAIN_DATA.samples[:5])
        assert len(predictions) == 5
        assert predictions[0].embedding.shape == (3,)
        assert 0.0 <= predictions[0].probability <= 1.0
        assert model.predict(TRAIN_DATA.samples[0]).logit == pytest.approx(predictions[0].logit)

    def test_single_class_training_rejected(self):
        benign = TRAIN_DATA.subset([i for i, y in enumerate(TRAIN_DATA.hard_labels()) if y == 0])
        with pytest.raises(DataError):
            train(benign, MlpConfig(hidden_sizes=[4], epochs=1))
