"""
Tests for the multi-step cascade decision rule and the ensemble baselines
"""
import numpy as np
import pytest
from scipy.special import expit, logit

from anomaly import IsolationForestConfig, iforest_train
from cascade import (
    CascadeConfig,
    Composite,
    EnsembleSystem,
    InlierGate,
    Label,
    NegThreshold,
    SingleModelSystem,
    ThresholdGE,
    build_deeptrust,
    build_multistep,
    classify,
    ensemble_average,
    evaluate,
    label_for,
)
from features import SparseBinaryVector
from mlp import Prediction
from utils import ConfigurationError, DataError

D = 12
X = SparseBinaryVector((1, 5), D)


class FixedModel:
    """Constant detector that counts how often it is queried."""

    def __init__(self, probability, embedding=(0.0, 0.0), input_dim=D):
        self.probability = probability
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.input_dim = input_dim
        self.calls = 0

    @property
    def embedding_size(self):
        return self.embedding.shape[0]

    def predict(self, x):
        self.calls += 1
        return Prediction(self.probability, float(logit(self.probability)), self.embedding)


class LinearModel:
    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(size=D)
        self.bias = float(rng.normal())
        self.input_dim = D
        self.calls = 0

    def predict(self, x):
        self.calls += 1
        z = float(self.weights @ x.to_dense() + self.bias)
        return Prediction(float(expit(z)), z, np.array([z]))


@pytest.fixture(scope="module")
def anomaly_model():
    points = np.random.default_rng(0).normal(size=(400, 2))
    return iforest_train(points, IsolationForestConfig(n_trees=50, subsample_size=64, seed=1))


def naive_evaluate(cascade, x):
    predictions = [model.predict(x) for model in cascade.slots]
    for position, condition in enumerate(cascade.conditions):
        if condition.holds(lambda slot: predictions[slot]):
            return predictions[position].probability, position + 1
    return predictions[-1].probability, len(cascade.slots)


def random_condition(rng, n_slots, depth=0):
    kind = rng.integers(0, 3 if depth < 2 else 2)
    slot = int(rng.integers(0, n_slots))
    sigma = float(rng.random())
    if kind == 0:
        return ThresholdGE(slot, sigma)
    if kind == 1:
        return NegThreshold(slot, sigma)
    children = tuple(random_condition(rng, n_slots, depth + 1) for _ in range(int(rng.integers(1, 4))))
    return Composite("or" if rng.random() < 0.5 else "and", children)


def random_cascade(rng, pool):
    n_slots = int(rng.integers(1, 5))
    slots = tuple(pool[int(rng.integers(0, len(pool)))] for _ in range(n_slots))
    conditions = tuple(random_condition(rng, n_slots) for _ in range(n_slots - 1))
    return CascadeConfig(slots, conditions, threshold=float(rng.random()))


class TestEvaluate:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(42)
        pool = [LinearModel(seed) for seed in range(3)]
        for _ in range(20):
            cascade = random_cascade(rng, pool)
            for _ in range(1000):
                x = SparseBinaryVector.from_dense(rng.random(D) < 0.3)
                decision = evaluate(cascade, x)
                score, stage = naive_evaluate(cascade, x)
                assert decision.score == score
                assert decision.deciding_stage == stage
                assert decision.label == label_for(score, cascade.threshold)

    def test_aliased_model_runs_once(self):
        strong, weak = FixedModel(0.3), FixedModel(0.2)
        cascade = CascadeConfig((strong, weak, strong), (ThresholdGE(0, 0.78), ThresholdGE(1, 0.5)))
        decision = evaluate(cascade, X)
        assert decision.deciding_stage == 3
        assert strong.calls == 1
        assert weak.calls == 1

    def test_first_condition_short_circuits(self):
        strong, weak = FixedModel(0.9), FixedModel(0.2)
        cascade = CascadeConfig((strong, weak, strong), (ThresholdGE(0, 0.78), ThresholdGE(1, 0.5)))
        decision = evaluate(cascade, X)
        assert decision.deciding_stage == 1
        assert decision.score == 0.9
        assert weak.calls == 0
        assert decision.stage_scores == (0.9, None, 0.9)

    def test_single_slot_cascade(self):
        model = FixedModel(0.5)
        cascade = CascadeConfig((model,), ())
        assert evaluate(cascade, X).deciding_stage == 1
        assert classify(cascade, X) == Label.MALWARE

    def test_threshold_is_inclusive(self):
        assert label_for(0.5, 0.5) == Label.MALWARE
        assert label_for(0.4999, 0.5) == Label.GOODWARE

    def test_dimension_mismatch(self):
        cascade = CascadeConfig((FixedModel(0.5),), ())
        with pytest.raises(DataError):
            evaluate(cascade, SparseBinaryVector((1,), D + 1))


class TestConfigValidation:
    def test_condition_count(self):
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5), FixedModel(0.5)), ())

    def test_slot_reference(self):
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5), FixedModel(0.5)), (ThresholdGE(2, 0.5),))

    def test_sigma_and_threshold_ranges(self):
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5), FixedModel(0.5)), (ThresholdGE(0, 1.5),))
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5),), (), threshold=-0.1)

    def test_models_must_share_input_dimension(self):
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5), FixedModel(0.5, input_dim=D + 1)), (ThresholdGE(0, 0.5),))

    def test_empty_composite_rejected(self):
        with pytest.raises(ConfigurationError):
            CascadeConfig((FixedModel(0.5), FixedModel(0.5)), (Composite("or", ()),))

    def test_anomaly_embedding_size_checked(self, anomaly_model):
        weak = FixedModel(0.2, embedding=(0.0, 0.0, 0.0))
        with pytest.raises(ConfigurationError):
            CascadeConfig((weak, weak), (InlierGate(0, anomaly_model),))
        with pytest.raises(ConfigurationError):
            build_multistep(FixedModel(0.5), weak, anomaly_model)


class TestMultiStep:
    def test_available_under_both_names(self, anomaly_model):
        strong, weak = FixedModel(0.8), FixedModel(0.1)
        a = build_deeptrust(strong, weak, anomaly_model, sigma1=0.7)
        b = build_multistep(strong, weak, anomaly_model, sigma1=0.7)
        assert a.slots == b.slots
        assert a.slots[0] is a.slots[2]
        assert evaluate(a, X) == evaluate(b, X)

    def test_strong_confident_decides_first(self, anomaly_model):
        strong, weak = FixedModel(0.8), FixedModel(0.1)
        decision = evaluate(build_multistep(strong, weak, anomaly_model), X)
        assert decision.deciding_stage == 1
        assert decision.label == Label.MALWARE

    def test_weak_positive_decides_second(self, anomaly_model):
        strong, weak = FixedModel(0.6), FixedModel(0.55)
        decision = evaluate(build_multistep(strong, weak, anomaly_model), X)
        assert decision.deciding_stage == 2
        assert decision.score == 0.55

    def test_inlier_benign_weak_decides_second(self, anomaly_model):
        strong, weak = FixedModel(0.6), FixedModel(0.1, embedding=(0.0, 0.0))
        decision = evaluate(build_multistep(strong, weak, anomaly_model), X)
        assert decision.deciding_stage == 2
        assert decision.label == Label.GOODWARE

    def test_anomalous_benign_weak_falls_back_to_strong(self, anomaly_model):
        strong, weak = FixedModel(0.6), FixedModel(0.1, embedding=(9.0, 9.0))
        decision = evaluate(build_multistep(strong, weak, anomaly_model), X)
        assert decision.deciding_stage == 3
        assert decision.score == 0.6
        assert strong.calls == 1

    def test_sigma_recorded(self, anomaly_model):
        cascade = build_multistep(FixedModel(0.5), FixedModel(0.5), anomaly_model)
        assert cascade.conditions[0] == ThresholdGE(0, 0.78)
        assert cascade.slots[0] is cascade.slots[2]


class TestBaselines:
    def test_ensemble_average(self):
        verdict = ensemble_average([FixedModel(0.2), FixedModel(0.7)], X)
        assert verdict.score == pytest.approx(0.45)
        assert verdict.label == Label.GOODWARE

    def test_ensemble_needs_models(self):
        with pytest.raises(ConfigurationError):
            ensemble_average([], X)

    def test_systems(self):
        single = SingleModelSystem(FixedModel(0.6))
        assert single.score(X) == 0.6
        assert single.label(X) == Label.MALWARE
        ensemble = EnsembleSystem((FixedModel(0.6), FixedModel(0.2)), threshold=0.35)
        assert ensemble.label(X) == Label.MALWARE
