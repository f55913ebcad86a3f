"""
Tests for batch-replay adversarial training and the perturbation update
"""
import numpy as np
import pytest

from advtrain import AdvTrainConfig, SelectionMask, adv_train, check_budget, select_features, update_delta
from features import ManipulabilityMask, Perturbation, SynthSpec, apply_perturbation, synth_generate
from mlp import MlpConfig, train
from utils import ConfigurationError, InvariantViolation

DATA = synth_generate(SynthSpec(d=40, n_samples=240, malware_ratio=0.25), 0)
MLP = MlpConfig(hidden_sizes=[16, 8], dropout_rate=0.3, epochs=2, batch_size=32, seed=3)


class TestSelectFeatures:
    def test_topk_orders_by_magnitude_then_index(self):
        g = np.array([0.1, -0.5, 0.5, 0.2])
        rng = np.random.default_rng(0)
        assert select_features("topk", [0, 1, 2, 3], g, 2, rng).indices == (1, 2)
        assert select_features("topk", [0, 1, 2, 3], g, 1, rng).indices == (1,)
        assert select_features("topk", [0, 3], g, 1, rng).indices == (3,)

    def test_random_is_seeded_subset(self):
        g = np.zeros(10)
        eligible = [1, 3, 5, 7, 9]
        first = select_features("random", eligible, g, 3, np.random.default_rng(4))
        second = select_features("random", eligible, g, 3, np.random.default_rng(4))
        assert first == second
        assert len(first) == 3
        assert set(first.indices) <= set(eligible)

    def test_k_larger_than_eligible_takes_everything(self):
        mask = select_features("topk", [2, 4], np.ones(5), 10, np.random.default_rng(0))
        assert mask.indices == (2, 4)

    def test_none_selects_nothing(self):
        assert len(select_features("none", [0, 1], np.ones(2), 2, np.random.default_rng(0))) == 0

    def test_empty_eligible_set_rejected(self):
        with pytest.raises(ConfigurationError):
            select_features("topk", [], np.ones(3), 1, np.random.default_rng(0))

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigurationError):
            select_features("fgsm", [0], np.ones(1), 1, np.random.default_rng(0))


class TestUpdateDelta:
    def test_sign_step_and_cancellation(self):
        delta = Perturbation({1: 1}, 4)
        g = np.array([0.0, -0.5, 0.5, 0.0])
        updated = update_delta(delta, g, SelectionMask((1, 2)), 4, np.random.default_rng(0))
        assert updated.entries == {2: 1}

    def test_values_are_clipped(self):
        delta = Perturbation({2: 1, 3: -1}, 4)
        g = np.array([0.0, 0.0, 3.0, -3.0])
        updated = update_delta(delta, g, SelectionMask((2, 3)), 4, np.random.default_rng(0))
        assert updated.entries == {2: 1, 3: -1}

    def test_zero_gradient_leaves_entry(self):
        delta = Perturbation({0: -1}, 3)
        updated = update_delta(delta, np.zeros(3), SelectionMask((0, 1)), 3, np.random.default_rng(0))
        assert updated.entries == {0: -1}

    def test_excess_nonzeros_dropped_at_random(self):
        delta = Perturbation({0: 1, 1: 1, 2: -1}, 6)
        g = np.array([0.0, 0.0, 0.0, 1.0, 0.0, -1.0])
        updated = update_delta(delta, g, SelectionMask((3, 5)), 2, np.random.default_rng(1))
        assert updated.nonzero_count == 2
        assert set(updated.entries) <= {0, 1, 2, 3, 5}

    def test_check_budget(self):
        check_budget(Perturbation({0: 1, 1: -1}, 3), 2)
        with pytest.raises(InvariantViolation):
            check_budget(Perturbation({0: 1, 1: -1, 2: 1}, 3), 2)


class TestAdvTrain:
    def test_invariants_hold_after_every_replay_step(self):
        seen = []

        def on_replay(delta, count):
            assert delta.nonzero_count <= 6
            assert set(delta.entries.values()) <= {-1, 1}
            perturbed = apply_perturbation(DATA.samples[count % len(DATA)], delta)
            assert all(0 <= i < DATA.dimension for i in perturbed.active)
            seen.append(count)

        config = AdvTrainConfig(m=3, k=6, strategy="topk", seed=1)
        model = adv_train(DATA, MLP, config, on_replay=on_replay)
        assert seen == list(range(1, len(seen) + 1))
        assert len(seen) > 0
        assert model.final_delta.nonzero_count <= 6

    def test_random_strategy_respects_budget(self):
        config = AdvTrainConfig(m=2, k=4, strategy="random", seed=2)
        model = adv_train(DATA, MLP, config)
        assert model.final_delta.nonzero_count <= 4

    def test_zero_perturbation_matches_standard_training(self):
        config = AdvTrainConfig(m=1, k=5, strategy="none", seed=9)
        adversarial = adv_train(DATA, MLP, config)
        vanilla = train(DATA, MLP)
        for p, q in zip(adversarial.parameters(), vanilla.parameters()):
            assert np.array_equal(p, q)
        assert adversarial.history == vanilla.history
        assert adversarial.final_delta.nonzero_count == 0

    def test_eligible_categories_bound_the_perturbation(self):
        config = AdvTrainConfig(m=2, k=5, strategy="topk", eligible_categories=["code"], seed=0)
        model = adv_train(DATA, MLP, config)
        code = DATA.space.category_of(DATA.dimension - 1)
        assert all(code.start <= i < code.stop for i in model.final_delta.entries)

    def test_budget_larger_than_eligible_set_rejected(self):
        config = AdvTrainConfig(k=25, eligible_categories=["manifest"])
        with pytest.raises(ConfigurationError):
            adv_train(DATA, MLP, config)

    def test_outer_epochs_scale_with_replay(self):
        config = AdvTrainConfig(m=2, k=5, epochs=4, seed=0)
        model = adv_train(DATA, MLP, config)
        assert len(model.history) == 2

    def test_deterministic_under_shared_seeds(self):
        config = AdvTrainConfig(m=2, k=5, strategy="random", seed=5)
        a = adv_train(DATA, MLP, config)
        b = adv_train(DATA, MLP, config)
        assert a.final_delta == b.final_delta
        assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestAddOnlyFeatures:
    MASK = DATA.space.manipulability_mask()

    def test_negative_step_floored_on_add_only_index(self):
        mask = ManipulabilityMask((0, 1, 2, 3), frozenset({0, 1}), 4)
        g = np.array([-1.0, 1.0, -1.0, 0.0])
        updated = update_delta(Perturbation.zero(4), g, SelectionMask((0, 1, 2)), 4, np.random.default_rng(0), mask)
        assert updated.entries == {1: 1, 2: -1}

    def test_addition_can_still_be_cancelled(self):
        mask = ManipulabilityMask((0, 1), frozenset({0}), 2)
        updated = update_delta(Perturbation({0: 1}, 2), np.array([-2.0, 0.0]), SelectionMask((0,)), 2,
                               np.random.default_rng(0), mask)
        assert updated.entries == {}

    def test_training_never_removes_add_only_features(self):
        assert self.MASK.add_only
        violations = []

        def on_replay(delta, count):
            violations.extend(i for i, v in delta.entries.items() if v < 0 and not self.MASK.allows_removal(i))

        adv_train(DATA, MLP, AdvTrainConfig(m=2, k=10, strategy="topk", seed=0), on_replay=on_replay)
        assert violations == []

    def test_add_only_samples_keep_their_features(self):
        model = adv_train(DATA, MLP, AdvTrainConfig(m=2, k=10, strategy="random", seed=3))
        add_only = self.MASK.add_only
        for x in DATA.samples:
            kept = set(apply_perturbation(x, model.final_delta).active)
            assert {i for i in x.active if i in add_only} <= kept


class TestReplayOrder:
    def test_adversarial_gradient_uses_updated_parameters(self):
        config = AdvTrainConfig(m=2, k=10, strategy="topk", seed=0)
        ordered = adv_train(DATA, MLP, config)
        free = adv_train(DATA, MLP, config.model_copy(update={"free_replay": True}))
        assert not all(np.array_equal(p, q) for p, q in zip(ordered.parameters(), free.parameters()))

    def test_free_replay_keeps_invariants(self):
        config = AdvTrainConfig(m=3, k=6, strategy="topk", free_replay=True, seed=1)
        model = adv_train(DATA, MLP, config, on_replay=lambda delta, count: check_budget(delta, 6))
        assert model.final_delta.nonzero_count <= 6

    def test_degeneracy_holds_for_both_orders(self):
        vanilla = train(DATA, MLP)
        for free in (False, True):
            config = AdvTrainConfig(m=1, k=5, strategy="none", free_replay=free, seed=9)
            adversarial = adv_train(DATA, MLP, config)
            assert all(np.array_equal(p, q) for p, q in zip(adversarial.parameters(), vanilla.parameters()))
