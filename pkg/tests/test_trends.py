"""
Directional robustness trends on synthetic data.

These train full-size detectors on several seeds and take minutes; they are
deselected by default, run them with ``pytest -m slow``.
"""
import numpy as np
import pytest

from advtrain import AdvTrainConfig, adv_train
from attack import GaConfig, attack_dataset
from cascade import CascadeConfig, EnsembleSystem, SingleModelSystem, ThresholdGE
from evaluation import confusion, f1, tnr
from features import SynthSpec, split_dataset, synth_generate
from mlp import MlpConfig, train

pytestmark = pytest.mark.slow

SYNTH = SynthSpec(d=200, n_samples=2000, malware_ratio=0.1)
ATTACK = GaConfig()
BUDGET = 10
REPLAY = 2


def split(seed):
    return split_dataset(synth_generate(SYNTH, seed), 0.2, seed)


def clean_counts(system, dataset):
    return confusion([int(system.label(x)) for x in dataset.samples], dataset.hard_labels())


def tpr_under_attack(system, train_set, test_set, seed):
    summary = attack_dataset(system, test_set.malware(), [BUDGET], train_set.goodware(),
                             train_set.space, ATTACK.model_copy(update={"seed": seed}))
    return summary.tpr[BUDGET]


@pytest.fixture(scope="module")
def trained():
    runs = []
    for seed in range(10):
        train_set, test_set = split(seed)
        config = MlpConfig(seed=seed)
        vanilla = train(train_set, config)
        robust = adv_train(train_set, config, AdvTrainConfig(m=REPLAY, k=BUDGET, strategy="topk",
                                                             epochs=REPLAY * config.epochs, seed=seed))
        runs.append((seed, train_set, test_set, vanilla, robust))
    return runs


class TestTrends:
    def test_adversarial_training_keeps_clean_f1(self):
        for seed in range(5):
            train_set, test_set = split(seed)
            config = MlpConfig(seed=seed)
            vanilla = SingleModelSystem(train(train_set, config))
            robust = SingleModelSystem(adv_train(train_set, config, AdvTrainConfig(m=2, k=10, strategy="topk", seed=seed)))
            f1_vanilla = f1(clean_counts(vanilla, test_set))
            f1_robust = f1(clean_counts(robust, test_set))
            assert f1_vanilla >= 0.9 and f1_robust >= 0.9
            assert abs(f1_vanilla - f1_robust) <= 0.05

    def test_adversarial_training_raises_tpr_under_attack(self, trained):
        wins = 0
        for seed, train_set, test_set, vanilla, robust in trained:
            robust_tpr = tpr_under_attack(SingleModelSystem(robust), train_set, test_set, seed)
            vanilla_tpr = tpr_under_attack(SingleModelSystem(vanilla), train_set, test_set, seed)
            wins += int(robust_tpr > vanilla_tpr)
        assert wins >= 8

    def test_cascade_at_least_as_robust_as_ensemble(self, trained):
        wins = 0
        tnr_gaps = []
        for seed, train_set, test_set, vanilla, robust in trained:
            cascade = CascadeConfig((robust, vanilla, robust), (ThresholdGE(0, 0.78), ThresholdGE(1, 0.5)))
            ensemble = EnsembleSystem((robust, vanilla))
            wins += int(tpr_under_attack(cascade, train_set, test_set, seed)
                        >= tpr_under_attack(ensemble, train_set, test_set, seed))
            tnr_gaps.append(abs(tnr(clean_counts(cascade, test_set)) - tnr(clean_counts(ensemble, test_set))))
        assert wins >= 8
        assert float(np.max(tnr_gaps)) <= 0.01
