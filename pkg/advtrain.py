"""
Tabular adversarial training for binary features with batch replay.

One perturbation delta in {-1,0,1}^d is shared by every sample. For each
minibatch the model takes ``m`` replay steps on clip(x + delta, 0, 1); each
step updates theta with Adam, then takes g_adv from a second backward pass at
the updated theta and pushes delta along sign(g_adv) on the selected
features, keeping at most ``k`` of them nonzero. Add-only features never
receive a negative entry. With ``free_replay`` g_adv is read from the
parameter pass instead, at the pre-update theta, saving one pass per step.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from features import LabeledDataset, ManipulabilityMask, Perturbation, apply_perturbation, samples_to_csr
from mlp import Batch, MlpConfig, MlpModel, adam_step, backward, fit, forward_batch
from utils import ConfigurationError, InvariantViolation, make_rng

logger = logging.getLogger(__name__)

Strategy = Literal["topk", "random", "none"]


class AdvTrainConfig(BaseModel):
    m: int = Field(default=10, ge=1, description="batch replay steps")
    k: int = Field(default=100, ge=1, description="max modified features")
    strategy: Strategy = "topk"
    epochs: Optional[int] = Field(default=None, ge=0, description="N_ep; falls back to mlp.epochs")
    reset_delta: bool = False
    free_replay: bool = Field(default=False, description="take g_adv from the parameter pass (pre-update theta)")
    eligible_categories: Optional[List[str]] = None
    seed: int = 0


@dataclass(frozen=True)
class SelectionMask:
    indices: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


def select_features(strategy: str, eligible, g_adv: np.ndarray, k: int, rng: np.random.Generator) -> SelectionMask:
    """
    gamma for one replay step.

    topk: the k eligible indices with the largest |g_adv| (ties -> lower index).
    random: a uniform k-subset of the eligible indices.
    none: empty mask.
    """
    eligible = np.asarray(eligible, dtype=np.int64)
    if eligible.shape[0] == 0:
        raise ConfigurationError("feature selection needs a non-empty eligible set")
    if strategy == "none":
        return SelectionMask(())
    count = min(k, eligible.shape[0])
    if strategy == "topk":
        magnitude = np.abs(np.asarray(g_adv, dtype=np.float64)[eligible])
        # lexsort: last key is primary -> descending |g|, then ascending index
        order = np.lexsort((eligible, -magnitude))
        chosen = eligible[order[:count]]
    elif strategy == "random":
        chosen = rng.choice(eligible, size=count, replace=False)
    else:
        raise ConfigurationError(f"unknown selection strategy {strategy!r}")
    return SelectionMask(tuple(sorted(int(i) for i in chosen)))


def update_delta(delta: Perturbation, g_adv: np.ndarray, gamma: SelectionMask, k: int,
                 rng: np.random.Generator, mask: Optional[ManipulabilityMask] = None) -> Perturbation:
    """
    delta + sign(g_adv) on gamma, randomly zero the excess over k nonzeros, then clip to [-1, 1].

    With ``mask``, entries at add-only indices are floored at 0.
    """
    values: Dict[int, int] = dict(delta.entries)
    for index in gamma.indices:
        step = int(np.sign(g_adv[index]))
        if step == 0:
            continue
        updated = values.get(index, 0) + step
        if updated < 0 and mask is not None and not mask.allows_removal(index):
            updated = 0
        if updated == 0:
            values.pop(index, None)
        else:
            values[index] = updated

    nonzero = sorted(values)
    excess = len(nonzero) - k
    if excess > 0:
        for index in rng.choice(np.asarray(nonzero, dtype=np.int64), size=excess, replace=False):
            del values[int(index)]

    clipped = {i: (1 if v > 0 else -1) for i, v in values.items()}
    return Perturbation(clipped, delta.dimension)


def check_budget(delta: Perturbation, k: int) -> None:
    if delta.nonzero_count > k:
        raise InvariantViolation(f"perturbation has {delta.nonzero_count} nonzeros, budget is {k}")
    if any(v not in (-1, 1) for v in delta.entries.values()):
        raise InvariantViolation("perturbation left {-1, 0, 1}")


ReplayHook = Callable[[Perturbation, int], None]


def adv_train(dataset: LabeledDataset, mlp_config: MlpConfig, adv_config: AdvTrainConfig,
              mask: Optional[ManipulabilityMask] = None, on_replay: Optional[ReplayHook] = None) -> MlpModel:
    """
    Train with the replayed global perturbation.

    The outer loop runs ceil(N_ep / m) epochs. Validation (model selection)
    uses clean inputs. ``on_replay`` sees delta after every replay step.
    """
    if mask is None:
        mask = dataset.space.manipulability_mask(adv_config.eligible_categories)
    if len(mask) == 0:
        raise ConfigurationError("the eligible feature set is empty")
    if adv_config.k > len(mask):
        raise ConfigurationError(f"k={adv_config.k} exceeds the {len(mask)} eligible features")

    eligible = mask.indices()
    total_epochs = mlp_config.epochs if adv_config.epochs is None else adv_config.epochs
    outer_epochs = math.ceil(total_epochs / adv_config.m)
    delta_rng = make_rng(adv_config.seed, 7)
    state = {"delta": Perturbation.zero(dataset.dimension), "replays": 0}

    def replay_step(model: MlpModel, batch: Batch, rng: np.random.Generator) -> None:
        if adv_config.reset_delta:
            state["delta"] = Perturbation.zero(dataset.dimension)
        for _ in range(adv_config.m):
            delta = state["delta"]
            if delta.nonzero_count:
                perturbed = [apply_perturbation(x, delta) for x in batch.samples]
                inputs = samples_to_csr(perturbed, dataset.dimension)
            else:
                inputs = batch.inputs
            trace = forward_batch(model, inputs, mode="train", rng=rng)
            grads = backward(model, trace, batch.targets, input_indices=eligible)
            adam_step(model, grads)

            g_adv = np.zeros(dataset.dimension, dtype=np.float64)
            if adv_config.strategy != "none":
                if not adv_config.free_replay:
                    trace = forward_batch(model, inputs, mode="train", rng=rng)
                    grads = backward(model, trace, batch.targets, input_indices=eligible)
                g_adv[eligible] = grads.inputs.mean(axis=0)
            gamma = select_features(adv_config.strategy, eligible, g_adv, adv_config.k, delta_rng)
            delta = update_delta(delta, g_adv, gamma, adv_config.k, delta_rng, mask)
            check_budget(delta, adv_config.k)
            state["delta"] = delta
            state["replays"] += 1
            if on_replay is not None:
                on_replay(delta, state["replays"])

    logger.info(
        "Adversarial training: m=%d k=%d strategy=%s free_replay=%s outer_epochs=%d |Gamma|=%d",
        adv_config.m, adv_config.k, adv_config.strategy, adv_config.free_replay, outer_epochs, len(mask),
    )
    model = fit(dataset, mlp_config, outer_epochs, replay_step)
    model.final_delta = state["delta"]
    logger.info("Final perturbation: %d nonzero features after %d replay steps",
                state["delta"].nonzero_count, state["replays"])
    return model
