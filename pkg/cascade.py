"""
Multi-step decision rule over ordered detectors.

A cascade holds n detector slots, n - 1 activation conditions and a decision
threshold t. Conditions are tested in order; the first that fires hands the
verdict to its stage's detector, otherwise the last slot decides. Slots may
alias the same model, and every model runs at most once per input.

Slots are 0-based positions; ``deciding_stage`` is reported 1-based.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Literal, Optional, Protocol, Sequence, Tuple, Union

from anomaly import IsolationForestModel, anomaly_signal
from features import SparseBinaryVector
from utils import ConfigurationError, DataError

logger = logging.getLogger(__name__)


class Label(IntEnum):
    GOODWARE = 0
    MALWARE = 1


def label_for(score: float, threshold: float) -> Label:
    """score >= t is malware."""
    return Label.MALWARE if score >= threshold else Label.GOODWARE


class DecisionSystem(Protocol):
    """The only surface an attacker or evaluator gets: a score and a label."""

    def score(self, x: SparseBinaryVector) -> float: ...

    def label(self, x: SparseBinaryVector) -> Label: ...


# ── Conditions ──────────────────────────────────────────────────────────────

Lookup = Callable[[int], "object"]


@dataclass(frozen=True)
class ThresholdGE:
    slot: int
    sigma: float

    def holds(self, lookup: Lookup) -> bool:
        return lookup(self.slot).probability >= self.sigma


@dataclass(frozen=True)
class NegThreshold:
    slot: int
    sigma: float

    def holds(self, lookup: Lookup) -> bool:
        return lookup(self.slot).probability < self.sigma


@dataclass(frozen=True)
class InlierGate:
    """Fires when the slot leans benign and a(x) = 1 on that slot's embedding."""

    slot: int
    anomaly: IsolationForestModel

    def holds(self, lookup: Lookup) -> bool:
        prediction = lookup(self.slot)
        if prediction.probability >= 0.5:
            return False
        return anomaly_signal(self.anomaly, prediction.embedding) == 1


@dataclass(frozen=True)
class Composite:
    combinator: Literal["or", "and"]
    conditions: Tuple["Condition", ...]

    def holds(self, lookup: Lookup) -> bool:
        if self.combinator == "or":
            return any(c.holds(lookup) for c in self.conditions)
        return all(c.holds(lookup) for c in self.conditions)


Condition = Union[ThresholdGE, NegThreshold, InlierGate, Composite]


def _walk(condition: Condition):
    yield condition
    if isinstance(condition, Composite):
        for child in condition.conditions:
            yield from _walk(child)


# ── Cascade ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CascadeDecision:
    score: float
    deciding_stage: int
    label: Label
    stage_scores: Tuple[Optional[float], ...] = field(default=())


@dataclass(frozen=True)
class CascadeConfig:
    slots: Tuple[object, ...]
    conditions: Tuple[Condition, ...]
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        n = len(self.slots)
        if n < 1:
            raise ConfigurationError("a cascade needs at least one detector slot")
        if len(self.conditions) != n - 1:
            raise ConfigurationError(f"{n} slots need {n - 1} conditions, got {len(self.conditions)}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"decision threshold must lie in [0, 1], got {self.threshold}")
        dims = {getattr(m, "input_dim", None) for m in self.slots} - {None}
        if len(dims) > 1:
            raise ConfigurationError(f"slot models disagree on input dimension: {sorted(dims)}")
        for top in self.conditions:
            for condition in _walk(top):
                if isinstance(condition, Composite):
                    if condition.combinator not in ("or", "and") or not condition.conditions:
                        raise ConfigurationError("composite conditions need 'or'/'and' and at least one child")
                    continue
                if not 0 <= condition.slot < n:
                    raise ConfigurationError(f"condition references missing slot {condition.slot}")
                if isinstance(condition, (ThresholdGE, NegThreshold)) and not 0.0 <= condition.sigma <= 1.0:
                    raise ConfigurationError(f"sigma must lie in [0, 1], got {condition.sigma}")
                if isinstance(condition, InlierGate):
                    size = getattr(self.slots[condition.slot], "embedding_size", None)
                    if size is not None and size != condition.anomaly.embedding_size:
                        raise ConfigurationError(
                            f"anomaly model expects embeddings of length {condition.anomaly.embedding_size}, "
                            f"slot {condition.slot} produces {size}"
                        )

    @property
    def input_dim(self) -> Optional[int]:
        return next((m.input_dim for m in self.slots if hasattr(m, "input_dim")), None)

    def score(self, x: SparseBinaryVector) -> float:
        return evaluate(self, x).score

    def label(self, x: SparseBinaryVector) -> Label:
        return evaluate(self, x).label


def evaluate(cascade: CascadeConfig, x: SparseBinaryVector) -> CascadeDecision:
    """Apply the multi-step rule to one sample."""
    dimension = cascade.input_dim
    if dimension is not None and x.dimension != dimension:
        raise DataError(f"sample dimension {x.dimension} != cascade input dimension {dimension}")
    cache: Dict[int, object] = {}

    def lookup(slot: int):
        model = cascade.slots[slot]
        key = id(model)
        if key not in cache:
            cache[key] = model.predict(x)
        return cache[key]

    stage = len(cascade.slots)
    for position, condition in enumerate(cascade.conditions):
        if condition.holds(lookup):
            stage = position + 1
            break
    score = lookup(stage - 1).probability
    stage_scores = tuple(
        cache[id(m)].probability if id(m) in cache else None for m in cascade.slots
    )
    return CascadeDecision(score, stage, label_for(score, cascade.threshold), stage_scores)


def classify(cascade: CascadeConfig, x: SparseBinaryVector) -> Label:
    return evaluate(cascade, x).label


def build_multistep(f_strong, f_weak, anomaly_model: IsolationForestModel,
                    sigma1: float = 0.78, threshold: float = 0.5) -> CascadeConfig:
    """
    F = [strong, weak, strong]; C1 = strong >= sigma1;
    C2 = weak >= 0.5 OR (weak < 0.5 AND a(x) = 1).
    """
    size = getattr(f_weak, "embedding_size", None)
    if size is not None and size != anomaly_model.embedding_size:
        raise ConfigurationError(
            f"anomaly model embedding length {anomaly_model.embedding_size} != weak detector embedding length {size}"
        )
    cascade = CascadeConfig(
        slots=(f_strong, f_weak, f_strong),
        conditions=(
            ThresholdGE(0, sigma1),
            Composite("or", (ThresholdGE(1, 0.5), InlierGate(1, anomaly_model))),
        ),
        threshold=threshold,
    )
    logger.info("Built multi-step cascade: sigma1=%.2f t=%.2f a(x) polarity=%s",
                sigma1, threshold, anomaly_model.polarity)
    return cascade


build_deeptrust = build_multistep


# ── Baselines ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EnsembleVerdict:
    score: float
    label: Label


def ensemble_average(models: Sequence[object], x: SparseBinaryVector, threshold: float = 0.5) -> EnsembleVerdict:
    """Unweighted mean of the models' probabilities."""
    if not models:
        raise ConfigurationError("ensemble_average needs at least one model")
    for model in models:
        dimension = getattr(model, "input_dim", None)
        if dimension is not None and dimension != x.dimension:
            raise DataError(f"sample dimension {x.dimension} != model input dimension {dimension}")
    # fsum: the mean must not depend on model order
    score = math.fsum(m.predict(x).probability for m in models) / len(models)
    return EnsembleVerdict(score, label_for(score, threshold))


@dataclass(frozen=True)
class SingleModelSystem:
    model: object
    threshold: float = 0.5

    def score(self, x: SparseBinaryVector) -> float:
        return self.model.predict(x).probability

    def label(self, x: SparseBinaryVector) -> Label:
        return label_for(self.score(x), self.threshold)


@dataclass(frozen=True)
class EnsembleSystem:
    models: Tuple[object, ...]
    threshold: float = 0.5

    def score(self, x: SparseBinaryVector) -> float:
        return ensemble_average(self.models, x, self.threshold).score

    def label(self, x: SparseBinaryVector) -> Label:
        return label_for(self.score(x), self.threshold)
