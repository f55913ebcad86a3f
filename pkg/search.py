"""
Seeded random search over declarative hyperparameter spaces.

A space maps parameter names to a ``choice`` list, an ``int`` range or a
``float`` range (optionally on a step grid). Trials are drawn uniformly; the
highest objective wins and the earlier trial wins ties.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Annotated, Any, Callable, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from utils import make_rng

logger = logging.getLogger(__name__)


class Choice(BaseModel):
    type: Literal["choice"] = "choice"
    values: List[Any] = Field(min_length=1)

    def draw(self, rng: np.random.Generator) -> Any:
        return self.values[int(rng.integers(0, len(self.values)))]


class IntRange(BaseModel):
    type: Literal["int"] = "int"
    low: int
    high: int
    step: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_bounds(self):
        if self.high < self.low:
            raise ValueError(f"empty int range [{self.low}, {self.high}]")
        return self

    def draw(self, rng: np.random.Generator) -> int:
        count = (self.high - self.low) // self.step + 1
        return self.low + self.step * int(rng.integers(0, count))


class FloatRange(BaseModel):
    type: Literal["float"] = "float"
    low: float
    high: float
    step: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def check_bounds(self):
        if self.high < self.low:
            raise ValueError(f"empty float range [{self.low}, {self.high}]")
        return self

    def draw(self, rng: np.random.Generator) -> float:
        if self.step is None:
            return float(rng.uniform(self.low, self.high))
        count = math.floor((self.high - self.low) / self.step + 1e-9) + 1
        return round(self.low + self.step * int(rng.integers(0, count)), 10)


Parameter = Annotated[Union[Choice, IntRange, FloatRange], Field(discriminator="type")]


class SearchSpace(BaseModel):
    params: Dict[str, Parameter] = Field(min_length=1)
    trials: int = Field(default=20, ge=1)
    objective: Literal["val_f1", "objective_j"] = "val_f1"

    def sample(self, rng: np.random.Generator) -> Dict[str, Any]:
        # sorted so the draw order does not depend on file key order
        return {name: self.params[name].draw(rng) for name in sorted(self.params)}


@dataclass(frozen=True)
class Trial:
    number: int
    params: Dict[str, Any]
    objective: float


@dataclass
class SearchResult:
    best: Trial
    trials: List[Trial] = field(default_factory=list)

    @property
    def best_params(self) -> Dict[str, Any]:
        return self.best.params


def random_search(space: SearchSpace, objective: Callable[[Dict[str, Any]], float],
                  trials: Optional[int] = None, seed: int = 0,
                  on_trial: Optional[Callable[[Trial], None]] = None) -> SearchResult:
    """Evaluate ``trials`` uniformly sampled configurations and keep the argmax."""
    count = space.trials if trials is None else trials
    if count < 1:
        raise ValueError("random search needs at least one trial")
    rng = make_rng(seed)
    log: List[Trial] = []
    best: Optional[Trial] = None
    for number in range(count):
        params = space.sample(rng)
        trial = Trial(number, params, float(objective(params)))
        log.append(trial)
        if best is None or trial.objective > best.objective:
            best = trial
        logger.info("trial %d/%d %s=%.4f params=%s", number + 1, count, space.objective, trial.objective, params)
        if on_trial is not None:
            on_trial(trial)
    logger.info("Best trial %d with %s=%.4f", best.number, space.objective, best.objective)
    return SearchResult(best, log)


def default_spaces() -> Dict[str, SearchSpace]:
    """Stage search spaces: base architecture, adversarial training, teacher forest, smoothing lambda."""
    return {
        "architecture": SearchSpace(
            objective="val_f1",
            params={
                "n_layers": Choice(values=[2, 3]),
                "hidden_size_1": Choice(values=[32, 64, 128, 256]),
                "hidden_size_2": Choice(values=[32, 64, 128, 256]),
                "hidden_size_3": Choice(values=[32, 64, 128, 256]),
                "activation": Choice(values=["relu", "leaky_relu"]),
                "dropout_rate": FloatRange(low=0.0, high=0.75, step=0.05),
                "weight_decay": FloatRange(low=0.0, high=0.01),
                "pos_class_weight": FloatRange(low=1.0, high=10.0),
            },
        ),
        "advtrain": SearchSpace(
            objective="objective_j",
            params={
                "m": IntRange(low=2, high=20),
                "k": IntRange(low=25, high=200, step=50),
                "strategy": Choice(values=["topk", "random"]),
            },
        ),
        "teacher": SearchSpace(
            objective="val_f1",
            params={
                "n_trees": IntRange(low=25, high=100, step=5),
                "split_criterion": Choice(values=["gini", "entropy"]),
                "min_samples_leaf": IntRange(low=1, high=501, step=50),
                "pos_class_weight": FloatRange(low=1.0, high=10.0),
            },
        ),
        "smoothing": SearchSpace(
            objective="objective_j",
            params={"smoothing_lambda": FloatRange(low=0.0, high=1.0, step=0.1)},
        ),
    }
