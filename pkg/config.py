"""
Experiment configuration and process settings.

Experiment settings live in one JSON document with a section per concern
(``features``, ``data``, ``mlp``, ``sadvnet``, ``wadvnet``, ``teacher``,
``anomaly``, ``cascade``, ``attack``, ``search``) plus the global ``seed``.
``--set section.key=value`` overrides the file, the file overrides the
defaults below. Process settings (output directory, ledger URL, log level)
come from the environment, with ``.env`` support via python-dotenv.

Component seeds are derived from the global seed so one number reproduces a
whole run.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, Field, model_validator

from advtrain import AdvTrainConfig
from anomaly import IsolationForestConfig
from attack import GaConfig
from features import ADD_AND_REMOVE, FeatureCategory, FeatureSpace, SynthSpec
from forest import RandomForestConfig
from mlp import MlpConfig
from search import SearchSpace, default_spaces
from utils import J_BUDGETS, ConfigurationError, MissingArtifactError, config_hash, parse_override

logger = logging.getLogger(__name__)

# offsets added to the global seed per component
SEED_OFFSETS = {"data": 0, "teacher": 1, "sadvnet": 2, "wadvnet": 3, "vanilla": 4, "anomaly": 5, "attack": 6, "search": 7}


# ── Sections ────────────────────────────────────────────────────────────────

class CategorySpec(BaseModel):
    name: str
    start: int = Field(ge=0)
    stop: int = Field(ge=1)
    manipulability: Literal["add-only", "add-and-remove"] = ADD_AND_REMOVE


class FeaturesConfig(BaseModel):
    """Feature categories; ``None`` uses the two-category default layout."""

    categories: Optional[List[CategorySpec]] = None
    eligible_categories: Optional[List[str]] = None

    def build_space(self, dimension: int) -> FeatureSpace:
        if self.categories is None:
            return FeatureSpace.default(dimension)
        return FeatureSpace(dimension, tuple(
            FeatureCategory(c.name, c.start, c.stop, c.manipulability) for c in self.categories
        ))


class DataConfig(BaseModel):
    synth: SynthSpec = Field(default_factory=SynthSpec)
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_paths(self):
        if self.test_path and not self.train_path:
            raise ValueError("data.test_path requires data.train_path")
        return self


class DetectorStageConfig(BaseModel):
    """One adversarially trained detector plus the lambda for its smoothed labels."""

    advtrain: AdvTrainConfig = Field(default_factory=AdvTrainConfig)
    smoothing_lambda: float = Field(default=0.0, ge=0.0, le=1.0)


def _sadvnet_default() -> DetectorStageConfig:
    return DetectorStageConfig(advtrain=AdvTrainConfig(m=10, k=100, strategy="topk"), smoothing_lambda=0.5)


def _wadvnet_default() -> DetectorStageConfig:
    return DetectorStageConfig(advtrain=AdvTrainConfig(m=2, k=75, strategy="topk"), smoothing_lambda=0.0)


class CascadeSection(BaseModel):
    sigma1: float = Field(default=0.78, ge=0.0, le=1.0)
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class AttackSection(BaseModel):
    budgets: List[int] = Field(default_factory=lambda: list(J_BUDGETS))
    ga: GaConfig = Field(default_factory=GaConfig)
    max_samples: Optional[int] = Field(default=None, ge=1, description="cap on attacked malware samples")
    goodware_pool_size: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_budgets(self):
        if any(b < 0 for b in self.budgets):
            raise ValueError("attack budgets must be >= 0")
        return self


class ExperimentConfig(BaseModel):
    seed: int = 0
    features: FeaturesConfig = Field(default_factory=FeaturesConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    mlp: MlpConfig = Field(default_factory=MlpConfig)
    sadvnet: DetectorStageConfig = Field(default_factory=_sadvnet_default)
    wadvnet: DetectorStageConfig = Field(default_factory=_wadvnet_default)
    teacher: RandomForestConfig = Field(default_factory=RandomForestConfig)
    anomaly: IsolationForestConfig = Field(default_factory=IsolationForestConfig)
    cascade: CascadeSection = Field(default_factory=CascadeSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    search: Dict[str, SearchSpace] = Field(default_factory=default_spaces)

    def seed_for(self, component: str) -> int:
        return self.seed + SEED_OFFSETS[component]

    def seeds(self) -> Dict[str, int]:
        return {name: self.seed_for(name) for name in SEED_OFFSETS}

    def mlp_config(self, component: str) -> MlpConfig:
        return self.mlp.model_copy(update={"seed": self.seed_for(component)})

    def stage_config(self, detector: str) -> DetectorStageConfig:
        stage: DetectorStageConfig = getattr(self, detector)
        advtrain = stage.advtrain.model_copy(update={"seed": self.seed_for(detector)})
        if advtrain.eligible_categories is None and self.features.eligible_categories is not None:
            advtrain = advtrain.model_copy(update={"eligible_categories": list(self.features.eligible_categories)})
        return stage.model_copy(update={"advtrain": advtrain})

    def teacher_config(self) -> RandomForestConfig:
        return self.teacher.model_copy(update={"seed": self.seed_for("teacher")})

    def anomaly_config(self) -> IsolationForestConfig:
        return self.anomaly.model_copy(update={"seed": self.seed_for("anomaly")})

    def ga_config(self) -> GaConfig:
        return self.attack.ga.model_copy(update={"seed": self.seed_for("attack")})

    def hash(self) -> str:
        return config_hash(self)


# ── Loading ─────────────────────────────────────────────────────────────────

def _set_path(document: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = document
    for key in path[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif not isinstance(child, dict):
            raise ConfigurationError(f"cannot override {'.'.join(path)}: {key} is not a section")
        node = child
    node[path[-1]] = value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> ExperimentConfig:
    """Read the JSON config at *path* (defaults when None), apply overrides, validate."""
    document: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise MissingArtifactError(config_path, "config file")
        try:
            document = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{config_path}: invalid JSON ({e})") from e
        if not isinstance(document, dict):
            raise ConfigurationError(f"{config_path}: top level must be an object")
    for assignment in overrides:
        keys, value = parse_override(assignment)
        _set_path(document, keys, value)
    if seed is not None:
        document["seed"] = seed
    config = ExperimentConfig.model_validate(document)
    logger.info("Loaded configuration (hash %s)", config.hash()[:12])
    return config


# ── Process settings ────────────────────────────────────────────────────────

class Settings(BaseModel):
    out_dir: str = "./runs"
    database_url: Optional[str] = None
    log_level: str = "INFO"


def load_settings() -> Settings:
    """Environment-backed settings; a ``.env`` file in the working directory is honoured."""
    load_dotenv(find_dotenv(usecwd=True))
    return Settings(
        out_dir=os.getenv("SENTINEL_OUT_DIR", "./runs"),
        database_url=os.getenv("SENTINEL_DATABASE_URL") or None,
        log_level=os.getenv("SENTINEL_LOG_LEVEL", "INFO").upper(),
    )
