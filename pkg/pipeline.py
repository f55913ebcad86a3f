"""
Staged build of the multi-step detector and the helpers behind every CLI command.

Run directory layout::

    <out>/data/train.svm, data/test.svm        exported datasets (synth)
    <out>/data/train.smoothed.svm              teacher-smoothed training labels
    <out>/models/{vanilla,teacher,sadvnet,wadvnet,anomaly,cascade}.json
    <out>/attack.json                          per-sample attack outcomes
    <out>/report.json, report.txt              robustness report
    <out>/search-<stage>.json                  random-search trial log
    <out>/<command>.manifest.json              config hash, seeds, artifacts

Each stage is a plain function over datasets and models; the ``run_*``
functions wire stages to the run directory and return the artifact paths
they wrote.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from advtrain import adv_train
from anomaly import IsolationForestModel, iforest_train
from artifacts import load_model, save_cascade, save_model
from attack import AttackRecord, AttackSummary, attack_dataset
from cascade import CascadeConfig, Composite, InlierGate, Label, SingleModelSystem, build_multistep, label_for
from config import ExperimentConfig
from evaluation import RobustnessReport, assemble_report, confusion, f1, objective_j, pearson_logits, render_table, tnr, tpr
from features import LabeledDataset, SparseBinaryVector, parse_sparse_file, split_dataset, synth_generate, write_sparse_file
from forest import RandomForestModel, rf_predict_proba, rf_predict_proba_batch, rf_train, smooth_labels
from mlp import MlpModel, split_train_validation, train
from search import SearchResult, Trial, random_search
from utils import J_BUDGETS, ConfigurationError, DataError, MissingArtifactError, canonical_json

logger = logging.getLogger(__name__)

TRAIN_FILE = "data/train.svm"
TEST_FILE = "data/test.svm"
SMOOTHED_FILE = "data/train.smoothed.svm"
ATTACK_FILE = "attack.json"
REPORT_FILE = "report.json"
REPORT_TABLE = "report.txt"
MODEL_FILES = {
    "vanilla": "models/vanilla.json",
    "teacher": "models/teacher.json",
    "sadvnet": "models/sadvnet.json",
    "wadvnet": "models/wadvnet.json",
    "anomaly": "models/anomaly.json",
    "cascade": "models/cascade.json",
}
DETECTORS = ("sadvnet", "wadvnet")
SMOOTHED_STUDENT = "sadvnet"


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    artifacts: Dict[str, str] = field(default_factory=dict)

    def path(self, relative: str) -> Path:
        return self.out_dir / relative

    def model_path(self, name: str) -> Path:
        return self.path(MODEL_FILES[name])

    def record(self, name: str, path: Path) -> Path:
        self.artifacts[name] = Path(path).relative_to(self.out_dir).as_posix()
        return path


def write_json(path: Path, data: Any) -> Path:
    """Deterministic JSON (sorted keys) so reruns write identical bytes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


# ── Data ────────────────────────────────────────────────────────────────────

def _read_dataset(path: str, config: ExperimentConfig) -> LabeledDataset:
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError(source, "data file")
    with source.open(encoding="utf-8") as stream:
        parsed = parse_sparse_file(stream)
    space = config.features.build_space(parsed.dimension)
    return LabeledDataset(parsed.samples, parsed.labels, space, parsed.rounds)


def load_data(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    (train, test) from the configured files, or from the seeded synthetic
    generator when no training file is configured.
    """
    data = config.data
    if data.train_path:
        train_set = _read_dataset(data.train_path, config)
        if data.test_path:
            test_set = _read_dataset(data.test_path, config)
            if test_set.dimension != train_set.dimension:
                raise DataError(f"test dimension {test_set.dimension} != training dimension {train_set.dimension}")
            return train_set, test_set
        return split_dataset(train_set, data.test_fraction, config.seed_for("data"))
    space = config.features.build_space(data.synth.d)
    dataset = synth_generate(data.synth, config.seed_for("data"), space)
    return split_dataset(dataset, data.test_fraction, config.seed_for("data"))


def export_dataset(dataset: LabeledDataset, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as stream:
        write_sparse_file(dataset, stream)
    return path


def require_model(ctx: RunContext, name: str, kind: Optional[str] = None):
    return load_model(ctx.model_path(name), kind)


# ── Systems ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ForestSystem:
    model: RandomForestModel
    threshold: float = 0.5

    def score(self, x: SparseBinaryVector) -> float:
        return rf_predict_proba(self.model, x)

    def label(self, x: SparseBinaryVector) -> Label:
        return label_for(self.score(x), self.threshold)


def as_system(model, threshold: float = 0.5):
    """Wrap any loaded model kind in the score/label decision surface."""
    if isinstance(model, CascadeConfig):
        return model
    if isinstance(model, RandomForestModel):
        return ForestSystem(model, threshold)
    if isinstance(model, MlpModel):
        return SingleModelSystem(model, threshold)
    raise ConfigurationError(f"a {type(model).__name__} cannot act as a decision system")


# ── Stages ──────────────────────────────────────────────────────────────────

def train_vanilla(config: ExperimentConfig, train_set: LabeledDataset) -> MlpModel:
    return train(train_set, config.mlp_config("vanilla"))


def teacher_split(config: ExperimentConfig, train_set: LabeledDataset) -> LabeledDataset:
    """The fit part of the smoothed student's own train/validation split."""
    fit_set, _ = split_train_validation(train_set, config.mlp_config(SMOOTHED_STUDENT))
    return fit_set


def train_teacher(config: ExperimentConfig, train_set: LabeledDataset) -> RandomForestModel:
    return rf_train(teacher_split(config, train_set), config.teacher_config())


def training_labels(config: ExperimentConfig, detector: str, train_set: LabeledDataset,
                    teacher: Optional[RandomForestModel]) -> LabeledDataset:
    smoothing = config.stage_config(detector).smoothing_lambda
    if smoothing == 0.0:
        return train_set
    if teacher is None:
        raise ConfigurationError(f"{detector} uses smoothing lambda={smoothing} but no teacher model is available")
    return smooth_labels(train_set, teacher, smoothing)


def train_detector(config: ExperimentConfig, detector: str, train_set: LabeledDataset,
                   teacher: Optional[RandomForestModel] = None) -> MlpModel:
    if detector not in DETECTORS:
        raise ConfigurationError(f"unknown detector {detector!r}; expected one of {DETECTORS}")
    stage = config.stage_config(detector)
    dataset = training_labels(config, detector, train_set, teacher)
    logger.info("Training %s (lambda=%.2f)", detector, stage.smoothing_lambda)
    return adv_train(dataset, config.mlp_config(detector), stage.advtrain)


def train_anomaly(config: ExperimentConfig, weak: MlpModel, train_set: LabeledDataset) -> IsolationForestModel:
    benign = train_set.goodware()
    if not benign:
        raise DataError("the anomaly detector needs benign training samples")
    return iforest_train(weak.embeddings(benign), config.anomaly_config())


def attack_system(config: ExperimentConfig, system, train_set: LabeledDataset,
                  test_set: LabeledDataset) -> Optional[AttackSummary]:
    """GA attack on the test malware; ``None`` when no budgets are configured."""
    section = config.attack
    if not section.budgets:
        return None
    targets = test_set.malware()
    if section.max_samples is not None:
        targets = targets[:section.max_samples]
    pool = train_set.goodware()
    if section.goodware_pool_size is not None:
        pool = pool[:section.goodware_pool_size]
    return attack_dataset(system, targets, section.budgets, pool, train_set.space, config.ga_config())


def logit_correlations(config: ExperimentConfig, models: Mapping[str, MlpModel],
                       test_set: LabeledDataset) -> Dict[str, float]:
    rho: Dict[str, float] = {}
    reference = models.get("vanilla")
    if reference is None:
        return rho
    for name in DETECTORS:
        if name not in models:
            continue
        try:
            rho[f"{name}_vs_vanilla"] = pearson_logits(models[name], reference, test_set)
        except DataError as e:
            logger.warning("Skipping logit correlation for %s: %s", name, e)
    return rho


# ── Attack summary files ────────────────────────────────────────────────────

def write_attack_summary(path: Path, summary: AttackSummary, model: str) -> Path:
    return write_json(path, {
        "model": model,
        "tpr": {str(budget): value for budget, value in sorted(summary.tpr.items())},
        "records": [asdict(record) for record in summary.records],
    })


def read_attack_summary(path: Path) -> Tuple[str, AttackSummary]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        summary = AttackSummary(
            tpr={int(budget): float(value) for budget, value in document["tpr"].items()},
            records=[AttackRecord(**record) for record in document["records"]],
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: unreadable attack summary ({e})") from e
    return document.get("model", ""), summary


def write_report(ctx: RunContext, report: RobustnessReport) -> RobustnessReport:
    ctx.record("report", write_json(ctx.path(REPORT_FILE), report.model_dump(mode="json")))
    table = ctx.path(REPORT_TABLE)
    table.write_text(render_table(report), encoding="utf-8")
    ctx.record("report_table", table)
    return report


# ── Commands ────────────────────────────────────────────────────────────────

def run_synth(ctx: RunContext) -> Dict[str, str]:
    train_set, test_set = load_data(ctx.config)
    ctx.record("train", export_dataset(train_set, ctx.path(TRAIN_FILE)))
    ctx.record("test", export_dataset(test_set, ctx.path(TEST_FILE)))
    return ctx.artifacts


def run_train(ctx: RunContext) -> MlpModel:
    train_set, _ = load_data(ctx.config)
    model = train_vanilla(ctx.config, train_set)
    ctx.record("vanilla", save_model(model, ctx.model_path("vanilla")))
    return model


def run_smooth(ctx: RunContext) -> RandomForestModel:
    """Train the teacher forest and export the smoothed training labels."""
    train_set, _ = load_data(ctx.config)
    teacher = train_teacher(ctx.config, train_set)
    ctx.record("teacher", save_model(teacher, ctx.model_path("teacher")))
    smoothing = ctx.config.sadvnet.smoothing_lambda
    smoothed = smooth_labels(train_set, teacher, smoothing)
    ctx.record("smoothed", export_dataset(smoothed, ctx.path(SMOOTHED_FILE)))
    return teacher


def run_advtrain(ctx: RunContext, detector: str) -> MlpModel:
    train_set, _ = load_data(ctx.config)
    teacher = None
    if ctx.config.stage_config(detector).smoothing_lambda > 0.0:
        teacher = require_model(ctx, "teacher", "forest")
    model = train_detector(ctx.config, detector, train_set, teacher)
    ctx.record(detector, save_model(model, ctx.model_path(detector)))
    return model


def run_anomaly(ctx: RunContext) -> IsolationForestModel:
    weak = require_model(ctx, "wadvnet", "mlp")
    train_set, _ = load_data(ctx.config)
    model = train_anomaly(ctx.config, weak, train_set)
    ctx.record("anomaly", save_model(model, ctx.model_path("anomaly")))
    return model


def run_cascade(ctx: RunContext) -> CascadeConfig:
    strong = require_model(ctx, "sadvnet", "mlp")
    weak = require_model(ctx, "wadvnet", "mlp")
    anomaly = require_model(ctx, "anomaly", "iforest")
    return _assemble_cascade(ctx, strong, weak, anomaly)


def _assemble_cascade(ctx: RunContext, strong: MlpModel, weak: MlpModel,
                      anomaly: IsolationForestModel) -> CascadeConfig:
    section = ctx.config.cascade
    cascade = build_multistep(strong, weak, anomaly, section.sigma1, section.threshold)
    save_cascade(
        cascade,
        ctx.model_path("cascade"),
        model_paths={id(strong): ctx.model_path("sadvnet"), id(weak): ctx.model_path("wadvnet")},
        anomaly_paths={id(anomaly): ctx.model_path("anomaly")},
    )
    ctx.record("cascade", ctx.model_path("cascade"))
    return cascade


def _resolve_model_path(ctx: RunContext, model_path: Optional[str]) -> Path:
    return Path(model_path) if model_path else ctx.model_path("cascade")


def run_attack(ctx: RunContext, model_path: Optional[str] = None) -> Optional[AttackSummary]:
    path = _resolve_model_path(ctx, model_path)
    system = as_system(load_model(path), ctx.config.cascade.threshold)
    train_set, test_set = load_data(ctx.config)
    summary = attack_system(ctx.config, system, train_set, test_set)
    if summary is not None:
        ctx.record("attack", write_attack_summary(ctx.path(ATTACK_FILE), summary, path.as_posix()))
    return summary


def run_eval(ctx: RunContext, model_path: Optional[str] = None) -> RobustnessReport:
    """
    Report for the given model (the cascade by default). Attack results in
    the run directory are folded in only when they were produced for the
    same model file.
    """
    path = _resolve_model_path(ctx, model_path)
    model = load_model(path)
    system = as_system(model, ctx.config.cascade.threshold)
    _, test_set = load_data(ctx.config)

    summary = None
    attack_file = ctx.path(ATTACK_FILE)
    if attack_file.is_file():
        attacked_model, loaded = read_attack_summary(attack_file)
        if attacked_model == path.as_posix():
            summary = loaded
        else:
            logger.warning("Ignoring %s: it was produced for %s", attack_file, attacked_model)

    models: Dict[str, MlpModel] = {}
    for name in ("vanilla", *DETECTORS):
        if ctx.model_path(name).is_file():
            models[name] = require_model(ctx, name, "mlp")
    polarity = _polarity(model)
    report = assemble_report(system, test_set, summary, logit_correlations(ctx.config, models, test_set),
                             polarity, ctx.config.attack.budgets)
    return write_report(ctx, report)


def _polarity(model) -> Optional[str]:
    if not isinstance(model, CascadeConfig):
        return None
    pending = list(model.conditions)
    while pending:
        condition = pending.pop(0)
        if isinstance(condition, InlierGate):
            return condition.anomaly.polarity
        if isinstance(condition, Composite):
            pending.extend(condition.conditions)
    return None


def run_pipeline(ctx: RunContext) -> RobustnessReport:
    """
    Teacher -> SAdvNet (smoothed labels) -> wAdvNet -> anomaly detector on
    benign wAdvNet embeddings -> cascade -> attack -> report, plus the
    vanilla reference model for the logit correlations.
    """
    config = ctx.config
    train_set, test_set = load_data(config)
    logger.info("Pipeline on %d training / %d test samples (d=%d)", len(train_set), len(test_set), train_set.dimension)

    teacher = train_teacher(config, train_set)
    ctx.record("teacher", save_model(teacher, ctx.model_path("teacher")))
    strong = train_detector(config, "sadvnet", train_set, teacher)
    ctx.record("sadvnet", save_model(strong, ctx.model_path("sadvnet")))
    weak = train_detector(config, "wadvnet", train_set, teacher)
    ctx.record("wadvnet", save_model(weak, ctx.model_path("wadvnet")))
    vanilla = train_vanilla(config, train_set)
    ctx.record("vanilla", save_model(vanilla, ctx.model_path("vanilla")))
    anomaly = train_anomaly(config, weak, train_set)
    ctx.record("anomaly", save_model(anomaly, ctx.model_path("anomaly")))
    cascade = _assemble_cascade(ctx, strong, weak, anomaly)

    summary = attack_system(config, cascade, train_set, test_set)
    if summary is not None:
        ctx.record("attack", write_attack_summary(ctx.path(ATTACK_FILE), summary,
                                                  ctx.model_path("cascade").as_posix()))
    rho = logit_correlations(config, {"vanilla": vanilla, "sadvnet": strong, "wadvnet": weak}, test_set)
    report = assemble_report(cascade, test_set, summary, rho, anomaly.polarity, config.attack.budgets)
    return write_report(ctx, report)


# ── Search ──────────────────────────────────────────────────────────────────

STAGES = ("architecture", "advtrain", "teacher", "smoothing")


def architecture_config(config: ExperimentConfig, params: Mapping[str, Any]) -> ExperimentConfig:
    """Fold sampled architecture parameters (``n_layers`` + ``hidden_size_<i>``) into the mlp section."""
    update = {k: v for k, v in params.items() if k != "n_layers" and not k.startswith("hidden_size_")}
    if "n_layers" in params:
        update["hidden_sizes"] = [int(params[f"hidden_size_{i}"]) for i in range(1, int(params["n_layers"]) + 1)]
    return config.model_copy(update={"mlp": config.mlp.model_copy(update=update)})


def _hard_f1(predicted: np.ndarray, dataset: LabeledDataset) -> float:
    return f1(confusion(predicted.astype(np.int64), dataset.hard_labels()))


def _detector_j(trial_config: ExperimentConfig, train_set: LabeledDataset, val_set: LabeledDataset,
                teacher: Optional[RandomForestModel] = None) -> float:
    """J of a freshly trained sadvnet, attacked on the validation malware at the J budgets."""
    model = train_detector(trial_config, "sadvnet", train_set, teacher)
    system = SingleModelSystem(model, trial_config.cascade.threshold)
    counts = confusion([int(system.label(x)) for x in val_set.samples], val_set.hard_labels())
    attack_config = trial_config.model_copy(update={
        "attack": trial_config.attack.model_copy(update={"budgets": list(J_BUDGETS)}),
    })
    summary = attack_system(attack_config, system, train_set, val_set)
    return objective_j(tnr(counts), tpr(counts), *(summary.tpr[b] for b in J_BUDGETS))


def stage_objective(config: ExperimentConfig, stage: str, train_set: LabeledDataset,
                    val_set: LabeledDataset) -> Callable[[Dict[str, Any]], float]:
    """Objective for one search stage: validation F1, or J for adversarial training and smoothing."""
    if stage == "architecture":
        def objective(params: Dict[str, Any]) -> float:
            trial_config = architecture_config(config, params)
            model = train_vanilla(trial_config, train_set)
            return _hard_f1(model.predict_proba(val_set.samples) >= 0.5, val_set)
        return objective

    if stage == "teacher":
        def objective(params: Dict[str, Any]) -> float:
            trial_config = config.model_copy(update={"teacher": config.teacher.model_copy(update=params)})
            model = rf_train(train_set, trial_config.teacher_config())
            return _hard_f1(rf_predict_proba_batch(model, val_set.samples) >= 0.5, val_set)
        return objective

    if stage == "advtrain":
        def objective(params: Dict[str, Any]) -> float:
            stage_cfg = config.sadvnet.model_copy(update={"advtrain": config.sadvnet.advtrain.model_copy(update=params)})
            trial_config = config.model_copy(update={"sadvnet": stage_cfg.model_copy(update={"smoothing_lambda": 0.0})})
            return _detector_j(trial_config, train_set, val_set)
        return objective

    if stage == "smoothing":
        teacher = train_teacher(config, train_set)

        def objective(params: Dict[str, Any]) -> float:
            trial_config = config.model_copy(update={"sadvnet": config.sadvnet.model_copy(update=params)})
            return _detector_j(trial_config, train_set, val_set, teacher)
        return objective

    raise ConfigurationError(f"unknown search stage {stage!r}; expected one of {STAGES}")


def run_search(ctx: RunContext, stage: str, trials: Optional[int] = None,
               on_trial: Optional[Callable[[Trial], None]] = None) -> SearchResult:
    config = ctx.config
    if stage not in config.search:
        raise ConfigurationError(f"no search space configured for stage {stage!r}")
    space = config.search[stage]
    train_all, _ = load_data(config)
    train_set, val_set = split_dataset(train_all, config.mlp.validation_fraction, config.seed_for("search"))
    result = random_search(space, stage_objective(config, stage, train_set, val_set), trials,
                           config.seed_for("search"), on_trial)
    ctx.record("search", write_json(ctx.path(f"search-{stage}.json"), {
        "stage": stage,
        "objective": space.objective,
        "best": asdict(result.best),
        "trials": [asdict(t) for t in result.trials],
    }))
    return result


def manifest(ctx: RunContext, command: str) -> Dict[str, Any]:
    """Everything needed to reproduce *command*; no timestamps."""
    return {
        "command": command,
        "config_hash": ctx.config.hash(),
        "seeds": ctx.config.seeds(),
        "config": json.loads(canonical_json(ctx.config)),
        "artifacts": dict(sorted(ctx.artifacts.items())),
    }


def write_manifest(ctx: RunContext, command: str) -> Path:
    return write_json(ctx.path(f"{command}.manifest.json"), manifest(ctx, command))
