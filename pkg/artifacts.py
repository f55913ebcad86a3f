"""
Versioned model container shared by every model kind.

Layout of an artifact file (JSON, keys sorted)::

    {
      "format":   "sentinel-artifact",
      "version":  1,
      "kind":     "mlp" | "forest" | "iforest" | "cascade",
      "meta":     {...},                      # small scalar/config data
      "arrays":   {name: {"dtype", "shape", "data"}},   # base64, little-endian
      "checksum": sha256 of the canonical form of everything above
    }

Cascades reference their detector and anomaly models by path relative to the
cascade file; a slot that repeats an earlier model is stored as an alias.
"""
import base64
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from anomaly import IsolationForestModel, IsolationTree
from cascade import CascadeConfig, Composite, InlierGate, NegThreshold, ThresholdGE
from features import Perturbation
from forest import DecisionTree, RandomForestConfig, RandomForestModel
from mlp import MlpConfig, MlpModel
from utils import (
    ARTIFACT_FORMAT,
    ARTIFACT_VERSION,
    ArtifactKindError,
    ArtifactVersionError,
    CorruptArtifactError,
    MissingArtifactError,
    canonical_json,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
KINDS = ("mlp", "forest", "iforest", "cascade")


# ── Container ───────────────────────────────────────────────────────────────

def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.ascontiguousarray(array)
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": little.dtype.str,
        "shape": list(array.shape),
        "data": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def decode_array(entry: Mapping[str, Any]) -> np.ndarray:
    try:
        raw = base64.b64decode(entry["data"], validate=True)
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        return array.reshape(entry["shape"]).astype(array.dtype.newbyteorder("="))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptArtifactError(f"undecodable array: {e}") from e


def _checksum(body: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def write_artifact(path: PathLike, kind: str, meta: Mapping[str, Any],
                   arrays: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    if kind not in KINDS:
        raise ArtifactKindError(f"unknown artifact kind {kind!r}")
    body = {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "kind": kind,
        "meta": dict(meta),
        "arrays": {name: encode_array(a) for name, a in (arrays or {}).items()},
    }
    document = dict(body, checksum=_checksum(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    logger.info("Saved %s artifact to %s", kind, path)
    return path


def read_artifact(path: PathLike, kind: Optional[str] = None) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    """Return (kind, meta, arrays) after format, version, kind and checksum checks."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, "model file")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptArtifactError(f"{path}: not a readable artifact ({e})") from e
    if not isinstance(document, dict) or document.get("format") != ARTIFACT_FORMAT:
        raise CorruptArtifactError(f"{path}: missing {ARTIFACT_FORMAT} header")
    if document.get("version") != ARTIFACT_VERSION:
        raise ArtifactVersionError(
            f"{path}: artifact version {document.get('version')!r}, this build reads version {ARTIFACT_VERSION}"
        )
    found = document.get("kind")
    if kind is not None and found != kind:
        raise ArtifactKindError(f"{path}: expected a {kind} artifact, found {found!r}")
    checksum = document.pop("checksum", None)
    if checksum != _checksum(document):
        raise CorruptArtifactError(f"{path}: checksum mismatch")
    arrays = {name: decode_array(entry) for name, entry in document.get("arrays", {}).items()}
    return found, document.get("meta", {}), arrays


# ── MLP ─────────────────────────────────────────────────────────────────────

def save_mlp(model: MlpModel, path: PathLike) -> Path:
    arrays = {}
    for layer, (weight, bias) in enumerate(zip(model.weights, model.biases)):
        arrays[f"weight_{layer}"] = weight
        arrays[f"bias_{layer}"] = bias
    for index, (m, v) in enumerate(zip(model.adam_m, model.adam_v)):
        arrays[f"adam_m_{index}"] = m
        arrays[f"adam_v_{index}"] = v
    delta = None
    if model.final_delta is not None:
        delta = {"dimension": model.final_delta.dimension,
                 "entries": [[i, v] for i, v in model.final_delta.entries.items()]}
    meta = {
        "config": model.config.model_dump(mode="json"),
        "input_dim": model.input_dim,
        "n_layers": len(model.weights),
        "step": model.step,
        "best_epoch": model.best_epoch,
        "history": list(model.history),
        "final_delta": delta,
    }
    return write_artifact(path, "mlp", meta, arrays)


def _restore_mlp(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> MlpModel:
    try:
        n_layers = meta["n_layers"]
        weights = [arrays[f"weight_{i}"] for i in range(n_layers)]
        biases = [arrays[f"bias_{i}"] for i in range(n_layers)]
        model = MlpModel(MlpConfig(**meta["config"]), meta["input_dim"], weights, biases)
        model.adam_m = [arrays[f"adam_m_{i}"] for i in range(2 * n_layers)]
        model.adam_v = [arrays[f"adam_v_{i}"] for i in range(2 * n_layers)]
    except KeyError as e:
        raise CorruptArtifactError(f"mlp artifact is missing {e}") from e
    model.step = meta.get("step", 0)
    model.best_epoch = meta.get("best_epoch")
    model.history = list(meta.get("history", []))
    delta = meta.get("final_delta")
    if delta is not None:
        model.final_delta = Perturbation({int(i): int(v) for i, v in delta["entries"]}, delta["dimension"])
    return model


# ── Tree ensembles ──────────────────────────────────────────────────────────

def _pack_trees(trees, columns) -> Dict[str, np.ndarray]:
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    for i, tree in enumerate(trees):
        offsets[i + 1] = offsets[i] + tree.n_nodes
    packed = {"offsets": offsets}
    for column in columns:
        packed[column] = np.concatenate([getattr(t, column) for t in trees])
    return packed


def _unpack_trees(arrays: Mapping[str, np.ndarray], columns, tree_type):
    try:
        offsets = arrays["offsets"]
        return tuple(
            tree_type(*(arrays[c][offsets[i]:offsets[i + 1]].copy() for c in columns))
            for i in range(offsets.shape[0] - 1)
        )
    except KeyError as e:
        raise CorruptArtifactError(f"tree artifact is missing {e}") from e


_FOREST_COLUMNS = ("feature", "left", "right", "value")
_IFOREST_COLUMNS = ("feature", "threshold", "left", "right", "size")


def save_forest(model: RandomForestModel, path: PathLike) -> Path:
    meta = {"config": model.config.model_dump(mode="json"), "dimension": model.dimension}
    return write_artifact(path, "forest", meta, _pack_trees(model.trees, _FOREST_COLUMNS))


def save_iforest(model: IsolationForestModel, path: PathLike) -> Path:
    meta = {
        "subsample_size": model.subsample_size,
        "embedding_size": model.embedding_size,
        "score_threshold": model.score_threshold,
        "contamination": model.contamination,
        "polarity": model.polarity,
    }
    return write_artifact(path, "iforest", meta, _pack_trees(model.trees, _IFOREST_COLUMNS))


# ── Cascade ─────────────────────────────────────────────────────────────────

def _relative(target: PathLike, base: Path) -> str:
    return Path(os.path.relpath(Path(target).resolve(), base.resolve())).as_posix()


def _condition_document(condition, anomaly_paths: Mapping[int, PathLike], base: Path) -> Dict[str, Any]:
    if isinstance(condition, ThresholdGE):
        return {"type": "threshold_ge", "slot": condition.slot, "sigma": condition.sigma}
    if isinstance(condition, NegThreshold):
        return {"type": "neg_threshold", "slot": condition.slot, "sigma": condition.sigma}
    if isinstance(condition, InlierGate):
        if id(condition.anomaly) not in anomaly_paths:
            raise ArtifactKindError("the anomaly model of an inlier gate has no saved path")
        return {"type": "inlier_gate", "slot": condition.slot,
                "anomaly": _relative(anomaly_paths[id(condition.anomaly)], base)}
    return {
        "type": "composite",
        "combinator": condition.combinator,
        "conditions": [_condition_document(c, anomaly_paths, base) for c in condition.conditions],
    }


def save_cascade(cascade: CascadeConfig, path: PathLike, model_paths: Mapping[int, PathLike],
                 anomaly_paths: Optional[Mapping[int, PathLike]] = None) -> Path:
    """
    ``model_paths`` / ``anomaly_paths`` map ``id(model)`` to the file each
    model was saved to.
    """
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    slots = []
    first_seen: Dict[int, int] = {}
    for position, model in enumerate(cascade.slots):
        key = id(model)
        if key in first_seen:
            slots.append({"alias_of": first_seen[key]})
            continue
        if key not in model_paths:
            raise ArtifactKindError(f"cascade slot {position} has no saved model path")
        first_seen[key] = position
        slots.append({"path": _relative(model_paths[key], base)})
    meta = {
        "threshold": cascade.threshold,
        "slots": slots,
        "conditions": [_condition_document(c, anomaly_paths or {}, base) for c in cascade.conditions],
    }
    return write_artifact(path, "cascade", meta)


def _restore_condition(document: Mapping[str, Any], base: Path, cache: Dict[str, Any]):
    kind = document.get("type")
    if kind == "threshold_ge":
        return ThresholdGE(int(document["slot"]), float(document["sigma"]))
    if kind == "neg_threshold":
        return NegThreshold(int(document["slot"]), float(document["sigma"]))
    if kind == "inlier_gate":
        return InlierGate(int(document["slot"]), _load_cached(base / document["anomaly"], "iforest", cache))
    if kind == "composite":
        return Composite(document["combinator"],
                         tuple(_restore_condition(c, base, cache) for c in document["conditions"]))
    raise CorruptArtifactError(f"unknown condition type {kind!r}")


def _load_cached(path: Path, kind: Optional[str], cache: Dict[str, Any]):
    key = str(path.resolve())
    if key not in cache:
        cache[key] = load_model(path, kind)
    return cache[key]


def _restore_cascade(meta: Mapping[str, Any], base: Path) -> CascadeConfig:
    cache: Dict[str, Any] = {}
    slots = []
    try:
        for entry in meta["slots"]:
            if "alias_of" in entry:
                slots.append(slots[int(entry["alias_of"])])
            else:
                slots.append(_load_cached(base / entry["path"], None, cache))
        conditions = tuple(_restore_condition(c, base, cache) for c in meta["conditions"])
        return CascadeConfig(tuple(slots), conditions, float(meta["threshold"]))
    except (KeyError, IndexError) as e:
        raise CorruptArtifactError(f"malformed cascade document: {e}") from e


# ── Dispatch ────────────────────────────────────────────────────────────────

def save_model(model, path: PathLike, **references) -> Path:
    if isinstance(model, MlpModel):
        return save_mlp(model, path)
    if isinstance(model, RandomForestModel):
        return save_forest(model, path)
    if isinstance(model, IsolationForestModel):
        return save_iforest(model, path)
    if isinstance(model, CascadeConfig):
        return save_cascade(model, path, **references)
    raise ArtifactKindError(f"cannot persist objects of type {type(model).__name__}")


def load_model(path: PathLike, kind: Optional[str] = None):
    """Load any artifact; ``kind`` makes a wrong-kind file a typed error."""
    path = Path(path)
    found, meta, arrays = read_artifact(path, kind)
    if found == "mlp":
        return _restore_mlp(meta, arrays)
    if found == "forest":
        return RandomForestModel(
            _unpack_trees(arrays, _FOREST_COLUMNS, DecisionTree),
            int(meta["dimension"]),
            RandomForestConfig(**meta["config"]),
        )
    if found == "iforest":
        return IsolationForestModel(
            _unpack_trees(arrays, _IFOREST_COLUMNS, IsolationTree),
            int(meta["subsample_size"]),
            int(meta["embedding_size"]),
            float(meta["score_threshold"]),
            float(meta["contamination"]),
            meta.get("polarity", "inlier"),
        )
    if found == "cascade":
        return _restore_cascade(meta, path.parent)
    raise ArtifactKindError(f"{path}: unknown artifact kind {found!r}")
