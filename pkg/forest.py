"""
Random-forest teacher over sparse binary features, and label smoothing.

Every split tests a single feature for presence (x_f = 1 goes right), so no
threshold search is needed. Positive samples count ``pos_class_weight`` times
in the impurity and in leaf probabilities.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from features import LabeledDataset, SparseBinaryVector
from utils import DataError, make_rng, validate_probability

logger = logging.getLogger(__name__)

LEAF = -1
_MIN_GAIN = 1e-12


class RandomForestConfig(BaseModel):
    n_trees: int = Field(default=60, ge=1)
    split_criterion: Literal["gini", "entropy"] = "gini"
    min_samples_leaf: int = Field(default=50, ge=1)
    max_depth: Optional[int] = Field(default=None, ge=0)
    features_per_split: Optional[int] = Field(default=None, ge=1, description="None means sqrt(d)")
    pos_class_weight: float = Field(default=1.0, gt=0.0)
    bootstrap: bool = True
    seed: int = 0

    def candidates_per_split(self, dimension: int) -> int:
        if self.features_per_split is None:
            return max(1, int(round(math.sqrt(dimension))))
        return min(self.features_per_split, dimension)


@dataclass(frozen=True)
class DecisionTree:
    """
    Flat binary tree. Node 0 is the root.

    Columns
    -------
    feature : split feature, or -1 for a leaf
    left    : child for x_f = 0 (-1 on leaves)
    right   : child for x_f = 1 (-1 on leaves)
    value   : class-weighted positive fraction (meaningful on leaves)
    """

    feature: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, x: SparseBinaryVector) -> float:
        node = 0
        while self.feature[node] != LEAF:
            node = self.right[node] if int(self.feature[node]) in x else self.left[node]
        return float(self.value[node])


@dataclass(frozen=True)
class RandomForestModel:
    trees: Tuple[DecisionTree, ...]
    dimension: int
    config: RandomForestConfig


def _impurity(positive: np.ndarray, negative: np.ndarray, criterion: str) -> np.ndarray:
    total = positive + negative
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, positive / np.where(total > 0, total, 1.0), 0.0)
    if criterion == "gini":
        return 2.0 * p * (1.0 - p)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
        terms += np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    return terms


def _leaf_value(n_pos: int, n_neg: int, weight: float) -> float:
    weighted = weight * n_pos
    return weighted / (weighted + n_neg)


def _best_split(inputs, targets: np.ndarray, rows: np.ndarray, candidates: np.ndarray,
                config: RandomForestConfig) -> Optional[int]:
    """Candidate with the largest weighted impurity decrease; ties go to the lower index."""
    weight = config.pos_class_weight
    node_targets = targets[rows]
    present = np.asarray(inputs[rows][:, candidates].todense()) > 0
    n_right = present.sum(axis=0)
    n_left = rows.shape[0] - n_right
    pos_right = present[node_targets == 1].sum(axis=0)
    neg_right = n_right - pos_right
    pos_total = int(node_targets.sum())
    neg_total = rows.shape[0] - pos_total
    pos_left = pos_total - pos_right
    neg_left = neg_total - neg_right

    w_right = weight * pos_right + neg_right
    w_left = weight * pos_left + neg_left
    w_total = weight * pos_total + neg_total
    parent = _impurity(np.array([weight * pos_total]), np.array([float(neg_total)]), config.split_criterion)[0]
    children = (
        w_left * _impurity(weight * pos_left, neg_left.astype(np.float64), config.split_criterion)
        + w_right * _impurity(weight * pos_right, neg_right.astype(np.float64), config.split_criterion)
    ) / w_total
    gain = parent - children
    valid = (n_left >= config.min_samples_leaf) & (n_right >= config.min_samples_leaf) & (gain > _MIN_GAIN)
    if not valid.any():
        return None

    order = np.argsort(candidates, kind="stable")
    best, best_gain = None, -np.inf
    for position in order:
        if valid[position] and gain[position] > best_gain:
            best, best_gain = int(candidates[position]), gain[position]
    return best


def _grow_tree(inputs, targets: np.ndarray, rows: np.ndarray, config: RandomForestConfig,
               rng: np.random.Generator) -> DecisionTree:
    dimension = inputs.shape[1]
    n_candidates = config.candidates_per_split(dimension)
    feature: List[int] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []

    def new_node(node_rows: np.ndarray) -> int:
        n_pos = int(targets[node_rows].sum())
        feature.append(LEAF)
        left.append(LEAF)
        right.append(LEAF)
        value.append(_leaf_value(n_pos, node_rows.shape[0] - n_pos, config.pos_class_weight))
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        n_pos = int(targets[node_rows].sum())
        if n_pos == 0 or n_pos == node_rows.shape[0]:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        if node_rows.shape[0] < 2 * config.min_samples_leaf:
            continue
        candidates = rng.choice(dimension, size=n_candidates, replace=False)
        split = _best_split(inputs, targets, node_rows, candidates, config)
        if split is None:
            continue
        present = np.asarray(inputs[node_rows][:, [split]].todense()).ravel() > 0
        feature[node] = split
        left[node] = new_node(node_rows[~present])
        right[node] = new_node(node_rows[present])
        stack.append((right[node], node_rows[present], depth + 1))
        stack.append((left[node], node_rows[~present], depth + 1))

    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def rf_train(dataset: LabeledDataset, config: RandomForestConfig) -> RandomForestModel:
    """Grow ``n_trees`` greedy presence-split trees, each from its own seeded stream."""
    if len(dataset) == 0:
        raise DataError("cannot train a forest on an empty dataset")
    if not dataset.is_discrete:
        raise DataError("the teacher forest needs discrete labels")
    inputs = dataset.to_csr()
    targets = dataset.hard_labels()
    n = len(dataset)
    if targets.min() == targets.max():
        logger.warning("Single-class training data: every tree will be a single leaf")

    trees = []
    for index in range(config.n_trees):
        rng = make_rng(config.seed, index)
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(_grow_tree(inputs, targets, np.sort(rows), config, rng))
    logger.info(
        "Trained forest: %d trees, mean depth %.1f, criterion=%s",
        len(trees), float(np.mean([t.depth for t in trees])), config.split_criterion,
    )
    return RandomForestModel(tuple(trees), dataset.dimension, config)


def rf_predict_proba(model: RandomForestModel, x: SparseBinaryVector) -> float:
    """Mean leaf probability across trees."""
    if x.dimension != model.dimension:
        raise DataError(f"sample dimension {x.dimension} != forest dimension {model.dimension}")
    # fsum keeps the mean independent of tree order
    return math.fsum(tree.predict(x) for tree in model.trees) / len(model.trees)


def rf_predict_proba_batch(model: RandomForestModel, samples: Sequence[SparseBinaryVector]) -> np.ndarray:
    return np.asarray([rf_predict_proba(model, x) for x in samples], dtype=np.float64)


# ── Label smoothing ─────────────────────────────────────────────────────────

def smooth_value(label: float, teacher_probability: float, smoothing: float) -> float:
    """(1 - lambda) * y + lambda * f(x), kept inside [min(y, f), max(y, f)]."""
    validate_probability(smoothing, "smoothing lambda")
    blended = (1.0 - smoothing) * label + smoothing * teacher_probability
    low, high = min(label, teacher_probability), max(label, teacher_probability)
    return min(max(blended, low), high)


def smooth_labels(dataset: LabeledDataset, teacher: RandomForestModel, smoothing: float) -> LabeledDataset:
    """Replace every label with its teacher-smoothed value; samples are shared, not copied."""
    validate_probability(smoothing, "smoothing lambda")
    if not dataset.is_discrete:
        raise DataError("label smoothing expects discrete labels")
    probabilities = rf_predict_proba_batch(teacher, dataset.samples)
    smoothed = [smooth_value(y, float(p), smoothing) for y, p in zip(dataset.labels, probabilities)]
    logger.info("Smoothed %d labels with lambda=%.3f", len(smoothed), smoothing)
    return dataset.with_labels(smoothed)
