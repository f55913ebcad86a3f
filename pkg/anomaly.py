"""
Isolation forest over detector embeddings.

Trained on the last-hidden-layer embeddings of benign training samples; the
calibrated threshold turns scores into the binary gate a(x) used by the
cascade.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from utils import EULER_GAMMA, DataError, make_rng

logger = logging.getLogger(__name__)

LEAF = -1
Polarity = Literal["inlier", "anomalous"]


class IsolationForestConfig(BaseModel):
    n_trees: int = Field(default=100, ge=1)
    subsample_size: int = Field(default=256, ge=2)
    contamination: float = Field(default=0.14, gt=0.0, le=0.5)
    # inlier: a(x) = 1 when the embedding is NOT anomalous
    polarity: Polarity = "inlier"
    seed: int = 0


def average_path_length(n) -> np.ndarray:
    """c(n) = 2 H(n-1) - 2 (n-1) / n, with c(n) = 0 for n <= 1."""
    n = np.asarray(n, dtype=np.float64)
    result = np.zeros_like(n)
    grown = n > 1
    m = n[grown]
    result[grown] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return result if result.ndim else float(result)


def anomaly_score(mean_path_length, subsample_size: int):
    """2 ** (-E[h] / c(psi)); 0.5 when E[h] equals c(psi)."""
    return np.power(2.0, -np.asarray(mean_path_length, dtype=np.float64) / average_path_length(subsample_size))


@dataclass(frozen=True)
class IsolationTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

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

    def path_lengths(self, points: np.ndarray) -> np.ndarray:
        """Edges walked to a leaf plus c(leaf size), for every row of *points*."""
        n = points.shape[0]
        node = np.zeros(n, dtype=np.int64)
        depth = np.zeros(n, dtype=np.float64)
        while True:
            active = np.flatnonzero(self.feature[node] != LEAF)
            if active.shape[0] == 0:
                break
            current = node[active]
            go_left = points[active, self.feature[current]] < self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            depth[active] += 1.0
        return depth + average_path_length(self.size[node])


@dataclass(frozen=True)
class IsolationForestModel:
    trees: Tuple[IsolationTree, ...]
    subsample_size: int
    embedding_size: int
    score_threshold: float
    contamination: float
    polarity: str = "inlier"


def _grow_tree(points: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node(rows: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        size.append(int(rows.shape[0]))
        return len(feature) - 1

    stack = [(new_node(np.arange(points.shape[0])), np.arange(points.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= height_limit or rows.shape[0] <= 1:
            continue
        block = points[rows]
        low, high = block.min(axis=0), block.max(axis=0)
        splittable = np.flatnonzero(high > low)
        if splittable.shape[0] == 0:
            continue
        split = int(rng.choice(splittable))
        value = float(rng.uniform(low[split], high[split]))
        goes_left = block[:, split] < value
        feature[node] = split
        threshold[node] = value
        left[node] = new_node(rows[goes_left])
        right[node] = new_node(rows[~goes_left])
        stack.append((right[node], rows[~goes_left], depth + 1))
        stack.append((left[node], rows[goes_left], depth + 1))

    return IsolationTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(size, dtype=np.int64),
    )


def _as_points(embeddings, expected: Optional[int] = None) -> np.ndarray:
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(1, -1)
    if points.ndim != 2:
        raise DataError(f"embeddings must be a 2-D array, got shape {points.shape}")
    if expected is not None and points.shape[1] != expected:
        raise DataError(f"embedding length {points.shape[1]} != model embedding length {expected}")
    return points


def iforest_train(embeddings: Sequence[Sequence[float]], config: IsolationForestConfig) -> IsolationForestModel:
    """
    Build ``n_trees`` isolation trees on subsamples of size psi and calibrate
    the threshold at the (1 - contamination) quantile of the training scores.
    """
    points = _as_points(embeddings)
    n = points.shape[0]
    if n < config.subsample_size:
        raise DataError(f"need at least subsample_size={config.subsample_size} embeddings, got {n}")
    height_limit = math.ceil(math.log2(config.subsample_size))

    trees = []
    for index in range(config.n_trees):
        rng = make_rng(config.seed, index)
        rows = np.sort(rng.choice(n, size=config.subsample_size, replace=False))
        trees.append(_grow_tree(points[rows], height_limit, rng))

    model = IsolationForestModel(tuple(trees), config.subsample_size, points.shape[1], 0.0,
                                 config.contamination, config.polarity)
    scores = iforest_score_batch(model, points)
    threshold = float(np.quantile(scores, 1.0 - config.contamination, method="inverted_cdf"))
    flagged = float(np.mean(scores > threshold))
    if np.ptp(points, axis=0).max() == 0.0:
        logger.warning("All training embeddings are identical; every point scores %.4f", scores[0])
    logger.info("Isolation forest: %d trees, psi=%d, threshold=%.6f, training anomaly fraction=%.4f",
                config.n_trees, config.subsample_size, threshold, flagged)
    return IsolationForestModel(tuple(trees), config.subsample_size, points.shape[1], threshold,
                                config.contamination, config.polarity)


def iforest_score_batch(model: IsolationForestModel, embeddings) -> np.ndarray:
    points = _as_points(embeddings, model.embedding_size)
    paths = np.stack([tree.path_lengths(points) for tree in model.trees], axis=1)
    # sorted before summing so the mean does not depend on tree order
    mean_path = np.sort(paths, axis=1).sum(axis=1) / len(model.trees)
    return anomaly_score(mean_path, model.subsample_size)


def iforest_score(model: IsolationForestModel, embedding) -> float:
    return float(iforest_score_batch(model, embedding)[0])


def iforest_is_anomalous(model: IsolationForestModel, embedding) -> bool:
    """Strictly above the calibrated threshold; ties count as inliers."""
    return iforest_score(model, embedding) > model.score_threshold


def anomaly_signal(model: IsolationForestModel, embedding) -> int:
    """a(x) in {0, 1} under the model's polarity."""
    anomalous = iforest_is_anomalous(model, embedding)
    if model.polarity == "anomalous":
        return int(anomalous)
    return int(not anomalous)
