"""Random forest of CART trees (Gini, bootstrap, sqrt(F) features per split)."""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np

from app.core.errors import DataError
from app.nn.initializers import derive_seed

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == LEAF`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    histogram: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def leaf_classes(self) -> np.ndarray:
        return np.argmax(self.histogram, axis=1)

    def apply(self, features: np.ndarray) -> np.ndarray:
        node = np.zeros(features.shape[0], dtype=np.int64)
        rows = np.arange(features.shape[0])
        while True:
            internal = self.feature[node] != LEAF
            if not internal.any():
                return node
            current = node[internal]
            go_left = features[rows[internal], self.feature[current]] <= self.threshold[current]
            node[internal] = np.where(go_left, self.left[current], self.right[current])


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    num_trees: int
    max_depth: int
    seed: int
    num_classes: int
    num_features: int

    def serialized_size(self) -> int:
        """Bytes at 32 bits per stored number: four per node plus the leaf histogram."""
        return sum(4 * tree.node_count * (4 + self.num_classes) for tree in self.trees)


def _best_split(values: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, float] | None:
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    valid = sorted_values[1:] > sorted_values[:-1]
    if not valid.any():
        return None
    count = values.shape[0]
    left = np.cumsum(np.eye(num_classes)[labels[order]], axis=0)[:-1]
    right = left[-1] + np.eye(num_classes)[labels[order[-1]]] - left
    n_left = np.arange(1, count)[:, np.newaxis]
    n_right = count - n_left
    gini_left = 1.0 - np.sum((left / n_left) ** 2, axis=1)
    gini_right = 1.0 - np.sum((right / n_right) ** 2, axis=1)
    weighted = (n_left[:, 0] * gini_left + n_right[:, 0] * gini_right) / count
    weighted = np.where(valid, weighted, np.inf)
    position = int(np.argmin(weighted))
    return float(weighted[position]), float((sorted_values[position] + sorted_values[position + 1]) / 2.0)


def _grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    max_depth: int,
    min_samples_split: int,
    rng: np.random.Generator,
) -> DecisionTree:
    num_features = features.shape[1]
    subset = max(1, int(math.sqrt(num_features)))
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    histogram: list[np.ndarray] = []

    def new_node(index: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        histogram.append(np.bincount(labels[index], minlength=num_classes).astype(np.float64))
        return len(feature) - 1

    stack = [(new_node(np.arange(labels.shape[0])), np.arange(labels.shape[0]), 0)]
    while stack:
        node, index, depth = stack.pop()
        if depth >= max_depth or index.size < min_samples_split or np.count_nonzero(histogram[node]) <= 1:
            continue
        best: tuple[float, int, float] | None = None
        candidates = rng.permutation(num_features)
        # keep drawing features past the sqrt(F) subset only while no valid split exists
        for drawn, f in enumerate(candidates):
            if drawn >= subset and best is not None:
                break
            found = _best_split(features[index, f], labels[index], num_classes)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        _, f, cut = best
        goes_left = features[index, f] <= cut
        left_index, right_index = index[goes_left], index[~goes_left]
        feature[node], threshold[node] = f, cut
        left[node] = new_node(left_index)
        right[node] = new_node(right_index)
        stack.append((right[node], right_index, depth + 1))
        stack.append((left[node], left_index, depth + 1))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        histogram=np.vstack(histogram),
    )


def forest_fit(
    features: np.ndarray,
    labels: np.ndarray,
    num_trees: int = 100,
    max_depth: int = 12,
    seed: int = 0,
    *,
    min_samples_split: int = 2,
    bootstrap: bool = True,
    num_classes: int | None = None,
) -> ForestModel:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError("forest_fit needs a non-empty [N, F] feature matrix")
    if labels.shape != (features.shape[0],):
        raise DataError(f"{labels.shape[0]} labels for {features.shape[0]} samples")
    if labels.min() < 0:
        raise DataError("labels must be >= 0")
    if num_trees < 1 or max_depth < 0:
        raise ValueError("num_trees must be >= 1 and max_depth >= 0")
    classes = num_classes or int(labels.max()) + 1
    trees = []
    for tree_index in range(num_trees):
        rng = np.random.default_rng(derive_seed(seed, tree_index))
        if bootstrap:
            sample = rng.integers(0, features.shape[0], size=features.shape[0])
        else:
            sample = np.arange(features.shape[0])
        trees.append(_grow_tree(features[sample], labels[sample], classes, max_depth, min_samples_split, rng))
    logger.debug("Fitted %d trees, %d nodes in total", num_trees, sum(tree.node_count for tree in trees))
    return ForestModel(trees, num_trees, max_depth, seed, classes, features.shape[1])


def forest_predict(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Majority vote of the trees' leaf classes."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.num_features:
        raise DataError(f"expected [N, {model.num_features}] features, got {features.shape}")
    leaf_votes = np.stack([tree.leaf_classes()[tree.apply(features)] for tree in model.trees])
    return majority_vote(leaf_votes, model.num_classes)


def majority_vote(tree_votes: np.ndarray, num_classes: int) -> np.ndarray:
    """Column-wise majority of ``[num_trees, N]`` class votes; ties go to the lower class index."""
    tree_votes = np.asarray(tree_votes, dtype=np.int64)
    if tree_votes.ndim != 2:
        raise DataError(f"expected [num_trees, N] votes, got {tree_votes.shape}")
    counts = np.zeros((tree_votes.shape[1], num_classes), dtype=np.int64)
    columns = np.arange(tree_votes.shape[1])
    for votes in tree_votes:
        counts[columns, votes] += 1
    return np.argmax(counts, axis=1)
