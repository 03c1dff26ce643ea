"""Band partitioning, per-band CART learners, and hierarchical score aggregation.

Each spectral band (a group of adjacent components) feeds one weak learner
that emits a three-class label per pixel; labels are collapsed to binary
high-uptake tags and averaged over bands (pixel score), mask pixels (patch
score) and patches (vertebra score); a patient is pathological when any
vertebra score exceeds the cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Label3
from .errors import ContractViolation

N_CLASSES = 3
DEFAULT_CUTOFF = 0.45
MIN_PARENT = 10  # nodes smaller than this are not split further
FOREST_SIZE = 50


@dataclass(frozen=True)
class BandConfig:
    """Partition of the scale axis into bands of adjacent components."""

    n_components: int = 120
    scales_per_band: int = 5
    overlapping: bool = False

    def __post_init__(self):
        if self.n_components < 1:
            raise ContractViolation(f"n_components must be >= 1, got {self.n_components}")
        if not 1 <= self.scales_per_band <= self.n_components:
            raise ContractViolation(
                f"scales_per_band {self.scales_per_band} out of range for "
                f"{self.n_components} components")
        if not self.overlapping and self.n_components % self.scales_per_band != 0:
            raise ContractViolation(
                f"scales_per_band {self.scales_per_band} does not divide "
                f"{self.n_components} components")

    @property
    def n_bands(self) -> int:
        if self.overlapping:
            return self.n_components - self.scales_per_band + 1
        return self.n_components // self.scales_per_band

    def band_slice(self, j: int) -> slice:
        if not 0 <= j < self.n_bands:
            raise ContractViolation(f"band index {j} out of range")
        if self.overlapping:
            return slice(j, j + self.scales_per_band)
        s = self.scales_per_band
        return slice(j * s, (j + 1) * s)


def band_split(signature, config: BandConfig) -> list[np.ndarray]:
    """Split a signature vector (or row matrix) into per-band feature blocks."""
    sig = np.asarray(signature, dtype=np.float64)
    if sig.shape[-1] != config.n_components:
        raise ContractViolation(
            f"signature length {sig.shape[-1]} != {config.n_components}")
    return [sig[..., config.band_slice(j)] for j in range(config.n_bands)]


@dataclass
class DecisionTree:
    """CART with Gini impurity, stored as preorder node arrays.

    ``feature[i] < 0`` marks a leaf; ``counts`` holds the training class
    distribution of each node (a leaf predicts its argmax, ties to the
    lowest class, i.e. NORMAL first).
    """

    feature: np.ndarray    # int32
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    counts: np.ndarray     # int64 (n_nodes, N_CLASSES)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        idx = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feats = self.feature[idx]
            rows = np.nonzero(feats >= 0)[0]
            if rows.size == 0:
                break
            at = idx[rows]
            go_left = X[rows, feats[rows]] <= self.threshold[at]
            idx[rows] = np.where(go_left, self.left[at], self.right[at])
        return np.argmax(self.counts[idx], axis=1)


def _gini(counts: np.ndarray, n: int) -> float:
    p = counts / n
    return 1.0 - float((p * p).sum())


def _best_split(X, y, feature_ids, parent_gini, n):
    """(gain, feature, threshold) of the best candidate split, or None.

    Ties break to the lowest feature index, then the lowest threshold
    (thresholds scan in ascending order per feature).
    """
    best = None
    for f in feature_ids:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        sv = col[order]
        cuts = np.nonzero(sv[:-1] != sv[1:])[0]
        if cuts.size == 0:
            continue
        onehot = np.zeros((n, N_CLASSES))
        onehot[np.arange(n), y[order]] = 1.0
        cum = np.cumsum(onehot, axis=0)
        left_counts = cum[cuts]
        n_left = (cuts + 1).astype(np.float64)
        right_counts = cum[-1] - left_counts
        n_right = n - n_left
        gini_l = 1.0 - ((left_counts / n_left[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right_counts / n_right[:, None]) ** 2).sum(axis=1)
        gains = parent_gini - (n_left * gini_l + n_right * gini_r) / n
        k = int(np.argmax(gains))  # first max: lowest threshold (sv ascending)
        if gains[k] > 0.0 and (best is None or gains[k] > best[0]):
            best = (float(gains[k]), int(f), float(0.5 * (sv[cuts[k]] + sv[cuts[k] + 1])))
    return best


def fit_tree(X, y, *, min_parent: int = MIN_PARENT, rng=None,
             max_features: int | None = None) -> DecisionTree:
    """Grow a CART: split while impurity decreases and nodes hold >= min_parent
    rows; no depth cap, no pruning.  ``max_features`` enables per-split feature
    subsampling (used by forests) driven by ``rng``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation("fit_tree requires a non-empty 2-D feature matrix")
    if y.shape != (X.shape[0],):
        raise ContractViolation("label count does not match row count")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ContractViolation("labels out of range")
    d = X.shape[1]
    feature, threshold, left, right, counts = [], [], [], [], []
    # Stack of (row indices, parent slot, is_left); preorder: left pushed last.
    stack = [(np.arange(X.shape[0]), -1, False)]
    while stack:
        rows, parent, is_left = stack.pop()
        slot = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = slot
        ny = y[rows]
        n = rows.size
        cnt = np.bincount(ny, minlength=N_CLASSES)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(cnt)
        if cnt.max() == n or n < min_parent:
            continue
        if max_features is not None and max_features < d:
            feature_ids = np.sort(rng.choice(d, size=max_features, replace=False))
        else:
            feature_ids = np.arange(d)
        found = _best_split(X[rows], ny, feature_ids, _gini(cnt, n), n)
        if found is None:
            continue
        _, f, thr = found
        feature[slot] = f
        threshold[slot] = thr
        mask = X[rows, f] <= thr
        stack.append((rows[~mask], slot, False))
        stack.append((rows[mask], slot, True))
    return DecisionTree(np.array(feature, dtype=np.int32),
                        np.array(threshold, dtype=np.float64),
                        np.array(left, dtype=np.int32),
                        np.array(right, dtype=np.int32),
                        np.array(counts, dtype=np.int64))


@dataclass
class Forest:
    """Bagged trees with per-split feature subsampling; majority vote with
    ties resolved to NORMAL."""

    trees: list[DecisionTree]
    seeds: list[int]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        votes = np.zeros((X.shape[0], N_CLASSES), dtype=np.int64)
        for tree in self.trees:
            votes[np.arange(X.shape[0]), tree.predict(X)] += 1
        top = votes.max(axis=1)
        labels = np.argmax(votes, axis=1)
        tied = (votes == top[:, None]).sum(axis=1) > 1
        labels[tied] = int(Label3.NORMAL)
        return labels


@dataclass
class EnsembleModel:
    """One weak learner per band plus the decision cutoff."""

    band_config: BandConfig
    mode: str  # "tree" or "forest"
    learners: list
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if self.mode not in ("tree", "forest"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if len(self.learners) != self.band_config.n_bands:
            raise ContractViolation(
                f"{len(self.learners)} learners for {self.band_config.n_bands} bands")


def _tree_seed(seed: int, band: int, tree: int) -> int:
    return int(np.random.SeedSequence((seed, band, tree)).generate_state(1)[0])


def fit_band_ensemble(X, y, config: BandConfig, mode: str = "tree", *,
                      seed: int = 0, n_trees: int = FOREST_SIZE,
                      cutoff: float = DEFAULT_CUTOFF) -> EnsembleModel:
    """Train one learner per band; learner j sees only band j's features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation("training matrix must be non-empty and 2-D")
    if X.shape[1] != config.n_components:
        raise ContractViolation(
            f"feature count {X.shape[1]} != n_components {config.n_components}")
    learners = []
    s = config.scales_per_band
    for j in range(config.n_bands):
        Xb = X[:, config.band_slice(j)]
        if mode == "tree":
            learners.append(fit_tree(Xb, y))
        elif mode == "forest":
            m = X.shape[0]
            max_features = math.ceil(math.sqrt(s))
            trees, seeds = [], []
            for t in range(n_trees):
                ts = _tree_seed(seed, j, t)
                rng = np.random.default_rng(ts)
                rows = rng.integers(0, m, size=m)
                trees.append(fit_tree(Xb[rows], y[rows], rng=rng,
                                      max_features=max_features))
                seeds.append(ts)
            learners.append(Forest(trees, seeds))
        else:
            raise ContractViolation(f"unknown mode {mode!r}")
    return EnsembleModel(config, mode, learners, cutoff)


def predict_tags(model: EnsembleModel, X) -> np.ndarray:
    """Binary high-uptake tag per (row, band) after the LU->NORMAL remap."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.band_config.n_components:
        raise ContractViolation(
            f"signature length {X.shape[1]} != "
            f"{model.band_config.n_components} components")
    tags = np.empty((X.shape[0], model.band_config.n_bands), dtype=np.uint8)
    for j, learner in enumerate(model.learners):
        labels = learner.predict(X[:, model.band_config.band_slice(j)])
        tags[:, j] = (labels == int(Label3.PATH_HU)).astype(np.uint8)
    return tags


def predict_pixel(model: EnsembleModel, signature) -> float:
    """Mean of the per-band binary tags for one pixel signature."""
    return float(predict_tags(model, signature).mean())


def score_patch(pixel_scores, expected: int = 13) -> float:
    """Mean of the masked pixel scores (exactly the mask's pixel count)."""
    scores = np.asarray(pixel_scores, dtype=np.float64)
    if scores.shape != (expected,):
        raise ContractViolation(f"expected {expected} pixel scores, got {scores.shape}")
    return float(scores.mean())


def score_vertebra(patch_scores) -> float:
    """Mean of 1..6 patch scores."""
    scores = np.asarray(patch_scores, dtype=np.float64)
    if scores.ndim != 1 or not 1 <= scores.size <= 6:
        raise ContractViolation(f"a vertebra has 1..6 patch scores, got {scores.shape}")
    return float(scores.mean())


class PatientDecision(NamedTuple):
    pathological: bool
    score: float


def classify_patient(vertebra_scores, cutoff: float = DEFAULT_CUTOFF) -> PatientDecision:
    """Pathological iff any vertebra score exceeds the cutoff; the patient
    score (max over vertebrae) drives ROC sweeps."""
    scores = np.asarray(vertebra_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractViolation("at least one vertebra score is required")
    top = float(scores.max())
    return PatientDecision(top > cutoff, top)
