"""Nearest-neighbour defense: classify the retrieved neighbours, not the input.

A query image is mapped to its descriptor, its K nearest database neighbours
are retrieved, their stored softmax vectors are weighted (UW, CBW-E or CBW-D)
and combined by weighted averaging (soft) or weighted voting (hard).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .index import NeighborSet, PredictionStore, search

WEIGHTINGS = ("uw", "cbw-e", "cbw-d")
COMBINATIONS = ("soft", "hard")
NORM_TOL = 1e-4


@dataclass(frozen=True)
class DefenseConfig:
    k: int = 50
    weighting: str = "cbw-d"
    combination: str = "soft"
    m: int = 20
    p: int = 3
    nprobe: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "weighting", self.weighting.lower())
        object.__setattr__(self, "combination", self.combination.lower())
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.p < 1 or self.m < 1:
            raise ValueError("M and P must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.combination not in COMBINATIONS:
            raise ValueError(f"combination must be one of {COMBINATIONS}, got {self.combination!r}")


@dataclass
class DefensePrediction:
    label: int
    scores: np.ndarray          # combined probabilities (soft) or vote tally (hard)
    neighbors: NeighborSet
    weights: np.ndarray = field(repr=False)


def _check_softmax(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("softmax must be a non-empty vector")
    if s.min() < 0 or abs(s.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"not a normalized softmax vector (sum {s.sum():.6f})")
    return s


def weight_uniform(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("K must be >= 1")
    return np.full(k, 1.0 / k)


def weight_cbw_e(s, num_classes: int | None = None) -> float:
    """``|log C + sum_c s_c log s_c|`` with natural log and 0 log 0 = 0."""
    s = _check_softmax(s)
    c = s.size if num_classes is None else num_classes
    nz = s[s > 0]
    return abs(math.log(c) + float(np.sum(nz * np.log(nz))))


def weight_cbw_d(s, m: int = 20, p: int = 3) -> float:
    """Sum of the top-probability gaps to the next ``min(M, C-1)`` entries, raised to ``P``."""
    s = _check_softmax(s)
    top = np.sort(s)[::-1]
    m_eff = min(m, s.size - 1)
    if m_eff < 1:
        raise ValueError("CBW-D needs at least 2 classes")
    return float(np.sum((top[0] - top[1:m_eff + 1]) ** p))


def neighbor_weights(softmaxes, config: DefenseConfig) -> np.ndarray:
    softmaxes = np.asarray(softmaxes)
    if config.weighting == "uw":
        return weight_uniform(len(softmaxes))
    if config.weighting == "cbw-e":
        return np.array([weight_cbw_e(s) for s in softmaxes])
    return np.array([weight_cbw_d(s, config.m, config.p) for s in softmaxes])


def _normalized(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("need at least one weight")
    if w.min() < 0:
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        return np.full(w.size, 1.0 / w.size)  # every neighbour was exactly uniform
    return w / total


def combine_soft(softmaxes, weights):
    """Weighted mean of softmax vectors; returns (class, combined vector)."""
    s = np.asarray(softmaxes, dtype=np.float64)
    w = _normalized(weights)
    if s.ndim != 2 or len(s) != len(w):
        raise ValueError(f"{len(w)} weights for softmax array of shape {s.shape}")
    combined = w @ s
    return int(np.argmax(combined)), combined


def combine_hard(labels, weights, num_classes: int | None = None):
    """Weighted vote over hard labels; returns (class, tally)."""
    labels = np.asarray(labels, dtype=np.int64)
    w = _normalized(weights)
    if labels.shape != w.shape:
        raise ValueError(f"{len(w)} weights for {len(labels)} labels")
    size = max(int(labels.max()) + 1, num_classes or 0)
    tally = np.bincount(labels, weights=w, minlength=size)
    return int(np.argmax(tally)), tally


def combine(softmaxes, config: DefenseConfig):
    weights = neighbor_weights(softmaxes, config)
    if config.combination == "soft":
        label, scores = combine_soft(softmaxes, weights)
    else:
        label, scores = combine_hard(np.argmax(softmaxes, axis=1), weights, np.shape(softmaxes)[1])
    return label, scores, weights


def classify_neighbors(neighbors: NeighborSet, store: PredictionStore, config: DefenseConfig) -> DefensePrediction:
    if len(neighbors) == 0:
        raise ValueError("no neighbours retrieved (empty index?)")
    softmaxes = store.get_many(neighbors.ids)
    label, scores, weights = combine(softmaxes, config)
    return DefensePrediction(label, scores, neighbors, weights)


def defend_classify(image, pipeline, index, store: PredictionStore, config: DefenseConfig) -> DefensePrediction:
    """Descriptor -> K-NN search -> stored softmaxes -> weights -> combination."""
    if len(index) == 0:
        raise ValueError("cannot defend with an empty index")
    image = np.asarray(image)
    if image.ndim == 4:
        if len(image) != 1:
            raise ValueError("defend_classify takes one image; use defend_batch")
        image = image[0]
    query = pipeline.descriptors(image[None])[0]
    return classify_neighbors(search(index, query, config.k, config.nprobe), store, config)


def defend_batch(images, pipeline, index, store: PredictionStore, config: DefenseConfig,
                 max_k: int | None = None):
    """Defended predictions for a batch; returns (labels, neighbor sets)."""
    if len(index) == 0:
        raise ValueError("cannot defend with an empty index")
    queries = pipeline.descriptors(images)
    neighbor_sets = [search(index, q, max_k or config.k, config.nprobe) for q in queries]
    labels = predict_from_neighbors(neighbor_sets, store, config)
    return labels, neighbor_sets


def predict_from_neighbors(neighbor_sets, store: PredictionStore, config: DefenseConfig) -> np.ndarray:
    """Defended labels from precomputed neighbour sets, truncated to ``config.k``."""
    out = np.empty(len(neighbor_sets), dtype=np.int64)
    for i, nbrs in enumerate(neighbor_sets):
        head = NeighborSet(nbrs.ids[:config.k], nbrs.distances[:config.k])
        out[i] = classify_neighbors(head, store, config).label
    return out
