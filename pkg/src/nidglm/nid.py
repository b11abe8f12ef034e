"""Neural interaction detection on the weights of a trained network.

The strength of a pairwise interaction between input neurons ``I = {a, b}`` is

    s(I) = sum_j zeta_j * mu(|W1[j, a]|, |W1[j, b]|)

where ``zeta = |w_y|^T |W_d| ... |W_2|`` is the influence of each first-layer
neuron on the output and ``mu`` a surrogate (minimum or harmonic mean) of the
incoming absolute weights. Biases play no part.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SURROGATES = ("min", "harmonic_mean")
AGGREGATIONS = ("min", "mean", "max")


@dataclass(frozen=True)
class NeuronPairScore:
    input_index_1: int
    input_index_2: int
    score: float


@dataclass(frozen=True)
class FeaturePairScore:
    feature_1: str
    feature_2: str
    score: float
    aggregation: str = "min"


def _weights_of(weights):
    # accept NnWeights, a CannModel, or a plain (W list, w_y) pair
    if hasattr(weights, "weights"):
        weights = weights.weights
    if isinstance(weights, tuple):
        return list(weights[0]), np.asarray(weights[1]).reshape(-1)
    return list(weights.W), np.asarray(weights.w_y).reshape(-1)


def influence(weights) -> np.ndarray:
    """``zeta`` for the first hidden layer, one entry per neuron."""
    W, w_y = _weights_of(weights)
    if not W:
        raise ValueError("need at least one hidden layer")
    z = np.abs(w_y).astype(np.float64)
    for Wl in reversed(W[1:]):
        if Wl.shape[0] != z.shape[0]:
            raise ValueError(f"shape mismatch: {Wl.shape} after vector of length {z.shape[0]}")
        z = z @ np.abs(Wl)
    if z.shape[0] != W[0].shape[0]:
        raise ValueError("output weights do not match the last hidden layer")
    return z


def _surrogate(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "min":
        return np.minimum(a, b)
    if kind == "harmonic_mean":
        s = a + b
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, 2.0 * a * b / np.where(s > 0, s, 1.0), 0.0)
    raise ValueError(f"unknown surrogate {kind!r}")


def score_matrix(weights, surrogate: str = "min") -> np.ndarray:
    """Symmetric ``q0 x q0`` matrix of pair strengths (zero diagonal)."""
    W, _ = _weights_of(weights)
    zeta = influence(weights)
    A = np.abs(W[0]).astype(np.float64)
    q0 = A.shape[1]
    S = np.zeros((q0, q0))
    for i in range(q0):
        # (q1, q0) block: surrogate of column i against every column
        S[i] = zeta @ _surrogate(A[:, i:i + 1], A, surrogate)
    np.fill_diagonal(S, 0.0)
    return S


def pair_scores(weights, surrogate: str = "min") -> list[NeuronPairScore]:
    """All ``q0 (q0 - 1) / 2`` unordered input-neuron pairs with their score."""
    S = score_matrix(weights, surrogate)
    i, j = np.triu_indices(S.shape[0], k=1)
    return [NeuronPairScore(int(a), int(b), float(S[a, b])) for a, b in zip(i, j)]


def _sources(column_map) -> list[str]:
    out = []
    for c in column_map:
        out.append(c if isinstance(c, str) else c.source)
    return out


def aggregate(scores: Sequence[NeuronPairScore], column_map, aggregation: str = "min") -> list[FeaturePairScore]:
    """Pool neuron-pair scores into feature-pair scores.

    ``column_map`` gives the source feature of every input neuron (strings or
    objects with a ``source`` attribute). Neuron pairs inside one feature are
    dropped; the rest are reduced per feature pair with min, mean or max.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    sources = _sources(column_map)
    order = {}
    for s in sources:
        order.setdefault(s, len(order))
    groups: dict[tuple[str, str], list[float]] = {}
    for ps in scores:
        for idx in (ps.input_index_1, ps.input_index_2):
            if not 0 <= idx < len(sources):
                raise ValueError(f"input index {idx} is not mapped to a feature")
        f1, f2 = sources[ps.input_index_1], sources[ps.input_index_2]
        if f1 == f2:
            continue
        if order[f1] > order[f2]:
            f1, f2 = f2, f1
        groups.setdefault((f1, f2), []).append(ps.score)
    reduce = {"min": min, "max": max, "mean": lambda v: float(np.mean(v))}[aggregation]
    return [FeaturePairScore(f1, f2, float(reduce(v)), aggregation) for (f1, f2), v in groups.items()]


def rank(scores: Sequence[FeaturePairScore], top_k: int | None = None) -> list[FeaturePairScore]:
    """Descending by score; equal scores ordered by the feature-name pair."""
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    ordered = sorted(scores, key=lambda s: (-s.score, s.feature_1, s.feature_2))
    return ordered if top_k is None else ordered[:top_k]


def detect(model, surrogate: str = "min", aggregation: str = "min") -> list[FeaturePairScore]:
    """Ranked feature-pair interactions of a trained CANN's network part."""
    scores = pair_scores(model.weights, surrogate)
    return rank(aggregate(scores, model.input_neurons(), aggregation))


def write_ranking(scores: Sequence[FeaturePairScore], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature_1", "feature_2", "score"])
        for r, s in enumerate(scores, start=1):
            w.writerow([r, s.feature_1, s.feature_2, repr(float(s.score))])


def read_ranking(path) -> list[FeaturePairScore]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [FeaturePairScore(r["feature_1"], r["feature_2"], float(r["score"])) for r in rows]
