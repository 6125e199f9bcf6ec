"""Probability-space primitives for zero-shot classification.

Everything here works in natural-log units.  The array helpers
(:func:`log_softmax`, :func:`softmax`) operate on the last axis and are
what the loss code uses; the typed wrappers enforce the distribution
invariants at the public boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceUndefined, InvalidArgument

DEFAULT_TEMPERATURE = 0.01

_SUM_TOL = 1e-9
_SIM_TOL = 1e-6


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def xlogy_entropy(p: np.ndarray) -> np.ndarray:
    """-sum p ln p over the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(np.where(p > 0, p * np.log(safe), 0.0)).sum(axis=-1)


@dataclass(frozen=True)
class PredictionDistribution:
    probs: np.ndarray
    labels: tuple

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        labels = tuple(self.labels)
        if probs.ndim != 1:
            raise InvalidArgument("probs must be a vector")
        if len(labels) != probs.shape[0]:
            raise InvalidArgument(f"{probs.shape[0]} probabilities for {len(labels)} labels")
        if len(labels) < 2:
            raise InvalidArgument("a distribution needs at least two classes")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidArgument("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > _SUM_TOL:
            raise InvalidArgument(f"probabilities sum to {probs.sum():.12g}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def k(self) -> int:
        return len(self.labels)

    @classmethod
    def uniform(cls, labels: Sequence[str]) -> "PredictionDistribution":
        k = len(labels)
        return cls(np.full(k, 1.0 / k), tuple(labels))


@dataclass(frozen=True)
class SimilarityVector:
    sims: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        sims = np.array(self.sims, dtype=np.float64)
        if sims.ndim != 1 or sims.shape[0] < 2:
            raise InvalidArgument("sims must be a vector with at least two entries")
        if not self.temperature > 0:
            raise InvalidArgument(f"temperature must be positive, got {self.temperature}")
        if np.any(np.abs(sims) > 1 + _SIM_TOL):
            raise InvalidArgument("cosine similarities must lie in [-1, 1]")
        sims.setflags(write=False)
        object.__setattr__(self, "sims", sims)


@dataclass(frozen=True)
class UniformTarget:
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgument("uniform target needs k >= 2")

    def distribution(self, labels: Sequence[str] | None = None) -> PredictionDistribution:
        labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(self.k))
        if len(labels) != self.k:
            raise InvalidArgument("label count does not match k")
        return PredictionDistribution.uniform(labels)


def softmax_from_similarities(s: SimilarityVector, labels: Sequence[str] | None = None) -> PredictionDistribution:
    if not s.temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {s.temperature}")
    if labels is None:
        labels = tuple(str(i) for i in range(s.sims.shape[0]))
    probs = softmax(s.sims / s.temperature)
    # renormalize once more so the sum invariant holds to the last ulp
    return PredictionDistribution(probs / probs.sum(), tuple(labels))


def kl_divergence(p: PredictionDistribution, q: PredictionDistribution) -> float:
    if p.labels != q.labels:
        raise InvalidArgument("KL divergence between distributions over different label sets")
    support = p.probs > 0
    if np.any(q.probs[support] == 0):
        raise DivergenceUndefined("q assigns zero mass where p is positive")
    pk = p.probs[support]
    kl = float(np.sum(pk * (np.log(pk) - np.log(q.probs[support]))))
    return max(kl, 0.0)


def entropy(p: PredictionDistribution) -> float:
    h = float(xlogy_entropy(p.probs))
    return min(max(h, 0.0), math.log(p.k))


def argmax_predict(p: PredictionDistribution) -> str:
    # np.argmax returns the first maximal index
    return p.labels[int(np.argmax(p.probs))]
