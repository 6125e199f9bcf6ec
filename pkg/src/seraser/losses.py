"""Scalar objectives over text embeddings, with analytic gradients.

A loss holds a fixed batch of unit-norm image embeddings ``Z`` (N x D) and a
temperature.  Given the current class text embeddings ``T`` (K x D) it
returns the scalar value and dL/dT.  Backends chain that gradient through
their text encoder to reach the prompt context vectors.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from .core import DEFAULT_TEMPERATURE, log_softmax


class EmbeddingLoss:
    def value_and_grad(self, text_emb: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, text_emb: np.ndarray) -> float:
        return self.value_and_grad(text_emb)[0]


class ConstantLoss(EmbeddingLoss):
    def __init__(self, c=0.0):
        self.c = float(c)

    def value_and_grad(self, text_emb):
        return self.c, np.zeros_like(np.asarray(text_emb, dtype=np.float64))


class _LogitLoss(EmbeddingLoss):
    def __init__(self, image_emb, temperature=DEFAULT_TEMPERATURE):
        z = np.atleast_2d(np.asarray(image_emb, dtype=np.float64))
        if z.shape[0] == 0:
            raise ValueError("loss needs at least one image embedding")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.image_emb = z
        self.temperature = float(temperature)

    def _logits(self, text_emb):
        return self.image_emb @ np.asarray(text_emb, dtype=np.float64).T / self.temperature

    def _grad_from_logits(self, g_logits):
        return g_logits.T @ self.image_emb / self.temperature


class EraseLoss(_LogitLoss):
    """Mean over images of KL(softmax(logits_i) || uniform)."""

    def value_and_grad(self, text_emb):
        logp = log_softmax(self._logits(text_emb))
        p = np.exp(logp)
        n, k = p.shape
        neg_h = (p * logp).sum(axis=1)
        kl = neg_h + math.log(k)
        # d(-H)/dlogit_k = p_k (log p_k + H)
        g = p * (logp - neg_h[:, None]) / n
        return float(kl.mean()), self._grad_from_logits(g)

    def per_image(self, text_emb) -> np.ndarray:
        logp = log_softmax(self._logits(text_emb))
        return (np.exp(logp) * logp).sum(axis=1) + math.log(logp.shape[1])


class MeanEntropyLoss(_LogitLoss):
    """Entropy of the prediction averaged over the image batch."""

    def mean_log_probs(self, text_emb) -> np.ndarray:
        logp = log_softmax(self._logits(text_emb))
        return logsumexp(logp, axis=0) - math.log(logp.shape[0])

    def value_and_grad(self, text_emb):
        logp = log_softmax(self._logits(text_emb))
        p = np.exp(logp)
        n = p.shape[0]
        log_bar = logsumexp(logp, axis=0) - math.log(n)
        h = float(-(np.exp(log_bar) * log_bar).sum())
        # dH/dlogit_jk = p_jk (g_k - sum_k' p_jk' g_k') / n with g = -log p_bar
        g_vec = -log_bar
        g = p * (g_vec[None, :] - (p @ g_vec)[:, None]) / n
        return h, self._grad_from_logits(g)


class WeightedLoss(EmbeddingLoss):
    def __init__(self, terms):
        self.terms = [(float(w), loss) for w, loss in terms if w != 0]

    def value_and_grad(self, text_emb):
        total = 0.0
        grad = np.zeros_like(np.asarray(text_emb, dtype=np.float64))
        for w, loss in self.terms:
            v, g = loss.value_and_grad(text_emb)
            total += w * v
            grad += w * g
        return total, grad
