"""Comparison methods: plain zero-shot, foreground-only input, and TPT."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy
from .auxiliary import extract_foreground
from .backend import PromptContext, VisionLanguageModel
from .core import DEFAULT_TEMPERATURE, PredictionDistribution, argmax_predict, softmax, xlogy_entropy
from .errors import InvalidArgument, NumericFailure, UnsupportedOperation
from .losses import MeanEntropyLoss
from .seeding import derive_seed


def zero_shot_distribution(m: VisionLanguageModel, prompt: PromptContext, x, temperature=DEFAULT_TEMPERATURE):
    sims = m.text_embeddings(prompt) @ m.encode_image(x)
    probs = softmax(sims / temperature)
    return PredictionDistribution(probs / probs.sum(), prompt.labels)


def vanilla_predict(m, prompt, x, temperature=DEFAULT_TEMPERATURE) -> str:
    return argmax_predict(zero_shot_distribution(m, prompt, x, temperature))


def mask_predict(m, prompt, x, mask, temperature=DEFAULT_TEMPERATURE) -> str:
    return vanilla_predict(m, prompt, extract_foreground(x, mask), temperature)


@dataclass(frozen=True)
class TptConfig:
    num_views: int = 32
    confidence_fraction: float = 0.1
    steps: int = 1
    learning_rate: float = 5e-3
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 1:
            raise InvalidArgument("num_views must be at least 1")
        if not 0 < self.confidence_fraction <= 1:
            raise InvalidArgument("confidence_fraction must lie in (0, 1]")
        if self.steps < 0:
            raise InvalidArgument("steps must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if retained_view_count(self.confidence_fraction, self.num_views) < 1:
            raise InvalidArgument("confidence_fraction * num_views keeps no views")


def retained_view_count(fraction: float, num_views: int) -> int:
    # round first so that 0.3 * 10 = 3.0000000000000004 keeps 3, not 4
    return math.ceil(round(fraction * num_views, 9))


def select_confident_views(probs: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * N)`` lowest-entropy rows, ties by index."""
    probs = np.atleast_2d(probs)
    keep = retained_view_count(fraction, probs.shape[0])
    ent = xlogy_entropy(probs)
    order = np.lexsort((np.arange(len(ent)), ent))
    return np.sort(order[:keep])


def tpt_predict(m, prompt: PromptContext, x, cfg: TptConfig, sample_id=None, return_details=False):
    """Entropy minimization over the most confident augmented views.

    The caller's prompt is never modified; tuning happens on a copy.
    """
    if cfg.steps > 0 and not m.provides_prompt_gradients:
        raise UnsupportedOperation(f"backend {m.name!r} does not provide prompt gradients")
    views = cfg.augment.views(x, derive_seed(cfg.seed, sample_id, "tpt-views"), cfg.num_views)
    z = m.encode_images(views)
    tuned = prompt.copy()
    probs = softmax(z @ m.text_embeddings(tuned).T / cfg.temperature)
    kept = select_confident_views(probs, cfg.confidence_fraction)
    loss = MeanEntropyLoss(z[kept], cfg.temperature)
    trace = []
    for step in range(cfg.steps):
        value, grad = m.prompt_gradient(tuned, loss)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericFailure("non-finite TPT loss or gradient", step)
        trace.append(value)
        tuned.context_vectors = tuned.context_vectors - cfg.learning_rate * grad
    label = vanilla_predict(m, tuned, x, cfg.temperature)
    if return_details:
        return label, {"retained_views": [int(i) for i in kept], "loss_trace": trace}
    return label
