"""Central finite-difference check of analytic prompt gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import PromptContext, ToyWorld
from .eraser import AdaptationSession, EraserConfig
from .auxiliary import extract_background
from .errors import UnsupportedOperation

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-5


def finite_difference_gradient(model, pc: PromptContext, loss, step=DEFAULT_STEP) -> np.ndarray:
    base = pc.context_vectors
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = loss.value(model.text_embeddings(pc.with_context(plus)))
        f_minus = loss.value(model.text_embeddings(pc.with_context(minus)))
        grad[idx] = (f_plus - f_minus) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)) / scale)


@dataclass
class GradcheckResult:
    errors: list
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_gradcheck(
    world: ToyWorld,
    pairs: int = 50,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    config: EraserConfig | None = None,
    context_scale: float = 0.05,
    corrupt: float = 0.0,
) -> GradcheckResult:
    """Compare analytic and numeric gradients of the full eraser objective.

    Each of ``pairs`` cases draws a sample from the world and a perturbed
    prompt.  ``corrupt`` scales the analytic gradient by ``1 + corrupt`` and
    exists so the check itself can be shown to fail.
    """
    model = world.model
    if not model.provides_prompt_gradients:
        raise UnsupportedOperation("gradient check needs a backend with prompt gradients")
    config = config or EraserConfig(seed=seed)
    rng = np.random.default_rng([seed, 0x67726164])
    base = model.initial_prompt(world.labels, seed=seed)
    errors = []
    for i in range(pairs):
        sample = world.samples[int(rng.integers(len(world.samples)))]
        ctx = base.context_vectors + context_scale * rng.normal(size=base.context_vectors.shape)
        pc = base.with_context(ctx)
        session = AdaptationSession(model, config, pc, sample_id=f"gradcheck-{i}")
        aux = extract_background(sample.image, sample.mask, sample.id)
        loss = session.objective(sample.image, aux, sample.mask)
        _, analytic = model.prompt_gradient(pc, loss)
        analytic = analytic * (1.0 + corrupt)
        numeric = finite_difference_gradient(model, pc, loss, step)
        errors.append(relative_error(analytic, numeric))
    return GradcheckResult(errors, tolerance)
