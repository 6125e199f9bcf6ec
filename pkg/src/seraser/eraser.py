"""Test-time prompt tuning that erases features carried by auxiliary images.

Per test sample the shared prompt context is optimized with plain gradient
descent on

    L = erase_weight * mean_e KL(P(y | x_e) || uniform)
      + keep_weight  * H(mean_v P(y | view_v(retained content)))

and the original test image is then classified with the tuned prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy
from .auxiliary import STRATEGIES, AuxiliaryImageSet, build_auxiliary, extract_foreground
from .backend import PromptContext, VisionLanguageModel
from .core import DEFAULT_TEMPERATURE, PredictionDistribution, argmax_predict, softmax
from .errors import InvalidArgument, NumericFailure, UnsupportedOperation
from .losses import EraseLoss, MeanEntropyLoss, WeightedLoss
from .seeding import derive_seed


@dataclass(frozen=True)
class EraserConfig:
    steps: int = 4
    learning_rate: float = 5e-3
    erase_weight: float = 1.0
    keep_weight: float = 1.0
    keep_views: int = 8
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    strategies: tuple = ("annotation-background",)
    temperature: float = DEFAULT_TEMPERATURE
    random_patch_count: int = 4
    reference_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.erase_weight < 0 or self.keep_weight < 0:
            raise InvalidArgument("loss weights must be non-negative")
        if not self.erase_weight + self.keep_weight > 0:
            raise InvalidArgument("erase_weight + keep_weight must be positive")
        if self.keep_views < 1:
            raise InvalidArgument("keep_views must be at least 1")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        strategies = tuple(self.strategies)
        if not strategies:
            raise InvalidArgument("at least one auxiliary strategy is required")
        unknown = set(strategies) - set(STRATEGIES)
        if unknown:
            raise InvalidArgument(f"unknown auxiliary strategies: {sorted(unknown)}")
        object.__setattr__(self, "strategies", strategies)


@dataclass
class Diagnostics:
    strategies: tuple
    steps: int
    loss_trace: list
    erase_before: float
    erase_after: float
    keep_before: float
    keep_after: float
    num_auxiliary: int

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]

    def to_dict(self) -> dict:
        return {
            "strategies": list(self.strategies),
            "steps": self.steps,
            "loss_trace": list(self.loss_trace),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "erase_before": self.erase_before,
            "erase_after": self.erase_after,
            "keep_before": self.keep_before,
            "keep_after": self.keep_after,
            "num_auxiliary": self.num_auxiliary,
        }


class AdaptationSession:
    """Owns the mutable prompt for one test sample at a time.

    The model is only read.  ``prompt`` is restored from ``initial_prompt``
    before and after every :meth:`predict_with_adaptation` call.
    """

    def __init__(
        self,
        model: VisionLanguageModel,
        config: EraserConfig,
        initial_prompt: PromptContext,
        sample_id: str | None = None,
        reference_pool=None,
    ):
        self.model = model
        self.config = config
        self._initial = initial_prompt.copy()
        self.prompt = initial_prompt.copy()
        self.sample_id = sample_id
        self.reference_pool = reference_pool
        self.last_trace: list = []

    @property
    def labels(self) -> tuple:
        return self.prompt.labels

    def reset(self, sample_id=None) -> None:
        self.prompt = self._initial.copy()
        self.last_trace = []
        if sample_id is not None:
            self.sample_id = sample_id

    # -- loss construction ---------------------------------------------

    def _seed(self, purpose):
        return derive_seed(self.config.seed, self.sample_id, purpose)

    def erase_objective(self, aux: AuxiliaryImageSet) -> EraseLoss:
        return EraseLoss(self.model.encode_images(aux.images), self.config.temperature)

    def retained_content(self, x, mask=None) -> np.ndarray:
        return extract_foreground(x, mask) if mask is not None else np.asarray(x, dtype=np.float64)

    def keep_objective(self, x, mask=None) -> MeanEntropyLoss:
        content = self.retained_content(x, mask)
        views = self.config.augment.views(content, self._seed("keep-views"), self.config.keep_views)
        return MeanEntropyLoss(self.model.encode_images(views), self.config.temperature)

    def objective(self, x, aux, mask=None) -> WeightedLoss:
        cfg = self.config
        terms = []
        if cfg.erase_weight > 0:
            terms.append((cfg.erase_weight, self.erase_objective(aux)))
        if cfg.keep_weight > 0:
            terms.append((cfg.keep_weight, self.keep_objective(x, mask)))
        return WeightedLoss(terms)

    # -- losses and adaptation -----------------------------------------

    def erase_loss(self, aux: AuxiliaryImageSet) -> float:
        return self.erase_objective(aux).value(self.model.text_embeddings(self.prompt))

    def keep_loss(self, x, mask=None) -> float:
        return self.keep_objective(x, mask).value(self.model.text_embeddings(self.prompt))

    def build_auxiliary(self, x, mask=None) -> AuxiliaryImageSet:
        cfg = self.config
        return build_auxiliary(
            cfg.strategies,
            x,
            mask=mask,
            model=self.model,
            reference_pool=self.reference_pool,
            seed=cfg.seed,
            sample_id=self.sample_id,
            random_count=cfg.random_patch_count,
            reference_count=cfg.reference_count,
        )

    def adapt_prompt(self, x, aux: AuxiliaryImageSet, mask=None) -> PromptContext:
        if not self.model.provides_prompt_gradients:
            raise UnsupportedOperation(f"backend {self.model.name!r} does not provide prompt gradients")
        cfg = self.config
        loss = self.objective(x, aux, mask)
        trace = []
        for step in range(cfg.steps):
            value, grad = self.model.prompt_gradient(self.prompt, loss)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise NumericFailure("non-finite loss or gradient", step)
            trace.append(value)
            self.prompt.context_vectors = self.prompt.context_vectors - cfg.learning_rate * grad
        final = loss.value(self.model.text_embeddings(self.prompt))
        if not np.isfinite(final):
            raise NumericFailure("non-finite loss", cfg.steps)
        trace.append(final)
        self.last_trace = trace
        return self.prompt.copy()

    def distribution(self, x, prompt: PromptContext | None = None) -> PredictionDistribution:
        prompt = prompt if prompt is not None else self.prompt
        z = self.model.encode_image(x)
        sims = self.model.text_embeddings(prompt) @ z
        probs = softmax(sims / self.config.temperature)
        return PredictionDistribution(probs / probs.sum(), prompt.labels)

    def predict_with_adaptation(self, x, mask=None, sample_id=None):
        """Returns ``(label, distribution, Diagnostics)``; the prompt is reset afterwards."""
        self.reset(sample_id)
        try:
            aux = self.build_auxiliary(x, mask)
            keep_mask = mask
            erase = self.erase_objective(aux)
            text0 = self.model.text_embeddings(self.prompt)
            erase_before = erase.value(text0)
            keep = self.keep_objective(x, keep_mask)
            keep_before = keep.value(text0)
            adapted = self.adapt_prompt(x, aux, keep_mask)
            text1 = self.model.text_embeddings(adapted)
            dist = self.distribution(x, adapted)
            diag = Diagnostics(
                strategies=self.config.strategies,
                steps=self.config.steps,
                loss_trace=list(self.last_trace),
                erase_before=float(erase_before),
                erase_after=float(erase.value(text1)),
                keep_before=float(keep_before),
                keep_after=float(keep.value(text1)),
                num_auxiliary=len(aux),
            )
        finally:
            self.reset()
        return argmax_predict(dist), dist, diag


def erase_loss(session: AdaptationSession, aux: AuxiliaryImageSet) -> float:
    return session.erase_loss(aux)


def keep_loss(session: AdaptationSession, x, mask=None) -> float:
    return session.keep_loss(x, mask)


def adapt_prompt(session: AdaptationSession, x, aux: AuxiliaryImageSet, mask=None) -> PromptContext:
    return session.adapt_prompt(x, aux, mask)


def predict_with_adaptation(session: AdaptationSession, x, mask=None, sample_id=None):
    return session.predict_with_adaptation(x, mask, sample_id)
