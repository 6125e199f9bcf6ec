"""Test-time erasure of spurious-feature shortcuts in zero-shot classifiers.

A per-sample :class:`AdaptationSession` tunes shared prompt context vectors so
that images carrying only spurious content (backgrounds, patches, reference
images) are classified uniformly, while the retained content stays confident.
"""

from .backend import (
    BACKGROUND_ONLY,
    PromptContext,
    ToyBackend,
    ToyWorld,
    ToyWorldSpec,
    VisionLanguageModel,
    build_toy_world,
    create_backend,
    register_adapter,
)
from .baselines import TptConfig, mask_predict, tpt_predict, vanilla_predict
from .config import RunConfig
from .core import (
    DEFAULT_TEMPERATURE,
    PredictionDistribution,
    SimilarityVector,
    UniformTarget,
    argmax_predict,
    entropy,
    kl_divergence,
    softmax_from_similarities,
)
from .eraser import AdaptationSession, EraserConfig
from .evaluation import GroupedSample, GroupReport, evaluate, load_manifest, read_report, select_hard_subset, write_report

__version__ = "0.1.0"
