"""Run configuration: one JSON document, strict keys, documented defaults."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import ALL_OPS, AugmentPolicy
from .baselines import TptConfig
from .core import DEFAULT_TEMPERATURE
from .eraser import EraserConfig
from .errors import ReportError, SEraserError

METHODS = ("vanilla", "mask", "tpt", "seraser")
SEED_ENV = "SERASER_SEED"


@dataclass
class ModelSection:
    backend: str = "toy"
    world: str | None = None
    input_size: int = 64
    temperature: float = DEFAULT_TEMPERATURE
    num_context: int = 4
    labels: list | None = None


@dataclass
class EraserSection:
    steps: int = 4
    learning_rate: float = 5e-3
    erase_weight: float = 1.0
    keep_weight: float = 1.0
    keep_views: int = 8
    ops_per_view: int = 2
    magnitude: int = 9
    augment_ops: list = field(default_factory=lambda: list(ALL_OPS))
    strategies: list = field(default_factory=lambda: ["annotation-background"])
    random_patch_count: int = 4
    reference_count: int = 1
    reference_pool: str | None = None


@dataclass
class TptSection:
    num_views: int = 32
    confidence_fraction: float = 0.1
    steps: int = 1
    learning_rate: float = 5e-3
    ops_per_view: int = 2
    magnitude: int = 9


@dataclass
class EvalSection:
    manifest: str | None = None
    method: str = "vanilla"
    skip_errors: bool = False
    parallelism: int = 1
    seed: int = 0


_SECTIONS = {"model": ModelSection, "eraser": EraserSection, "tpt": TptSection, "eval": EvalSection}


def _check_value(path, value, annotation):
    optional = "None" in str(annotation)
    if value is None:
        if optional:
            return None
        raise ReportError(f"{path}: null is not allowed")
    kind = str(annotation).replace(" | None", "")
    if kind == "bool":
        ok = isinstance(value, bool)
    elif kind == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind == "str":
        ok = isinstance(value, str)
    elif kind == "list":
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ReportError(f"{path}: expected {kind}, got {type(value).__name__}")
    return value


def _load_section(cls, data, path):
    if not isinstance(data, dict):
        raise ReportError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ReportError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        kwargs[name] = _check_value(f"{path}.{name}", value, f.type)
    return cls(**kwargs)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    eraser: EraserSection = field(default_factory=EraserSection)
    tpt: TptSection = field(default_factory=TptSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ReportError("config: expected a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - {"output"})
        if unknown:
            raise ReportError(f"{unknown[0]}: unknown key")
        sections = {name: _load_section(sec, data.get(name, {}), name) for name, sec in _SECTIONS.items()}
        output = data.get("output")
        if output is not None and not isinstance(output, str):
            raise ReportError("output: expected str")
        cfg = cls(**sections, output=output)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.eval.method not in METHODS:
            raise ReportError(f"eval.method: expected one of {METHODS}, got {self.eval.method!r}")
        if self.eval.parallelism < 1:
            raise ReportError("eval.parallelism: must be at least 1")
        if not self.model.temperature > 0:
            raise ReportError("model.temperature: must be positive")
        for section, build in (("eraser", self.eraser_config), ("tpt", self.tpt_config)):
            try:
                build()
            except SEraserError as exc:
                raise ReportError(f"{section}: {exc}") from exc

    def apply_seed_env(self, environ=None) -> None:
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is not None and raw != "":
            try:
                self.eval.seed = int(raw)
            except ValueError as exc:
                raise ReportError(f"{SEED_ENV}: expected an integer, got {raw!r}") from exc

    def eraser_config(self) -> EraserConfig:
        e = self.eraser
        return EraserConfig(
            steps=e.steps,
            learning_rate=e.learning_rate,
            erase_weight=e.erase_weight,
            keep_weight=e.keep_weight,
            keep_views=e.keep_views,
            augment=AugmentPolicy(e.ops_per_view, e.magnitude, tuple(e.augment_ops)),
            strategies=tuple(e.strategies),
            temperature=self.model.temperature,
            random_patch_count=e.random_patch_count,
            reference_count=e.reference_count,
            seed=self.eval.seed,
        )

    def tpt_config(self) -> TptConfig:
        t = self.tpt
        return TptConfig(
            num_views=t.num_views,
            confidence_fraction=t.confidence_fraction,
            steps=t.steps,
            learning_rate=t.learning_rate,
            augment=AugmentPolicy(t.ops_per_view, t.magnitude),
            temperature=self.model.temperature,
            seed=self.eval.seed,
        )

    def fingerprint(self) -> str:
        """Hash of everything that can change results (not output path or worker count)."""
        d = self.to_dict()
        d.pop("output", None)
        d["eval"].pop("parallelism", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolve(self, base: Path) -> None:
        """Make relative file paths relative to ``base`` (the config file's directory)."""
        for section, key in (("model", "world"), ("eraser", "reference_pool"), ("eval", "manifest")):
            obj = getattr(self, section)
            value = getattr(obj, key)
            if value is not None and not os.path.isabs(value):
                setattr(obj, key, str(base / value))
        if self.output is not None and not os.path.isabs(self.output):
            self.output = str(base / self.output)
