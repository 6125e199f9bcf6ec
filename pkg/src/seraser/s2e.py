"""Shortcut-to-evaluate dataset construction.

Pairs of classes with habitual contexts are swapped (each class is requested
in the other's context), images are generated by a pluggable client, kept
only if a zero-shot presence check finds the subject, and written out as an
evaluation manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .backend import BACKGROUND_ONLY, ToyWorld, ToyWorldSpec
from .baselines import zero_shot_distribution
from .core import DEFAULT_TEMPERATURE
from .errors import GenerationError, InvalidArgument
from .evaluation import write_manifest
from .images import ensure_dir, write_mask, write_png
from .seeding import derive_seed

PROMPT_TEMPLATE = "a photo of a {cls} in {context}"
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ClassPair:
    class_a: str
    class_b: str
    association_a: str
    association_b: str

    def __post_init__(self):
        if not self.class_a or not self.class_b:
            raise InvalidArgument("class names must be non-empty")
        if self.class_a == self.class_b:
            raise InvalidArgument(f"a pair needs two different classes, got {self.class_a!r} twice")
        if not self.association_a or not self.association_b:
            raise InvalidArgument("associations must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPair":
        keys = {"class_a", "class_b", "association_a", "association_b"}
        if not isinstance(d, dict) or set(d) != keys:
            raise InvalidArgument(f"a class pair needs exactly the keys {sorted(keys)}")
        return cls(**d)


@dataclass(frozen=True)
class GenerationRequest:
    subject: str
    context: str
    prompt: str
    count: int = 1
    seed: int = 0


@dataclass(frozen=True)
class GeneratedImage:
    pixels: np.ndarray
    mask: np.ndarray | None
    decoy: bool = False


class GeneratorClient(Protocol):
    identity: str

    def generate(self, request: GenerationRequest) -> list: ...


def swap_associations(p: ClassPair, count: int = 1, seed: int = 0) -> tuple:
    """Each class is requested in the other class's habitual context."""
    return (
        GenerationRequest(p.class_a, p.association_b, PROMPT_TEMPLATE.format(cls=p.class_a, context=p.association_b), count, seed),
        GenerationRequest(p.class_b, p.association_a, PROMPT_TEMPLATE.format(cls=p.class_b, context=p.association_a), count, seed),
    )


def load_pairs(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise InvalidArgument(f"{path}: expected a non-empty list of class pairs")
    return [ClassPair.from_dict(d) for d in data]


class StubGenerator:
    """Offline generator drawing toy-world glyphs over context textures.

    Classes map to glyphs and contexts to textures; each class's habitual
    context is its own association, so the world's image encoder carries the
    matching shortcut.  ``decoy_fraction`` of every batch is rendered without
    a glyph (empty mask) to exercise the presence filter.
    """

    identity = "stub"

    def __init__(self, pairs: Sequence[ClassPair], seed: int = 0, decoy_fraction: float = 0.0):
        if not 0.0 <= decoy_fraction <= 1.0:
            raise InvalidArgument("decoy_fraction must lie in [0, 1]")
        classes, contexts, assoc = [], [], {}
        for p in pairs:
            for cls, ctx in ((p.class_a, p.association_a), (p.class_b, p.association_b)):
                if cls in assoc and assoc[cls] != ctx:
                    raise InvalidArgument(f"class {cls!r} has two associations: {assoc[cls]!r} and {ctx!r}")
                if cls not in assoc:
                    classes.append(cls)
                    assoc[cls] = ctx
                if ctx not in contexts:
                    contexts.append(ctx)
        spec = ToyWorldSpec(
            num_classes=len(classes),
            num_backgrounds=len(contexts),
            num_samples=len(classes),
            num_reference=0,
            seed=seed,
            class_names=tuple(classes),
            background_names=tuple(contexts),
            associations=tuple(contexts.index(assoc[c]) for c in classes),
        )
        self.world = ToyWorld(spec)
        self.model = self.world.model
        self.seed = seed
        self.decoy_fraction = decoy_fraction

    def generate(self, request: GenerationRequest) -> list:
        spec = self.world.spec
        try:
            k = spec.labels.index(request.subject)
            b = spec.backgrounds.index(request.context)
        except ValueError as exc:
            raise GenerationError(f"stub generator cannot draw this request: {exc}", request) from exc
        base = derive_seed(self.seed, request.seed, request.subject, request.context)
        n_decoys = int(round(self.decoy_fraction * request.count))
        decoys = set(np.random.default_rng([base, 0]).permutation(request.count)[:n_decoys].tolist())
        out = []
        for i in range(request.count):
            rng = np.random.default_rng([base, 1, i])
            is_decoy = i in decoys
            pixels, mask = self.world.render(None if is_decoy else k, b, rng)
            out.append(GeneratedImage(pixels, mask, is_decoy))
        return out


_CLIENTS: dict = {}


def register_client(name: str):
    """Decorator registering a generator factory for ``plugin:<name>``."""

    def deco(factory):
        _CLIENTS[name] = factory
        return factory

    return deco


def create_client(name: str, pairs, seed: int = 0, decoy_fraction: float = 0.0):
    if name == "stub":
        return StubGenerator(pairs, seed, decoy_fraction)
    if name.startswith("plugin:"):
        from importlib.metadata import entry_points

        key = name.split(":", 1)[1]
        factory = _CLIENTS.get(key)
        if factory is None:
            for ep in entry_points(group="seraser.generators"):
                if ep.name == key:
                    factory = ep.load()
                    break
        if factory is None:
            raise InvalidArgument(f"no generator plugin registered under {key!r}")
        return factory(pairs=pairs, seed=seed)
    raise InvalidArgument(f"unknown client {name!r}; expected 'stub' or 'plugin:<name>'")


def generate_images(client, req: GenerationRequest) -> list:
    if req.count < 1:
        raise InvalidArgument("count must be at least 1")
    try:
        images = client.generate(req)
    except GenerationError:
        raise
    except Exception as exc:
        raise GenerationError(f"{getattr(client, 'identity', 'client')} failed: {exc}", req) from exc
    if len(images) != req.count:
        raise GenerationError(f"expected {req.count} images, got {len(images)}", req)
    return [im if isinstance(im, GeneratedImage) else GeneratedImage(np.asarray(im), None) for im in images]


def presence_prompt(m, subject: str, seed: int = 0, num_context: int = 4):
    return m.initial_prompt((subject, BACKGROUND_ONLY), seed=seed, num_context=num_context)


def filter_images(m, prompt, images, subject: str, threshold: float = DEFAULT_THRESHOLD, temperature=DEFAULT_TEMPERATURE):
    """Keep images whose two-way presence probability strictly exceeds ``threshold``.

    ``prompt`` must hold exactly the labels (subject, background-only).
    Returns ``(kept, log)`` where ``log`` has one entry per input image.
    """
    if not 0.0 < threshold <= 1.0:
        raise InvalidArgument("threshold must lie in (0, 1]")
    if tuple(prompt.labels) != (subject, BACKGROUND_ONLY):
        raise InvalidArgument(f"presence prompt must have labels ({subject!r}, {BACKGROUND_ONLY!r})")
    kept, log = [], []
    for i, im in enumerate(images):
        score = float(zero_shot_distribution(m, prompt, im.pixels, temperature).probs[0])
        keep = score > threshold
        log.append({"index": i, "subject": subject, "score": score, "kept": keep})
        if keep:
            kept.append(im)
    return kept, log


def emit_manifest(kept: Sequence[tuple], out_dir) -> Path:
    """Write ``(image, label, context)`` triples as PNGs, masks and a manifest.

    Images without a mask get no ``mask`` entry.  Group is ``{class}_{context}``.
    """
    out = ensure_dir(out_dir)
    ensure_dir(out / "images")
    ensure_dir(out / "masks")
    records = []
    counters: dict = {}
    for im, label, context in kept:
        group = f"{label}_{context}"
        idx = counters.get(group, 0)
        counters[group] = idx + 1
        stem = _safe(f"{group}_{idx:05d}")
        rec = {"id": stem, "image": f"images/{stem}.png", "label": label, "group": group}
        write_png(im.pixels, out / rec["image"])
        if im.mask is not None:
            rec["mask"] = f"masks/{stem}.png"
            write_mask(im.mask, out / rec["mask"])
        records.append(rec)
    return write_manifest(records, out / "manifest.jsonl")


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in name)


@dataclass
class BuildResult:
    manifest: Path
    kept: dict = field(default_factory=dict)
    rejected: dict = field(default_factory=dict)
    log: list = field(default_factory=list)


def build_dataset(
    pairs: Sequence[ClassPair],
    client,
    out_dir,
    count: int,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    model=None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> BuildResult:
    """Swap, generate, filter and emit.

    Writes ``filter_log.json`` beside the manifest, and ``world.json`` when the
    client draws from a toy world.
    """
    model = model if model is not None else getattr(client, "model", None)
    if model is None:
        raise InvalidArgument("a model is needed for the presence filter")
    kept_all, log, kept_n, rejected_n = [], [], {}, {}
    for pair in pairs:
        for req in swap_associations(pair, count, seed):
            images = generate_images(client, req)
            prompt = presence_prompt(model, req.subject, seed)
            kept, entries = filter_images(model, prompt, images, req.subject, threshold, temperature)
            group = f"{req.subject}_{req.context}"
            for e in entries:
                e["group"] = group
            log.extend(entries)
            kept_n[group] = kept_n.get(group, 0) + len(kept)
            rejected_n[group] = rejected_n.get(group, 0) + len(images) - len(kept)
            kept_all.extend((im, req.subject, req.context) for im in kept)
    manifest = emit_manifest(kept_all, out_dir)
    world = getattr(client, "world", None)
    if world is not None:
        # lets the evaluator rebuild the exact model that drew the images
        with open(Path(out_dir) / "world.json", "w") as fh:
            json.dump(world.spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    with open(Path(out_dir) / "filter_log.json", "w") as fh:
        json.dump(log, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return BuildResult(manifest, kept_n, rejected_n, log)
