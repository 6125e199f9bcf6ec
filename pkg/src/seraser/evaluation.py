"""Grouped evaluation: manifests, per-group / worst-group accuracy, reports.

Manifest: JSON Lines, one object per sample with keys ``id``, ``image``,
``label``, ``group`` and optional ``mask``.  Relative paths resolve against
the manifest's directory.

Report: one JSON document (``schema_version`` "1") holding per-group counts,
sample-weighted average accuracy, worst-group accuracy, the seed, the config
fingerprint and one record per sample.
"""

from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .baselines import mask_predict, tpt_predict, vanilla_predict
from .config import METHODS, RunConfig
from .eraser import AdaptationSession
from .errors import InvalidArgument, ReportError, SEraserError, StrategyUnavailable
from .images import read_mask, read_png

SCHEMA_VERSION = "1"
MANIFEST_KEYS = {"id", "image", "label", "group", "mask"}


@dataclass(frozen=True)
class GroupedSample:
    """One test image.  ``image``/``mask`` are paths or already-loaded arrays."""

    id: str
    image: object
    label: str
    group: str
    mask: object = None

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("sample id must be non-empty")
        if not self.group:
            raise InvalidArgument(f"sample {self.id!r} has an empty group")

    def load_image(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return read_png(self.image)

    def load_mask(self, shape=None):
        if self.mask is None:
            return None
        if isinstance(self.mask, np.ndarray):
            return self.mask
        return read_mask(self.mask, shape)


def load_manifest(path, labels: Sequence[str] | None = None) -> list[GroupedSample]:
    path = Path(path)
    base = path.parent
    samples, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}: line {lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise ReportError(f"{path}: line {lineno}: expected an object")
            unknown = sorted(set(rec) - MANIFEST_KEYS)
            if unknown:
                raise ReportError(f"{path}: line {lineno}: unknown key {unknown[0]!r}")
            for key in ("id", "image", "label", "group"):
                if not isinstance(rec.get(key), str) or not rec[key]:
                    raise ReportError(f"{path}: line {lineno}: field {key!r} must be a non-empty string")
            if "mask" in rec and rec["mask"] is not None and not isinstance(rec["mask"], str):
                raise ReportError(f"{path}: line {lineno}: field 'mask' must be a string")
            if rec["id"] in seen:
                raise ReportError(f"{path}: line {lineno}: duplicate id {rec['id']!r}")
            if labels is not None and rec["label"] not in labels:
                raise ReportError(f"{path}: line {lineno}: label {rec['label']!r} is not in the task label set")
            seen.add(rec["id"])
            mask = rec.get("mask")
            samples.append(
                GroupedSample(
                    id=rec["id"],
                    image=str(base / rec["image"]),
                    label=rec["label"],
                    group=rec["group"],
                    mask=str(base / mask) if mask else None,
                )
            )
    if not samples:
        raise ReportError(f"{path}: manifest is empty")
    return samples


def write_manifest(records: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def task_labels(samples: Sequence[GroupedSample], labels=None, model=None) -> tuple:
    """Configured labels, else the model's own class list, else the manifest's labels sorted."""
    if labels:
        return tuple(labels)
    names = getattr(model, "class_names", None)
    if names:
        return tuple(names)
    # sorted so the label order never depends on manifest order
    return tuple(sorted({s.label for s in samples}))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": [
        "schema_version",
        "method",
        "per_group",
        "avg_accuracy",
        "worst_group_accuracy",
        "n",
        "seed",
        "config_fingerprint",
        "samples",
        "errors",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "method": {"type": "string"},
        "per_group": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["correct", "total", "accuracy"],
                "properties": {
                    "correct": {"type": "integer", "minimum": 0},
                    "total": {"type": "integer", "minimum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "avg_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "worst_group_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "n": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "config_fingerprint": {"type": "string"},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "label", "group", "prediction", "correct"],
                "properties": {
                    "id": {"type": "string"},
                    "label": {"type": "string"},
                    "group": {"type": "string"},
                    "prediction": {"type": "string"},
                    "correct": {"type": "boolean"},
                    "diagnostics": {"type": "object"},
                },
            },
        },
        "errors": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "error"],
                "properties": {"id": {"type": "string"}, "error": {"type": "string"}},
            },
        },
    },
}


@dataclass
class GroupReport:
    method: str
    per_group: dict
    avg_accuracy: float
    worst_group_accuracy: float
    n: int
    seed: int
    config_fingerprint: str
    samples: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    @classmethod
    def from_records(cls, method, records, seed, config_fingerprint, errors=()) -> "GroupReport":
        records = sorted(records, key=lambda r: r["id"])
        counts: dict = {}
        for r in records:
            c = counts.setdefault(r["group"], [0, 0])
            c[0] += bool(r["correct"])
            c[1] += 1
        per_group = {
            g: {"correct": c, "total": t, "accuracy": c / t} for g, (c, t) in sorted(counts.items())
        }
        n = len(records)
        correct = sum(v["correct"] for v in per_group.values())
        avg = correct / n if n else 0.0
        worst = min((v["accuracy"] for v in per_group.values()), default=0.0)
        return cls(
            method=method,
            per_group=per_group,
            avg_accuracy=avg,
            worst_group_accuracy=worst,
            n=n,
            seed=int(seed),
            config_fingerprint=config_fingerprint,
            samples=list(records),
            errors=sorted(errors, key=lambda e: e["id"]),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "method": self.method,
            "per_group": self.per_group,
            "avg_accuracy": self.avg_accuracy,
            "worst_group_accuracy": self.worst_group_accuracy,
            "n": self.n,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "samples": self.samples,
            "errors": self.errors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupReport":
        validate_report(d)
        return cls(
            method=d["method"],
            per_group=d["per_group"],
            avg_accuracy=d["avg_accuracy"],
            worst_group_accuracy=d["worst_group_accuracy"],
            n=d["n"],
            seed=d["seed"],
            config_fingerprint=d["config_fingerprint"],
            samples=d["samples"],
            errors=d["errors"],
            schema_version=d["schema_version"],
        )


def validate_report(d) -> None:
    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ReportError(f"report field {where}: {exc.message}") from exc
    total = sum(g["total"] for g in d["per_group"].values())
    if total != d["n"]:
        raise ReportError(f"report field n: per-group totals sum to {total}, not {d['n']}")


def write_report(report: GroupReport, path) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    d = report.to_dict()
    validate_report(d)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_report(path) -> GroupReport:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return GroupReport.from_dict(d)


# ---------------------------------------------------------------------------
# running methods
# ---------------------------------------------------------------------------


def method_needs_mask(method: str, config: RunConfig) -> bool:
    return method == "mask" or (method == "seraser" and "annotation-background" in config.eraser.strategies)


def predict_sample(method, model, prompt, sample: GroupedSample, config: RunConfig, reference_pool=None):
    """Returns ``(prediction, diagnostics_or_None)`` for one sample."""
    x = sample.load_image()
    mask = sample.load_mask(x.shape)
    if method_needs_mask(method, config) and mask is None:
        raise StrategyUnavailable("mask", sample.id)
    tau = config.model.temperature
    if method == "vanilla":
        return vanilla_predict(model, prompt, x, tau), None
    if method == "mask":
        return mask_predict(model, prompt, x, mask, tau), None
    if method == "tpt":
        label, details = tpt_predict(model, prompt, x, config.tpt_config(), sample.id, return_details=True)
        return label, details
    if method == "seraser":
        session = AdaptationSession(model, config.eraser_config(), prompt, sample.id, reference_pool)
        try:
            label, _, diag = session.predict_with_adaptation(x, mask, sample.id)
        except StrategyUnavailable as exc:
            raise StrategyUnavailable(exc.missing, sample.id) from exc
        return label, diag.to_dict()
    raise InvalidArgument(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate(
    method: str,
    manifest: Sequence[GroupedSample],
    config: RunConfig,
    model,
    prompt=None,
    reference_pool=None,
) -> GroupReport:
    if not manifest:
        raise InvalidArgument("manifest is empty")
    labels = task_labels(manifest, config.model.labels, model)
    for s in manifest:
        if s.label not in labels:
            raise InvalidArgument(f"sample {s.id!r} has label {s.label!r} outside the task label set")
    if prompt is None:
        prompt = model.initial_prompt(labels, seed=config.eval.seed, num_context=config.model.num_context)

    def run(sample):
        try:
            pred, diag = predict_sample(method, model, prompt, sample, config, reference_pool)
        except SEraserError as exc:
            if not config.eval.skip_errors:
                raise
            return None, {"id": sample.id, "error": str(exc)}
        rec = {
            "id": sample.id,
            "label": sample.label,
            "group": sample.group,
            "prediction": pred,
            "correct": pred == sample.label,
        }
        if diag is not None:
            rec["diagnostics"] = diag
        return rec, None

    workers = config.eval.parallelism
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, manifest))
    else:
        outcomes = [run(s) for s in manifest]
    records = [r for r, _ in outcomes if r is not None]
    errors = [e for _, e in outcomes if e is not None]
    return GroupReport.from_records(method, records, config.eval.seed, config.fingerprint(), errors)


# ---------------------------------------------------------------------------
# hard subset
# ---------------------------------------------------------------------------


def confusion_matrix(labels: Sequence[str], truth: Sequence[str], predicted: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=int)
    for t, p in zip(truth, predicted):
        cm[index[t], index[p]] += 1
    return cm


def hard_subset_from_predictions(
    labels: Sequence[str],
    truth: Sequence[str],
    predicted: Sequence[str],
    total_classes: int = 10,
    worst: int = 5,
) -> list:
    """Worst classes by accuracy, each paired with what it is most often mistaken for.

    Ties in accuracy and in confusion counts break toward the lower label
    index.  A class that is never confused contributes no partner.  Slots
    left after deduplication are filled with the next-worst classes.
    """
    labels = list(labels)
    present = [i for i, name in enumerate(labels) if name in set(truth)]
    if len(present) < total_classes:
        raise InvalidArgument(f"need at least {total_classes} classes, manifest covers {len(present)}")
    cm = confusion_matrix(labels, truth, predicted)
    totals = cm.sum(axis=1)
    acc = np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.inf)
    ranked = sorted(present, key=lambda i: (acc[i], i))
    chosen: list[int] = []

    def add(i):
        if i not in chosen and len(chosen) < total_classes:
            chosen.append(i)

    for i in ranked[: min(worst, total_classes)]:
        add(i)
        row = cm[i].copy()
        row[i] = -1
        partner = int(np.argmax(row))
        if row[partner] > 0:
            add(partner)
    for i in ranked:
        add(i)
    return [labels[i] for i in chosen]


def select_hard_subset(m, prompt, manifest: Sequence[GroupedSample], total_classes=10, temperature=None) -> list:
    from .core import DEFAULT_TEMPERATURE

    tau = DEFAULT_TEMPERATURE if temperature is None else temperature
    preds = [vanilla_predict(m, prompt, s.load_image(), tau) for s in manifest]
    return hard_subset_from_predictions(prompt.labels, [s.label for s in manifest], preds, total_classes)
