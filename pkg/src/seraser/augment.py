"""RandAugment-style view generation with per-view deterministic seeding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument

ALL_OPS = ("flip", "translate", "rotate", "color_jitter", "cutout")
MAX_MAGNITUDE = 30


def flip(x, rng, frac):
    return x[:, ::-1, :].copy()


def translate(x, rng, frac):
    h, w = x.shape[:2]
    axis = int(rng.integers(2))
    size = (h, w)[axis]
    shift = int(round(frac * 0.3 * size)) * (1 if rng.random() < 0.5 else -1)
    out = np.zeros_like(x)
    if shift == 0:
        return x.copy()
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if shift > 0:
        src[axis], dst[axis] = slice(0, size - shift), slice(shift, size)
    else:
        src[axis], dst[axis] = slice(-shift, size), slice(0, size + shift)
    out[tuple(dst)] = x[tuple(src)]
    return out


def rotate(x, rng, frac):
    angle = frac * 30.0 * (1 if rng.random() < 0.5 else -1)
    out = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def color_jitter(x, rng, frac):
    factor = 1.0 + frac * 0.9 * (1 if rng.random() < 0.5 else -1)
    return np.clip(x * factor, 0.0, 1.0)


def cutout(x, rng, frac):
    h, w = x.shape[:2]
    side = int(round(frac * 0.5 * min(h, w)))
    out = x.copy()
    if side == 0:
        return out
    r = int(rng.integers(0, h - side + 1))
    c = int(rng.integers(0, w - side + 1))
    out[r : r + side, c : c + side] = 0.0
    return out


_OPS = {
    "flip": flip,
    "translate": translate,
    "rotate": rotate,
    "color_jitter": color_jitter,
    "cutout": cutout,
}


@dataclass(frozen=True)
class AugmentPolicy:
    """``ops_per_view`` random ops at a fixed ``magnitude`` (0..30).

    View 0 is always the untouched input; view ``i > 0`` depends only on
    ``(policy, seed, i)``.
    """

    ops_per_view: int = 2
    magnitude: int = 9
    ops: tuple = ALL_OPS

    def __post_init__(self):
        if self.ops_per_view < 0:
            raise InvalidArgument("ops_per_view must be non-negative")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise InvalidArgument(f"magnitude must lie in [0, {MAX_MAGNITUDE}]")
        unknown = set(self.ops) - set(_OPS)
        if unknown:
            raise InvalidArgument(f"unknown augmentation ops: {sorted(unknown)}")
        object.__setattr__(self, "ops", tuple(self.ops))

    def view(self, x: np.ndarray, seed: int, index: int) -> np.ndarray:
        if index == 0 or self.ops_per_view == 0 or not self.ops:
            return np.array(x, dtype=np.float64, copy=True)
        rng = np.random.default_rng([int(seed), int(index)])
        frac = self.magnitude / MAX_MAGNITUDE
        out = np.asarray(x, dtype=np.float64)
        for _ in range(self.ops_per_view):
            op = self.ops[int(rng.integers(len(self.ops)))]
            out = _OPS[op](out, rng, frac)
        return out

    def views(self, x: np.ndarray, seed: int, n: int) -> list:
        return [self.view(x, seed, i) for i in range(n)]

    def to_dict(self) -> dict:
        return {"ops_per_view": self.ops_per_view, "magnitude": self.magnitude, "ops": list(self.ops)}


IDENTITY = AugmentPolicy(ops_per_view=0)
