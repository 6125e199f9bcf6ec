"""Auxiliary images: inputs whose content the eraser should stop relying on.

Strategies
----------
annotation-background
    The test image with every foreground bounding box blacked out.
corner-patches / random-patches
    Tiles of an 8 x 8 grid over the image, upsampled (nearest neighbour)
    back to the input size.
shuffle
    The whole image scrambled as a permutation of 4 x 4 pixel tiles.
reference
    The most similar images, by embedding cosine, from an out-of-task pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyBackground, InvalidArgument, NoForeground, StrategyUnavailable
from .images import check_image
from .seeding import derive_seed

STRATEGIES = ("annotation-background", "corner-patches", "random-patches", "shuffle", "reference")
PATCH_GRID = 8
SHUFFLE_TILE = 4


@dataclass(frozen=True)
class ForegroundMask:
    bits: np.ndarray
    provenance: str = "file"

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise InvalidArgument("mask must be a 2-D array")
        if self.provenance not in ("file", "toy-exact"):
            raise InvalidArgument(f"unknown mask provenance {self.provenance!r}")
        object.__setattr__(self, "bits", bits)


@dataclass(frozen=True)
class AuxiliaryImageSet:
    images: tuple
    strategy: str
    source_id: str | None = None
    offsets: tuple = field(default=())

    def __post_init__(self):
        if not self.images:
            raise InvalidArgument("auxiliary image set is empty")
        if self.strategy not in STRATEGIES and self.strategy != "union":
            raise InvalidArgument(f"unknown auxiliary strategy {self.strategy!r}")
        object.__setattr__(self, "images", tuple(check_image(x) for x in self.images))

    def __len__(self):
        return len(self.images)


def _bits(mask, x):
    bits = mask.bits if isinstance(mask, ForegroundMask) else np.asarray(mask, dtype=bool)
    if bits.shape != x.shape[:2]:
        raise InvalidArgument(f"mask shape {bits.shape} does not match image {x.shape[:2]}")
    return bits


def box_union(bits: np.ndarray) -> np.ndarray:
    """Union of the bounding boxes of each 4-connected foreground region."""
    labeled, _ = ndimage.label(bits)
    out = np.zeros(bits.shape, dtype=bool)
    for sl in ndimage.find_objects(labeled):
        if sl is not None:
            out[sl] = True
    return out


def extract_background(x, mask, source_id=None) -> AuxiliaryImageSet:
    x = check_image(x)
    boxes = box_union(_bits(mask, x))
    if boxes.all():
        raise EmptyBackground("foreground boxes cover the whole image")
    out = x.copy()
    out[boxes] = 0.0
    return AuxiliaryImageSet((out,), "annotation-background", source_id)


def extract_foreground(x, mask) -> np.ndarray:
    x = check_image(x)
    bits = _bits(mask, x)
    if not bits.any():
        raise NoForeground("mask has no foreground pixels")
    boxes = box_union(bits)
    out = x.copy()
    out[~boxes] = 0.0
    return out


def _tile_size(x, grid):
    h, w = x.shape[:2]
    if h % grid or w % grid:
        raise InvalidArgument(f"image of size {h}x{w} is not divisible into a {grid}x{grid} grid")
    return h // grid, w // grid


def grid_tile(x, row, col, grid=PATCH_GRID) -> np.ndarray:
    th, tw = _tile_size(x, grid)
    return x[row * th : (row + 1) * th, col * tw : (col + 1) * tw]


def upsample_nearest(tile, size) -> np.ndarray:
    h, w = size
    th, tw = tile.shape[:2]
    if h % th or w % tw:
        raise InvalidArgument(f"cannot upsample {th}x{tw} to {h}x{w} by an integer factor")
    return np.repeat(np.repeat(tile, h // th, axis=0), w // tw, axis=1)


def _grid_patches(x, cells, strategy, source_id, out_size, grid=PATCH_GRID):
    th, tw = _tile_size(x, grid)
    size = tuple(out_size) if out_size is not None else x.shape[:2]
    images = [upsample_nearest(grid_tile(x, r, c, grid), size) for r, c in cells]
    offsets = tuple((r * th, c * tw) for r, c in cells)
    return AuxiliaryImageSet(tuple(images), strategy, source_id, offsets)


def corner_patches(x, source_id=None, out_size=None) -> AuxiliaryImageSet:
    x = check_image(x)
    last = PATCH_GRID - 1
    cells = [(0, 0), (0, last), (last, 0), (last, last)]
    return _grid_patches(x, cells, "corner-patches", source_id, out_size)


def random_patches(x, n, seed, source_id=None, out_size=None, replace=True) -> AuxiliaryImageSet:
    x = check_image(x)
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    _tile_size(x, PATCH_GRID)
    rng = np.random.default_rng(int(seed))
    picks = rng.choice(PATCH_GRID * PATCH_GRID, size=n, replace=replace)
    cells = [divmod(int(i), PATCH_GRID) for i in picks]
    return _grid_patches(x, cells, "random-patches", source_id, out_size)


def shuffle_patches(x, seed, source_id=None, tile=SHUFFLE_TILE) -> AuxiliaryImageSet:
    x = check_image(x)
    h, w, c = x.shape
    if h % tile or w % tile:
        raise InvalidArgument(f"image of size {h}x{w} is not divisible into {tile}x{tile} tiles")
    gh, gw = h // tile, w // tile
    tiles = x.reshape(gh, tile, gw, tile, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, tile, tile, c)
    perm = np.random.default_rng(int(seed)).permutation(gh * gw)
    out = tiles[perm].reshape(gh, gw, tile, tile, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    return AuxiliaryImageSet((out,), "shuffle", source_id)


def rank_by_similarity(query_emb: np.ndarray, pool_emb: np.ndarray) -> np.ndarray:
    sims = pool_emb @ query_emb
    # descending similarity, ties by pool index
    return np.lexsort((np.arange(len(sims)), -sims))


def select_reference_images(m, x, pool: Sequence[np.ndarray], n=1, source_id=None) -> AuxiliaryImageSet:
    if not pool:
        raise InvalidArgument("reference pool is empty")
    if not 1 <= n <= len(pool):
        raise InvalidArgument(f"cannot select {n} images from a pool of {len(pool)}")
    order = rank_by_similarity(m.encode_image(x), m.encode_images(pool))[:n]
    return AuxiliaryImageSet(tuple(pool[i] for i in order), "reference", source_id)


def build_auxiliary(
    strategies,
    x,
    *,
    mask=None,
    model=None,
    reference_pool=None,
    seed=0,
    sample_id=None,
    random_count=4,
    reference_count=1,
) -> AuxiliaryImageSet:
    """Union of the auxiliary sets of every requested strategy."""
    x = check_image(x)
    sets = []
    for strategy in strategies:
        sub_seed = derive_seed(seed, sample_id, strategy)
        if strategy == "annotation-background":
            if mask is None:
                raise StrategyUnavailable("mask", sample_id)
            sets.append(extract_background(x, mask, sample_id))
        elif strategy == "corner-patches":
            sets.append(corner_patches(x, sample_id))
        elif strategy == "random-patches":
            sets.append(random_patches(x, random_count, sub_seed, sample_id))
        elif strategy == "shuffle":
            sets.append(shuffle_patches(x, sub_seed, sample_id))
        elif strategy == "reference":
            if not reference_pool:
                raise StrategyUnavailable("reference_pool", sample_id)
            if model is None:
                raise StrategyUnavailable("model", sample_id)
            sets.append(select_reference_images(model, x, reference_pool, reference_count))
        else:
            raise InvalidArgument(f"unknown auxiliary strategy {strategy!r}")
    if len(sets) == 1:
        return sets[0]
    images = tuple(img for s in sets for img in s.images)
    return AuxiliaryImageSet(images, "union", sample_id)
