"""Vision-language model backends.

:class:`VisionLanguageModel` is the contract every backend satisfies: encode
images, encode prompted class texts, and return gradients of an embedding
loss with respect to the prompt context vectors.  :class:`ToyBackend` is a
fully linear, closed-form implementation whose image encoder carries a
planted background shortcut; :func:`build_toy_world` builds one together
with a grouped, masked dataset.

Real-model adapters register under a name and are selected with
``"adapter:<name>"`` (see :func:`create_backend`).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import asdict, dataclass, field
from importlib.metadata import entry_points
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, UnsupportedOperation
from .images import check_image, quantize

BACKGROUND_ONLY = "background only"


@dataclass
class PromptContext:
    """Shared context vectors (mutable) plus fixed per-class tokens."""

    context_vectors: np.ndarray
    class_tokens: np.ndarray
    labels: tuple

    def __post_init__(self):
        ctx = np.array(self.context_vectors, dtype=np.float64)
        tokens = np.array(self.class_tokens, dtype=np.float64)
        if ctx.ndim != 2 or ctx.shape[0] < 1:
            raise InvalidArgument("context_vectors must be an M x E array with M >= 1")
        if tokens.ndim != 2 or tokens.shape[1] != ctx.shape[1]:
            raise InvalidArgument("class_tokens must be K x E with the same E as the context")
        if len(self.labels) != tokens.shape[0]:
            raise InvalidArgument("one label per class token is required")
        tokens.setflags(write=False)
        self.context_vectors = ctx
        self.class_tokens = tokens
        self.labels = tuple(self.labels)

    @property
    def num_context(self) -> int:
        return self.context_vectors.shape[0]

    def copy(self) -> "PromptContext":
        # class tokens are read-only and shared on purpose
        return PromptContext(self.context_vectors.copy(), self.class_tokens, self.labels)

    def with_context(self, context_vectors) -> "PromptContext":
        return PromptContext(np.array(context_vectors, dtype=np.float64), self.class_tokens, self.labels)


class VisionLanguageModel:
    """Backend contract.  Subclasses implement the four core methods."""

    provides_prompt_gradients = False
    input_shape: tuple = (64, 64, 3)
    name = "abstract"

    def encode_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def text_embeddings(self, pc: PromptContext) -> np.ndarray:
        raise NotImplementedError

    def prompt_gradient(self, pc: PromptContext, loss) -> tuple[float, np.ndarray]:
        raise UnsupportedOperation(f"backend {self.name!r} does not provide prompt gradients")

    def fingerprint(self) -> str:
        raise NotImplementedError

    def class_tokens(self, names: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def initial_prompt(self, labels: Sequence[str], seed: int = 0) -> PromptContext:
        raise NotImplementedError

    def encode_image(self, x: np.ndarray) -> np.ndarray:
        return self.encode_images([x])[0]

    def encode_text(self, pc: PromptContext, class_index: int) -> np.ndarray:
        k = len(pc.labels)
        if not 0 <= class_index < k:
            raise InvalidArgument(f"class index {class_index} out of range for {k} classes")
        return self.text_embeddings(pc)[class_index]


def encode_image(m: VisionLanguageModel, x) -> np.ndarray:
    return m.encode_image(x)


def encode_text(m: VisionLanguageModel, pc: PromptContext, class_index: int) -> np.ndarray:
    return m.encode_text(pc, class_index)


def prompt_gradient(m: VisionLanguageModel, pc: PromptContext, loss_fn) -> list:
    """dL/dv_i for every context vector, as a list of M vectors."""
    if not m.provides_prompt_gradients:
        raise UnsupportedOperation(f"backend {m.name!r} does not provide prompt gradients")
    _, grad = m.prompt_gradient(pc, loss_fn)
    return list(grad)


def _normalize_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / norms, norms


# ---------------------------------------------------------------------------
# toy backend
# ---------------------------------------------------------------------------


class ToyBackend(VisionLanguageModel):
    """Linear encoders with closed-form prompt gradients.

    Image: ``z = normalize(W_img @ vec(x) + bias)``.
    Text:  ``z_k = normalize(W_txt @ (mean(v) + c_k))``.
    """

    provides_prompt_gradients = True
    name = "toy"

    def __init__(self, image_weights, image_bias, text_weights, tokens: dict, input_shape=(64, 64, 3)):
        self.input_shape = tuple(input_shape)
        self._w_img = np.array(image_weights, dtype=np.float64)
        self._b_img = np.array(image_bias, dtype=np.float64)
        self._w_txt = np.array(text_weights, dtype=np.float64)
        self._tokens = {name: np.array(v, dtype=np.float64) for name, v in tokens.items()}
        for arr in (self._w_img, self._b_img, self._w_txt, *self._tokens.values()):
            arr.setflags(write=False)
        d, n_pix = self._w_img.shape
        if n_pix != int(np.prod(self.input_shape)):
            raise InvalidArgument("image weights do not match the input shape")
        if self._w_txt.shape[0] != d or self._b_img.shape != (d,):
            raise InvalidArgument("text weights / bias do not match the embedding width")
        self._fingerprint = None

    @property
    def embed_dim(self) -> int:
        return self._w_img.shape[0]

    @property
    def token_dim(self) -> int:
        return self._w_txt.shape[1]

    @property
    def text_weights(self) -> np.ndarray:
        return self._w_txt

    @property
    def image_bias(self) -> np.ndarray:
        return self._b_img

    @property
    def class_names(self) -> tuple:
        return tuple(n for n in self._tokens if n != BACKGROUND_ONLY)

    def encode_images(self, images):
        flat = []
        for x in images:
            x = check_image(x)
            if x.shape != self.input_shape:
                raise InvalidArgument(f"toy backend expects images of shape {self.input_shape}, got {x.shape}")
            flat.append(x.reshape(-1))
        if not flat:
            return np.zeros((0, self.embed_dim))
        raw = np.stack(flat) @ self._w_img.T + self._b_img
        return _normalize_rows(raw)[0]

    def _raw_text(self, pc: PromptContext) -> np.ndarray:
        if pc.class_tokens.shape[1] != self.token_dim:
            raise InvalidArgument(f"prompt token width {pc.class_tokens.shape[1]} != backend width {self.token_dim}")
        shared = pc.context_vectors.mean(axis=0)
        return (shared[None, :] + pc.class_tokens) @ self._w_txt.T

    def text_embeddings(self, pc):
        return _normalize_rows(self._raw_text(pc))[0]

    def prompt_gradient(self, pc, loss):
        text, norms = _normalize_rows(self._raw_text(pc))
        value, g_text = loss.value_and_grad(text)
        # back through the normalization, then the linear map and the mean
        g_raw = (g_text - (g_text * text).sum(axis=1, keepdims=True) * text) / norms
        g_shared = g_raw.sum(axis=0) @ self._w_txt
        m = pc.num_context
        return float(value), np.tile(g_shared / m, (m, 1))

    def class_tokens(self, names):
        missing = [n for n in names if n not in self._tokens]
        if missing:
            raise InvalidArgument(f"toy backend has no token for {missing}")
        return np.stack([self._tokens[n] for n in names])

    def initial_prompt(self, labels, seed=0, num_context=4):
        """Seeded unit context vectors with a zero mean.

        There is no tokenizer to encode a hand-written prefix.  The text
        encoder only sees the mean of the context vectors, so the vectors
        are placed on a regular simplex in a random subspace: each has unit
        norm and the unadapted prompt reduces to the class tokens alone.
        """
        tokens = self.class_tokens(labels)
        rng = np.random.default_rng([int(seed), 0x70726F6D])
        m, e = int(num_context), self.token_dim
        if m < 1 or m > e:
            raise InvalidArgument(f"num_context must lie in [1, {e}]")
        q, _ = np.linalg.qr(rng.normal(size=(e, e)))
        if m == 1:
            ctx = q[:, :1].T
        else:
            simplex = np.eye(m) - 1.0 / m
            simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
            ctx = simplex @ q[:, :m].T
        return PromptContext(ctx, tokens, tuple(labels))

    def fingerprint(self):
        if self._fingerprint is None:
            h = hashlib.sha256()
            for arr in (self._w_img, self._b_img, self._w_txt):
                h.update(np.ascontiguousarray(arr).tobytes())
            for name in sorted(self._tokens):
                h.update(name.encode())
                h.update(self._tokens[name].tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def recompute_fingerprint(self) -> str:
        self._fingerprint = None
        return self.fingerprint()


# ---------------------------------------------------------------------------
# toy world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyGeometry:
    """Scales of the toy encoders.  Tuned once; exposed for experiments."""

    token_dim: int = 32
    embed_dim: int = 64
    token_common: float = 0.2
    token_class: float = 0.01
    bias_common: float = 1.0
    bias_other: float = 0.5
    glyph_gain: float = 0.3
    texture_gain: float = 0.45
    null_affinity: float = 0.5
    texture_private: float = 0.3
    texture_amplitude: float = 0.25
    contrast_range: tuple = (0.6, 1.4)
    brightness_range: tuple = (0.6, 1.4)
    noise_std: float = 0.03


@dataclass(frozen=True)
class ToyWorldSpec:
    num_classes: int = 2
    num_backgrounds: int = 2
    shortcut_strength: float = 1.0
    correlation: float = 0.95
    num_samples: int = 400
    seed: int = 0
    class_names: tuple | None = None
    background_names: tuple | None = None
    associations: tuple | None = None
    num_reference: int = 20
    geometry: ToyGeometry = field(default_factory=ToyGeometry)

    def __post_init__(self):
        if self.num_classes < 2 or self.num_backgrounds < 1:
            raise InvalidArgument("toy world needs K >= 2 classes and B >= 1 backgrounds")
        if not 0.0 <= self.shortcut_strength <= 1.0:
            raise InvalidArgument("shortcut_strength must lie in [0, 1]")
        if not 0.5 < self.correlation <= 1.0:
            raise InvalidArgument("correlation must lie in (0.5, 1]")
        if self.num_samples < 1:
            raise InvalidArgument("num_samples must be positive")
        if self.num_classes + 2 > self.geometry.token_dim:
            raise InvalidArgument("too many classes for the token width")
        if self.num_backgrounds + 1 > self.geometry.embed_dim - self.geometry.token_dim:
            raise InvalidArgument("too many backgrounds for the image-only subspace")
        if self.class_names is not None and len(set(self.class_names)) != self.num_classes:
            raise InvalidArgument("class_names must be K distinct names")
        if self.background_names is not None and len(set(self.background_names)) != self.num_backgrounds:
            raise InvalidArgument("background_names must be B distinct names")
        if self.associations is not None:
            if len(self.associations) != self.num_classes or not all(
                0 <= b < self.num_backgrounds for b in self.associations
            ):
                raise InvalidArgument("associations must map every class to a background index")

    @property
    def labels(self) -> tuple:
        return tuple(self.class_names) if self.class_names else tuple(f"class{k}" for k in range(self.num_classes))

    @property
    def backgrounds(self) -> tuple:
        if self.background_names:
            return tuple(self.background_names)
        return tuple(f"bg{b}" for b in range(self.num_backgrounds))

    @property
    def associated_background(self) -> tuple:
        if self.associations is not None:
            return tuple(self.associations)
        return tuple(k % self.num_backgrounds for k in range(self.num_classes))

    @property
    def shortcut_class(self) -> tuple:
        """Class each background texture pushes the image encoder toward."""
        assoc = self.associated_background
        out = []
        for b in range(self.num_backgrounds):
            owners = [k for k, a in enumerate(assoc) if a == b]
            out.append(owners[0] if owners else b % self.num_classes)
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("class_names", "background_names", "associations"):
            if d[key] is not None:
                d[key] = list(d[key])
        d["geometry"]["contrast_range"] = list(self.geometry.contrast_range)
        d["geometry"]["brightness_range"] = list(self.geometry.brightness_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown toy world keys: {sorted(unknown)}")
        geo = d.pop("geometry", None)
        if geo is not None:
            geo = dict(geo)
            bad = set(geo) - set(ToyGeometry.__dataclass_fields__)
            if bad:
                raise InvalidArgument(f"unknown toy geometry keys: {sorted(bad)}")
            for key in ("contrast_range", "brightness_range"):
                if key in geo:
                    geo[key] = tuple(geo[key])
            d["geometry"] = ToyGeometry(**geo)
        for key in ("class_names", "background_names", "associations"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ToySample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    label: str
    group: str
    class_index: int
    background_index: int


GLYPH_SIZE = 24
GLYPH_GRID = 3
GLYPH_ORIGIN = (20, 20)


class ToyWorld:
    """Glyph/texture renderer, its planted-shortcut model and a grouped dataset."""

    def __init__(self, spec: ToyWorldSpec):
        self.spec = spec
        geo = spec.geometry
        h, w, c = 64, 64, 3
        self.shape = (h, w, c)
        rng = np.random.default_rng([spec.seed, 0x746F79])
        k_cls, n_bg = spec.num_classes, spec.num_backgrounds

        self.glyph_bits, self.glyph_colors = self._make_glyphs(rng, k_cls)
        self.texture_patterns = self._make_textures(rng, n_bg)

        # embedding geometry
        e, d = geo.token_dim, geo.embed_dim
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        w_txt = q[:, :e]
        image_only = q[:, e:]
        basis, _ = np.linalg.qr(rng.normal(size=(e, e)))
        e_common, e_null = basis[:, 0], basis[:, 1]
        e_class = basis[:, 2 : 2 + k_cls].T
        d_common, d_null = w_txt @ e_common, w_txt @ e_null
        d_class = e_class @ w_txt.T

        tokens = {}
        for name, ek in zip(spec.labels, e_class):
            tokens[name] = geo.token_common * e_common + geo.token_class * ek
        tokens[BACKGROUND_ONLY] = geo.token_common * e_common + geo.token_class * e_null

        glyph_tpl = self._glyph_templates()
        texture_tpl = self._texture_templates()
        sc = spec.shortcut_class
        s = spec.shortcut_strength
        w_img = np.zeros((d, h * w * c))
        for k in range(k_cls):
            w_img += geo.glyph_gain * np.outer(d_class[k], glyph_tpl[k])
        for b in range(n_bg):
            direction = geo.texture_private * image_only[:, b] + geo.null_affinity * d_null + s * d_class[sc[b]]
            w_img += geo.texture_gain * np.outer(direction, texture_tpl[b])
        bias = geo.bias_common * d_common + geo.bias_other * image_only[:, -1]

        self.model = ToyBackend(w_img, bias, w_txt, tokens, input_shape=self.shape)
        self.samples = self._make_samples()
        self.reference_pool = [
            self.render(None, b % n_bg, np.random.default_rng([spec.seed, 0x726566, i]))[0]
            for i, b in zip(range(spec.num_reference), itertools.cycle(range(n_bg)))
        ]

    # -- patterns --------------------------------------------------------

    @staticmethod
    def _make_glyphs(rng, k_cls):
        # Left-right symmetric (flips keep the glyph), one 4-connected piece whose
        # bounding box is the whole cell grid (box erasure covers the template).
        patterns = []
        for left, mid in itertools.product(itertools.product((0, 1), repeat=3), repeat=2):
            cell = np.array([left, mid, left]).T
            labeled, count = ndimage.label(cell)
            if count == 1 and 4 <= cell.sum() <= 7 and cell.any(axis=0).all() and cell.any(axis=1).all():
                patterns.append(cell)
        if k_cls > len(patterns):
            raise InvalidArgument(f"at most {len(patterns)} distinct glyphs are available")
        order = rng.permutation(len(patterns))
        bits = []
        for idx in order[:k_cls]:
            cell = patterns[idx].astype(bool)
            bits.append(np.kron(cell, np.ones((GLYPH_SIZE // GLYPH_GRID,) * 2, dtype=bool)))
        colors = []
        while len(colors) < k_cls:
            col = rng.uniform(0.15, 0.85, size=3)
            if all(np.abs(col - other).max() > 0.2 for other in colors) and np.abs(col - 0.5).max() > 0.2:
                colors.append(col)
        return bits, np.array(colors)

    def _make_textures(self, rng, n_bg):
        h, w, c = self.shape
        freqs = [(fx, fy) for fx in range(0, 7) for fy in range(-6, 7) if (fx, fy) > (0, 0) and 9 <= fx * fx + fy * fy <= 36]
        chosen = rng.permutation(len(freqs))[:n_bg]
        yy, xx = np.mgrid[0:h, 0:w]
        out = []
        for idx in chosen:
            fx, fy = freqs[idx]
            phases = rng.uniform(0, 2 * np.pi, size=c)
            arg = 2 * np.pi * (fx * xx + fy * yy) / w
            out.append(np.stack([np.sin(arg + ph) for ph in phases], axis=-1))
        return out

    def _glyph_templates(self):
        """Biorthogonal, zero-mean-per-channel templates supported on the glyph box."""
        h, w, c = self.shape
        r0, c0 = GLYPH_ORIGIN
        rows = []
        for bits, col in zip(self.glyph_bits, self.glyph_colors):
            p = bits[:, :, None] * (col - 0.5)[None, None, :]
            p = p - p.mean(axis=(0, 1), keepdims=True)
            rows.append(p.reshape(-1))
        dual = np.linalg.pinv(np.stack(rows)).T
        out = []
        for row in dual:
            full = np.zeros(self.shape)
            full[r0 : r0 + GLYPH_SIZE, c0 : c0 + GLYPH_SIZE] = row.reshape(GLYPH_SIZE, GLYPH_SIZE, c)
            out.append(full.reshape(-1))
        return np.stack(out)

    def _texture_templates(self):
        amp = self.spec.geometry.texture_amplitude
        rows = np.stack([amp * t.reshape(-1) for t in self.texture_patterns])
        return np.linalg.pinv(rows).T

    # -- rendering -------------------------------------------------------

    def render(self, class_index, background_index, rng):
        """One image (and exact glyph mask); ``class_index=None`` gives a glyph-free image."""
        geo = self.spec.geometry
        contrast = rng.uniform(*geo.contrast_range)
        x = 0.5 + contrast * geo.texture_amplitude * self.texture_patterns[background_index]
        mask = np.zeros(self.shape[:2], dtype=bool)
        if class_index is not None:
            brightness = rng.uniform(*geo.brightness_range)
            r0, c0 = GLYPH_ORIGIN
            bits = self.glyph_bits[class_index]
            mask[r0 : r0 + GLYPH_SIZE, c0 : c0 + GLYPH_SIZE] = bits
            color = 0.5 + brightness * (self.glyph_colors[class_index] - 0.5)
            x[mask] = color
        x = x + rng.normal(scale=geo.noise_std, size=x.shape)
        return quantize(x), mask

    def _make_samples(self):
        spec = self.spec
        k_cls, n_bg = spec.num_classes, spec.num_backgrounds
        assoc = spec.associated_background
        per_class = [spec.num_samples // k_cls + (1 if k < spec.num_samples % k_cls else 0) for k in range(k_cls)]
        samples = []
        for k in range(k_cls):
            n_k = per_class[k]
            others = [b for b in range(n_bg) if b != assoc[k]]
            n_assoc = n_k if not others else int(round(spec.correlation * n_k))
            counts = {assoc[k]: n_assoc}
            rest = n_k - n_assoc
            for j, b in enumerate(others):
                counts[b] = rest // len(others) + (1 if j < rest % len(others) else 0)
            idx = 0
            for b in sorted(counts):
                for _ in range(counts[b]):
                    rng = np.random.default_rng([spec.seed, k, b, idx])
                    image, mask = self.render(k, b, rng)
                    label = spec.labels[k]
                    samples.append(
                        ToySample(
                            id=f"{label}_{idx:05d}",
                            image=image,
                            mask=mask,
                            label=label,
                            group=f"{label}_on_{spec.backgrounds[b]}",
                            class_index=k,
                            background_index=b,
                        )
                    )
                    idx += 1
        return samples

    @property
    def labels(self) -> tuple:
        return self.spec.labels

    def groups(self) -> tuple:
        return tuple(sorted({s.group for s in self.samples}))

    def minority_groups(self) -> tuple:
        assoc = self.spec.associated_background
        return tuple(
            sorted({s.group for s in self.samples if s.background_index != assoc[s.class_index]})
        )


def build_toy_world(spec: ToyWorldSpec | None = None) -> ToyWorld:
    return ToyWorld(spec if spec is not None else ToyWorldSpec())


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_ADAPTERS: dict[str, Callable[..., VisionLanguageModel]] = {}


def register_adapter(name: str):
    """Decorator registering a factory for ``model.backend = "adapter:<name>"``."""

    def deco(factory):
        _ADAPTERS[name] = factory
        return factory

    return deco


def create_backend(backend: str, toy_world: ToyWorld | None = None, **kwargs) -> VisionLanguageModel:
    if backend == "toy":
        return (toy_world or build_toy_world()).model
    if backend.startswith("adapter:"):
        name = backend.split(":", 1)[1]
        factory = _ADAPTERS.get(name)
        if factory is None:
            for ep in entry_points(group="seraser.adapters"):
                if ep.name == name:
                    factory = ep.load()
                    break
        if factory is None:
            raise InvalidArgument(f"no adapter registered under {name!r}")
        return factory(**kwargs)
    raise InvalidArgument(f"unknown backend {backend!r}; expected 'toy' or 'adapter:<name>'")
