"""Embedding providers and differentiable 2D augmentation of rendered views.

A provider supplies the four feature streams the losses and the scene
matcher consume: a global text vector, per-word features, per-image features
(differentiable with respect to pixels) and their mean.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .sceneparse.chunker import tokenize

FEATURE_DIM = 512
ENCODER_GRID = 8

COLOR_TABLE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "grey": (0.5, 0.5, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "pink": (1.0, 0.75, 0.8),
    "brown": (0.6, 0.3, 0.1),
}


class EmbeddingFileError(ValueError):
    pass


def area_resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging input cells by fractional overlap."""
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    m = np.clip(hi - lo, 0.0, None)
    return m / m.sum(axis=1, keepdims=True)


def bilinear_resample_matrix(n_out: int, n_in: int, start: float, length: float) -> np.ndarray:
    """(n_out, n_in) bilinear weights sampling the window [start, start+length) of a 1D signal."""
    centers = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1)
    i0 = np.floor(centers).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = centers - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def _as_image_tensor(images) -> ad.Tensor:
    t = images if isinstance(images, ad.Tensor) else ad.constant(np.asarray(images, dtype=np.float64))
    if t.ndim == 3:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"images must be (n, H, W, 3), got {t.shape}")
    return t


class ToyImageEncoder:
    """Seeded random-projection image encoder.

    image -> area-downsample to 8x8x3 -> flatten (channel-major) -> affine map
    to 512 -> tanh.  Differentiable with respect to the pixels.
    """

    def __init__(self, seed: int = 0, dim: int = FEATURE_DIM, grid: int = ENCODER_GRID, bias_scale: float = 0.05):
        rng = np.random.default_rng([seed, 0x1E])
        n_in = 3 * grid * grid
        self.seed = seed
        self.grid = grid
        self.weight = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)
        self.bias = bias_scale * rng.standard_normal(dim)
        self._resample_cache = {}

    def _resample(self, n: int) -> np.ndarray:
        if n not in self._resample_cache:
            self._resample_cache[n] = area_resample_matrix(self.grid, n)
        return self._resample_cache[n]

    def __call__(self, images) -> ad.Tensor:
        x = _as_image_tensor(images)
        n, h, w, _ = x.shape
        chw = ad.transpose(x, (0, 3, 1, 2))
        small = ad.matmul(ad.matmul(self._resample(h), chw), self._resample(w).T)
        flat = ad.reshape(small, (n, 3 * self.grid * self.grid))
        return ad.tanh(ad.matmul(flat, self.weight) + self.bias)

    def encode_color(self, rgb) -> np.ndarray:
        patch = np.broadcast_to(np.asarray(rgb, dtype=np.float64), (1, self.grid, self.grid, 3))
        return self(patch).data[0]


class EmbeddingProvider:
    """Contract for text/image feature providers.

    Subclasses implement :meth:`global_text`, :meth:`word_features` and
    :meth:`image_features`; :meth:`global_image` is the row mean of the latter.
    """

    dim = FEATURE_DIM

    def global_text(self, prompt: str) -> np.ndarray:
        raise NotImplementedError

    def word_features(self, prompt: str) -> np.ndarray:
        raise NotImplementedError

    def image_features(self, images) -> ad.Tensor:
        raise NotImplementedError

    def global_image(self, images) -> ad.Tensor:
        return ad.mean(self.image_features(images), axis=0)

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class ColorSemanticsProvider(EmbeddingProvider):
    """Desk-scale stand-in for a vision-language model.

    Colour adjectives embed as the encoder output of a uniform patch of that
    colour, so "red" lands next to red images; every other word is a seeded
    random unit vector.  The global text vector is the mean of the word rows.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.encoder = ToyImageEncoder(seed)
        self._colors = {name: self.encoder.encode_color(rgb) for name, rgb in COLOR_TABLE.items()}

    def word_vector(self, word: str) -> np.ndarray:
        if word in self._colors:
            return self._colors[word].copy()
        rng = np.random.default_rng([self.seed, zlib.crc32(word.encode("utf-8"))])
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def word_features(self, prompt: str) -> np.ndarray:
        words = tokenize(prompt)
        if not words:
            raise ValueError("empty prompt")
        return np.stack([self.word_vector(w) for w in words])

    def global_text(self, prompt: str) -> np.ndarray:
        return self.word_features(prompt).mean(axis=0)

    def image_features(self, images) -> ad.Tensor:
        return self.encoder(images)

    def describe(self) -> dict:
        return {"kind": "toy", "seed": self.seed}


class FileEmbeddingProvider(EmbeddingProvider):
    """Text features read from an embedding file; images use the toy encoder."""

    def __init__(self, global_text: np.ndarray, word_features: np.ndarray, prompt: Optional[str] = None,
                 image_seed: int = 0, source: Optional[str] = None):
        self._global = np.asarray(global_text)
        self._words = np.asarray(word_features)
        self.prompt = prompt
        self.source = source
        self.encoder = ToyImageEncoder(image_seed)
        self.image_seed = image_seed

    @property
    def stored_global_text(self) -> np.ndarray:
        return self._global

    @property
    def stored_word_features(self) -> np.ndarray:
        return self._words

    def _check_prompt(self, prompt):
        if prompt is not None and self.prompt is not None:
            words = tokenize(prompt)
            if words != tokenize(self.prompt):
                raise ValueError("prompt differs from the one stored in the embedding file")

    def word_features(self, prompt: Optional[str] = None) -> np.ndarray:
        self._check_prompt(prompt)
        return self._words.astype(np.float64)

    def global_text(self, prompt: Optional[str] = None) -> np.ndarray:
        if prompt is None or self.prompt is None or tokenize(prompt) == tokenize(self.prompt):
            return self._global.astype(np.float64)
        # a phrase of the stored prompt: average its word rows
        stored = tokenize(self.prompt)
        words = tokenize(prompt)
        for start in range(len(stored) - len(words) + 1):
            if stored[start:start + len(words)] == words:
                return self._words[start:start + len(words)].astype(np.float64).mean(axis=0)
        raise ValueError(f"{prompt!r} is not part of the stored prompt")

    def image_features(self, images) -> ad.Tensor:
        return self.encoder(images)

    def describe(self) -> dict:
        return {"kind": "file", "path": self.source, "image_seed": self.image_seed}


def write_embedding_file(path, global_text, word_features, prompt: Optional[str] = None) -> Path:
    """Write a JSON manifest plus little-endian float32 blobs next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"global_text": np.asarray(global_text), "word_features": np.asarray(word_features)}
    manifest = {"format": "temo-embeddings", "version": 1, "prompt": prompt, "arrays": {}}
    for name, arr in arrays.items():
        blob = path.with_name(f"{path.stem}.{name}.bin")
        arr.astype("<f4").tofile(blob)
        manifest["arrays"][name] = {"file": blob.name, "shape": list(arr.shape), "dtype": "<f4"}
    path.write_text(json.dumps(manifest, indent=2))
    return path


def file_provider_load(path, image_seed: int = 0) -> FileEmbeddingProvider:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise EmbeddingFileError(f"{path}: not a JSON manifest ({exc})") from exc
    entries = manifest.get("arrays", {})
    loaded = {}
    for key in ("global_text", "word_features"):
        if key not in entries:
            raise EmbeddingFileError(f"{path}: missing key {key!r}")
        entry = entries[key]
        shape = tuple(entry["shape"])
        data = np.fromfile(path.with_name(entry["file"]), dtype=entry.get("dtype", "<f4"))
        if data.size != int(np.prod(shape)):
            raise EmbeddingFileError(f"{path}: {key} holds {data.size} values, manifest declares {shape}")
        loaded[key] = data.reshape(shape)
    if loaded["global_text"].shape != (FEATURE_DIM,):
        raise EmbeddingFileError(f"global_text must have shape ({FEATURE_DIM},), got {loaded['global_text'].shape}")
    wf = loaded["word_features"]
    if wf.ndim != 2 or wf.shape[1] != FEATURE_DIM:
        raise EmbeddingFileError(f"word_features must have shape (m, {FEATURE_DIM}), got {wf.shape}")
    prompt = manifest.get("prompt")
    if prompt is not None and len(tokenize(prompt)) != wf.shape[0]:
        raise EmbeddingFileError(f"word_features has {wf.shape[0]} rows for a {len(tokenize(prompt))}-word prompt")
    return FileEmbeddingProvider(loaded["global_text"], wf, prompt, image_seed, str(path))


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    crops_per_view: int = 2
    scale_range: Tuple[float, float] = (0.6, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.crops_per_view < 1:
            raise ValueError("crops_per_view must be >= 1")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"invalid crop scale range {self.scale_range}")


def augment_views(images, policy: AugmentationPolicy, rng: Optional[np.random.Generator] = None) -> ad.Tensor:
    """Random crop-and-resize, ``crops_per_view`` outputs per view, view-major order.

    Crops keep the aspect ratio; resizing is bilinear, expressed as two
    constant matrix products so gradients flow back to the source pixels.
    """
    x = _as_image_tensor(images)
    n, h, w, _ = x.shape
    a = policy.crops_per_view
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    lo, hi = policy.scale_range
    rows, cols = [], []
    for _ in range(n * a):
        s = rng.uniform(lo, hi) if hi > lo else lo
        ch, cw = s * h, s * w
        y0 = rng.uniform(0.0, h - ch) if h > ch else 0.0
        x0 = rng.uniform(0.0, w - cw) if w > cw else 0.0
        rows.append(bilinear_resample_matrix(h, h, y0, ch))
        cols.append(bilinear_resample_matrix(w, w, x0, cw).T)
    src = ad.gather(ad.transpose(x, (0, 3, 1, 2)), np.repeat(np.arange(n), a), axis=0)
    out = ad.matmul(ad.matmul(np.stack(rows)[:, None], src), np.stack(cols)[:, None])
    return ad.transpose(out, (0, 2, 3, 1))


def toy_word_features(prompt: str, seed: int = 0) -> np.ndarray:
    return ColorSemanticsProvider(seed).word_features(prompt)


def make_provider(spec: dict) -> EmbeddingProvider:
    """Build a provider from ``{"kind": "toy", "seed": n}`` or ``{"kind": "file", "path": p}``."""
    kind = spec.get("kind", "toy")
    if kind == "toy":
        return ColorSemanticsProvider(int(spec.get("seed", 0)))
    if kind == "file":
        return file_provider_load(spec["path"], int(spec.get("image_seed", 0)))
    raise ValueError(f"unknown provider kind {kind!r}")
