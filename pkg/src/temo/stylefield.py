"""Neural style field over surface points with decoupled graph attention.

Two branches share the same layout: Fourier-encoded inputs, two ReLU layers
of width 256, a DGA block in which every point attends to the prompt words
it is linked to, and bounded output heads.

* normal branch, inputs (x, n): a tanh-bounded offset added to the face normal
* reflectance branch, inputs (x, view dir): diffuse, roughness, specular
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "temo-stylefield"
CHECKPOINT_VERSION = 1
NORMAL_OFFSET_SCALE = 0.3
SPECULAR_BIAS_INIT = -2.0


class CheckpointError(ValueError):
    pass


def fourier_encode(x, num_bands: int = 6) -> np.ndarray:
    """[sin(2^k pi x), cos(2^k pi x)] for k = 0..L-1, blocks ordered by band.

    Output width is ``d * 2L`` for inputs of shape (..., d).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to Fourier encoding")
    parts = []
    for k in range(num_bands):
        arg = (2.0 ** k) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def _relu(x: ad.Tensor) -> ad.Tensor:
    return ad.maximum(x, 0.0)


def _init_linear(rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
    if zero:
        return np.zeros((n_in, n_out)), np.zeros(n_out)
    bound = np.sqrt(6.0 / n_in)  # He-uniform, suits the ReLU trunks
    return rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)


def _linear(params, name: str, x) -> ad.Tensor:
    return ad.matmul(x, params[name + ".weight"]) + params[name + ".bias"]


def dga_attend(point_feats, adjacency, word_feats, params: Dict[str, ad.Tensor], prefix: str = "dga",
               return_weights: bool = False):
    """Cross-attention of surface points (queries) over their linked words.

    ``adjacency`` is a boolean (P, M) mask; weights are a softmax over each
    point's neighbourhood of q.k / sqrt(d_l).  Returns ``v + v_hat``.
    """
    adj = np.asarray(adjacency, dtype=bool)
    v = ad._as_tensor(point_feats)
    if adj.shape != (v.shape[0], np.shape(word_feats)[0]):
        raise ValueError(f"adjacency shape {adj.shape} does not match {v.shape[0]} points x "
                         f"{np.shape(word_feats)[0]} words")
    isolated = np.flatnonzero(~adj.any(axis=1))
    if len(isolated):
        raise ValueError(f"point {isolated[0]} has no word neighbours in the cross-modal graph")
    w = ad._as_tensor(word_feats)
    q = _linear(params, prefix + ".query", v)
    k = _linear(params, prefix + ".key", w)
    val = _linear(params, prefix + ".value", w)
    d_l = q.shape[-1]
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(d_l))
    alpha = ad.softmax(logits, axis=-1, mask=adj)
    out = v + ad.matmul(alpha, val)
    return (out, alpha) if return_weights else out


@dataclass
class StyleOutput:
    normals: ad.Tensor
    delta_n: ad.Tensor
    diffuse: ad.Tensor
    roughness: ad.Tensor
    specular: ad.Tensor


class StyleField:
    """Parameter set and forward pass of the two branches.

    ``share_dga`` makes both branches use a single attention block.
    """

    def __init__(self, seed: int = 0, num_bands: int = 6, width: int = 256, word_dim: int = 512,
                 share_dga: bool = False, r_min: float = 0.05):
        if not 0.0 < r_min < 1.0:
            raise ValueError("r_min must lie in (0, 1)")
        self.seed = int(seed)
        self.num_bands = int(num_bands)
        self.width = int(width)
        self.word_dim = int(word_dim)
        self.share_dga = bool(share_dga)
        self.r_min = float(r_min)
        self.params: Dict[str, ad.Tensor] = {}
        self._build(np.random.default_rng([self.seed, 0x5F]))

    # -- construction -------------------------------------------------------

    def config(self) -> dict:
        return {"seed": self.seed, "num_bands": self.num_bands, "width": self.width,
                "word_dim": self.word_dim, "share_dga": self.share_dga, "r_min": self.r_min}

    def _add(self, rng, name, n_in, n_out, zero=False, bias=0.0):
        w, b = _init_linear(rng, n_in, n_out, zero)
        self.params[name + ".weight"] = ad.tensor(w, requires_grad=True)
        self.params[name + ".bias"] = ad.tensor(b + bias, requires_grad=True)

    def _add_dga(self, rng, prefix):
        d = self.width
        for name, n_in in (("query", d), ("key", self.word_dim), ("value", self.word_dim)):
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, d))
            self.params[f"{prefix}.{name}.weight"] = ad.tensor(w, requires_grad=True)
            self.params[f"{prefix}.{name}.bias"] = ad.tensor(np.zeros(d), requires_grad=True)

    def _build(self, rng):
        enc = 3 * 2 * self.num_bands * 2
        d = self.width
        self._add(rng, "normal.fc1", enc, d)
        self._add(rng, "normal.fc2", d, d)
        self._add(rng, "normal.out", d, 3, zero=True)
        self._add(rng, "reflect.fc1", enc, d)
        self._add(rng, "reflect.fc2", d, d)
        self._add(rng, "reflect.diffuse", d, 3)
        self._add(rng, "reflect.roughness", d, 1)
        self._add(rng, "reflect.specular", d, 3, bias=SPECULAR_BIAS_INIT)
        if self.share_dga:
            self._add_dga(rng, "dga")
        else:
            self._add_dga(rng, "normal.dga")
            self._add_dga(rng, "reflect.dga")

    def _dga_prefix(self, branch: str) -> str:
        return "dga" if self.share_dga else branch + ".dga"

    def parameters(self) -> Dict[str, ad.Tensor]:
        return self.params

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward ---------------------------------------------------------------

    def normal_branch(self, points, normals, adjacency, word_feats) -> ad.Tensor:
        """Normal offset (P, 3), bounded by tanh * 0.3.  Depends on location only."""
        h = fourier_encode(np.concatenate([points, normals], axis=-1), self.num_bands)
        h = _relu(_linear(self.params, "normal.fc1", h))
        h = _relu(_linear(self.params, "normal.fc2", h))
        h = dga_attend(h, adjacency, word_feats, self.params, self._dga_prefix("normal"))
        return ad.tanh(_linear(self.params, "normal.out", h)) * NORMAL_OFFSET_SCALE

    def reflectance_branch(self, points, view_dirs, adjacency, word_feats):
        """(diffuse (P,3), roughness (P,1), specular (P,3))."""
        h = fourier_encode(np.concatenate([points, view_dirs], axis=-1), self.num_bands)
        h = _relu(_linear(self.params, "reflect.fc1", h))
        h = _relu(_linear(self.params, "reflect.fc2", h))
        h = dga_attend(h, adjacency, word_feats, self.params, self._dga_prefix("reflect"))
        diffuse = ad.sigmoid(_linear(self.params, "reflect.diffuse", h))
        rough = self.r_min + (1.0 - self.r_min) * ad.sigmoid(_linear(self.params, "reflect.roughness", h))
        specular = ad.sigmoid(_linear(self.params, "reflect.specular", h))
        return diffuse, rough, specular

    def __call__(self, points, normals, view_dirs, adjacency, word_feats) -> StyleOutput:
        points = np.asarray(points, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        view_dirs = np.asarray(view_dirs, dtype=np.float64)
        delta = self.normal_branch(points, normals, adjacency, word_feats)
        shifted = ad.constant(normals) + delta
        unit = shifted / ad.norm(shifted, axis=-1, keepdims=True)
        diffuse, rough, spec = self.reflectance_branch(points, view_dirs, adjacency, word_feats)
        return StyleOutput(unit, delta, diffuse, rough, spec)

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"non-finite values in {k}")
            p.data = arr.copy()


def save_checkpoint(path, field: StyleField, extra_arrays: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    """Write a versioned ``.npz`` with the field tensors under ``param/``.

    ``extra_arrays`` (optimizer moments etc.) are stored under their own names
    and ``meta`` is serialised as JSON alongside the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "field": field.config(),
              "meta": meta or {}}
    arrays = {"param/" + k: v for k, v in field.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        if k.startswith("param/") or k == "header":
            raise ValueError(f"reserved array name {k!r}")
        arrays[k] = np.asarray(v)
    arrays["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(field, extra_arrays, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "header" not in arrays:
        raise CheckpointError("checkpoint has no header")
    header = json.loads(arrays.pop("header").tobytes().decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a style-field checkpoint: {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    field = StyleField(**header["field"])
    field.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return field, extra, header.get("meta", {})
