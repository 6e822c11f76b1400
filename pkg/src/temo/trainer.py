"""Optimisation loop: scene parsing setup, per-iteration render/embed/loss, AdamW."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .embed import COLOR_TABLE, AugmentationPolicy, EmbeddingProvider, augment_views, make_provider
from .geometry import Mesh, normalize_unit_sphere, orbit_poses, render_geometry_pass, sample_camera_poses
from .render import SGLight, compose_images, default_lights, neutral_render, orient_normals, shade
from .sceneparse import (GmmModel, MatchingError, NounPhrase, assign_clusters, decouple_hitmap,
                         extract_noun_phrases, gmm_fit, tokenize, words_of_points)
from .sceneparse.graph import similarity_matrix, solve_assignment
from .stylefield import StyleField, load_checkpoint, save_checkpoint
from .supervision import CgcWeights, cgc_loss, coarse_loss, correlation_map, fine_loss, fine_scores

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "lr", "coarse", "fine", "total")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    lr0: float = 5e-4
    decay: float = 0.7
    decay_every: int = 500
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    views_per_iter: int = 5
    crops_per_view: int = 2
    crop_scale: Tuple[float, float] = (0.6, 1.0)
    seed: int = 0
    resolution: int = 64
    lambda_c: float = 1.0
    lambda_f: float = 0.33
    use_dga: bool = True
    share_dga: bool = False
    num_bands: int = 6
    width: int = 256
    r_min: float = 0.05
    camera_radius: float = 3.0
    camera_sigma: float = 0.3
    parse_views: int = 8
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    fine_rows: str = "crops"
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ValueError("invalid learning-rate schedule")
        if self.views_per_iter < 1 or self.crops_per_view < 1:
            raise ValueError("views_per_iter and crops_per_view must be >= 1")
        if self.lambda_c < 0 or self.lambda_f < 0:
            raise ValueError("loss weights must be non-negative")
        if self.resolution < 4:
            raise ValueError("resolution too small")
        if self.fine_rows not in ("crops", "views"):
            raise ValueError("fine_rows must be 'crops' or 'views'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        for key in ("betas", "crop_scale", "background"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


# --------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {"opt/step": np.array(self.step)}
        out.update({"opt/m/" + k: a for k, a in self.m.items()})
        out.update({"opt/v/" + k: a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "OptimizerState":
        m = {k[6:]: np.array(a) for k, a in arrays.items() if k.startswith("opt/m/")}
        v = {k[6:]: np.array(a) for k, a in arrays.items() if k.startswith("opt/v/")}
        return cls(m, v, int(arrays.get("opt/step", 0)))


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    """One AdamW update.  Returns new parameter arrays; ``state`` is updated in place.

    Weight decay is decoupled and applied first: theta <- theta - lr*wd*theta.
    """
    b1, b2 = cfg.betas
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name} {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    out = {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        theta = theta - lr * cfg.weight_decay * theta
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out


# --------------------------------------------------------------------------
# scene parsing setup


@dataclass
class SceneParse:
    prompt: str
    words: List[str]
    phrases: List[NounPhrase]
    gmm: GmmModel
    phrase_of_cluster: np.ndarray
    similarity: Optional[np.ndarray] = None
    cluster_sizes: Optional[np.ndarray] = None
    object_masks: Optional[np.ndarray] = None  # (V, k, H, W) from the parse views
    neutral_views: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return len(self.phrases)

    def adjacency(self, points) -> np.ndarray:
        labels = assign_clusters(self.gmm, points)
        return words_of_points(self.phrase_of_cluster, labels, self.phrases, len(self.words))

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "words": self.words,
                "phrases": [{"adjectives": list(p.adjectives), "head_noun": p.head_noun,
                             "span": list(p.span), "phrase_id": p.phrase_id, "text": p.text} for p in self.phrases],
                "gmm": self.gmm.to_dict(), "phrase_of_cluster": self.phrase_of_cluster.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParse":
        phrases = extract_noun_phrases(d["prompt"])
        return cls(d["prompt"], list(d["words"]), phrases, GmmModel.from_dict(d["gmm"]),
                   np.asarray(d["phrase_of_cluster"], dtype=np.int64))


def count_objects(mesh: Mesh) -> int:
    """Connected components of the face graph (faces sharing a vertex)."""
    f = mesh.faces
    rows = np.repeat(np.arange(len(f)), 3)
    adj = coo_matrix((np.ones(rows.size), (rows, f.reshape(-1))), shape=(len(f), mesh.n_vertices)).tocsr()
    n, _ = connected_components(adj @ adj.T, directed=False)
    return int(n)


def parse_scene(mesh: Mesh, prompt: str, provider: EmbeddingProvider, cfg: TrainConfig = TrainConfig(),
                check_object_count: bool = True) -> SceneParse:
    """Phrases, pooled-point GMM, per-object masks and phrase/cluster matching."""
    words = tokenize(prompt)
    phrases = extract_noun_phrases(prompt)
    k = len(phrases)
    if check_object_count:
        n_obj = count_objects(mesh)
        if n_obj != k:
            raise MatchingError(f"prompt has {k} noun phrase(s) but the mesh has {n_obj} object(s)")
    res = (cfg.resolution, cfg.resolution)
    buffers = [render_geometry_pass(mesh, pose, res)[0]
               for pose in orbit_poses(cfg.parse_views, radius=cfg.camera_radius)]
    pooled = np.concatenate([b.hit_points() for b in buffers])
    if len(pooled) < k:
        raise MatchingError(f"only {len(pooled)} surface points visible for {k} phrases")
    gmm = gmm_fit(pooled, k, rng_seed=cfg.seed)
    masks = np.stack([decouple_hitmap(b.hit, b, assign_clusters(gmm, b.hit_points()), k) for b in buffers])
    neutral = np.stack([neutral_render(b, cfg.background) for b in buffers])
    labels = assign_clusters(gmm, pooled)
    sizes = np.bincount(labels, minlength=k)
    if k == 1:
        poc, sim = np.zeros(1, dtype=np.int64), None
    else:
        sim = similarity_matrix(phrases, masks, neutral, provider, cfg.background)
        poc = solve_assignment(sim)[0]
    return SceneParse(prompt, words, phrases, gmm, poc, sim, sizes, masks, neutral)


# --------------------------------------------------------------------------
# rendering through the field


@dataclass
class ViewBatch:
    """Geometry of several views with hit pixels concatenated view-major."""

    hit: np.ndarray  # (V, H, W)
    points: np.ndarray
    normals: np.ndarray
    dirs: np.ndarray

    @classmethod
    def from_poses(cls, mesh: Mesh, poses, resolution: int) -> "ViewBatch":
        bufs = [render_geometry_pass(mesh, p, (resolution, resolution))[0] for p in poses]
        dirs = np.concatenate([b.hit_view_dirs() for b in bufs])
        normals = orient_normals(np.concatenate([b.hit_normals() for b in bufs]), dirs)
        return cls(np.stack([b.hit for b in bufs]), np.concatenate([b.hit_points() for b in bufs]), normals, dirs)


def render_views(field: StyleField, batch: ViewBatch, adjacency, word_feats, lights: Sequence[SGLight],
                 background) -> Tuple[ad.Tensor, object]:
    """Differentiable (V, H, W, 3) renders plus the raw field outputs."""
    if len(batch.points) == 0:
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), batch.hit.shape + (3,))
        return ad.constant(bg.copy()), None
    out = field(batch.points, batch.normals, batch.dirs, adjacency, word_feats)
    rad = shade(out.normals, batch.dirs, out.diffuse, out.roughness, out.specular, lights)
    return compose_images(rad, batch.hit, background), out


def full_adjacency(n_points: int, n_words: int) -> np.ndarray:
    return np.ones((n_points, n_words), dtype=bool)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    field: StyleField
    scene: SceneParse
    metrics: List[dict]
    checkpoints: List[Path]
    state: OptimizerState


def _write_metrics(path: Path, rows: Sequence[dict], append: bool):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(mesh: Mesh, prompt: str, cfg: TrainConfig, provider: EmbeddingProvider,
          lights: Optional[Sequence[SGLight]] = None, out_dir=None, scene: Optional[SceneParse] = None,
          resume_from=None, check_object_count: bool = True) -> TrainResult:
    """Run the optimisation.

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints
    ``ckpt_XXXXX.npz`` every ``cfg.checkpoint_every`` iterations plus
    ``final.npz``.  ``resume_from`` continues a previous run's step counter.
    """
    lights = default_lights() if lights is None else list(lights)
    mesh = normalize_unit_sphere(mesh)
    state = OptimizerState()
    start = 0
    if resume_from is not None:
        field_, extra, meta = load_checkpoint(resume_from)
        state = OptimizerState.from_arrays(extra)
        start = int(meta.get("iteration", state.step))
        scene = SceneParse.from_dict(meta["scene"]) if "scene" in meta else scene
    else:
        field_ = StyleField(cfg.seed, cfg.num_bands, cfg.width, provider.dim, cfg.share_dga, cfg.r_min)
    if scene is None:
        scene = parse_scene(mesh, prompt, provider, cfg, check_object_count)
    word_feats = np.asarray(provider.word_features(prompt), dtype=np.float64)
    text_global = np.asarray(provider.global_text(prompt), dtype=np.float64)
    if word_feats.shape[0] != len(scene.words):
        raise ValueError(f"provider returned {word_feats.shape[0]} word rows for {len(scene.words)} words")
    weights = CgcWeights(cfg.lambda_c, cfg.lambda_f)
    policy = AugmentationPolicy(cfg.crops_per_view, tuple(cfg.crop_scale), cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics: List[dict] = []
    ckpts: List[Path] = []

    def checkpoint(name, iteration):
        meta = {"iteration": iteration, "train_config": cfg.to_dict(), "scene": scene.to_dict(),
                "provider": provider.describe()}
        ckpts.append(save_checkpoint(out_dir / name, field_, state.to_arrays(), meta))

    if out_dir is not None:
        mpath = out_dir / "metrics.csv"
        kept = [r for r in read_metrics(mpath) if r["iter"] < start] if resume_from is not None and mpath.exists() else []
        _write_metrics(mpath, kept, append=False)
    for it in range(start, cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        poses = sample_camera_poses(rng, cfg.views_per_iter, cfg.camera_radius, cfg.camera_sigma)
        batch = ViewBatch.from_poses(mesh, poses, cfg.resolution)
        adj = scene.adjacency(batch.points) if cfg.use_dga else full_adjacency(len(batch.points), len(scene.words))
        field_.zero_grad()
        images, _ = render_views(field_, batch, adj, word_feats, lights, cfg.background)
        crops = augment_views(images, policy, rng)
        feats = provider.image_features(crops)
        coarse = coarse_loss(ad.mean(feats, axis=0), text_global)
        fine_rows = feats if cfg.fine_rows == "crops" else provider.image_features(images)
        if cfg.lambda_f > 0:
            fine = fine_loss(correlation_map(fine_rows, word_feats))
        else:
            fine = fine_loss(correlation_map(fine_rows.data, word_feats))  # logged only
        total = cgc_loss(coarse, fine, weights)
        if not np.isfinite(total.data):
            raise NumericalError(f"non-finite loss at iteration {it}")
        ad.backward(total)
        lr = lr_at(it, cfg)
        params = field_.parameters()
        new = adamw_step({k: p.data for k, p in params.items()},
                         {k: p.grad for k, p in params.items() if p.grad is not None}, state, lr, cfg)
        for k, p in params.items():
            p.data = new[k]
        row = {"iter": it, "lr": lr, "coarse": float(coarse.data), "fine": float(fine.data),
               "total": float(total.data)}
        metrics.append(row)
        if out_dir is not None:
            _write_metrics(out_dir / "metrics.csv", [row], append=True)
            if (it + 1) % cfg.checkpoint_every == 0:
                checkpoint(f"ckpt_{it + 1:05d}.npz", it + 1)
        if it % 50 == 0:
            log.info("iter %d lr %.3g coarse %.4f fine %.4f total %.4f", it, lr, row["coarse"], row["fine"],
                     row["total"])
    if out_dir is not None:
        checkpoint("final.npz", max(cfg.iterations, start))
    return TrainResult(field_, scene, metrics, ckpts, state)


# --------------------------------------------------------------------------
# evaluation


def color_target(phrase: NounPhrase) -> Optional[Tuple[str, np.ndarray]]:
    for word in phrase.adjectives:
        if word in COLOR_TABLE:
            return word, np.asarray(COLOR_TABLE[word], dtype=np.float64)
    return None


@dataclass
class EvalReport:
    sentence_similarity: float
    word_similarity: float
    baseline_sentence_similarity: float
    baseline_word_similarity: float
    objects: List[dict]
    images: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"provider_space_scores": {
                    "note": "similarity under the active embedding provider, not a real CLIP score",
                    "sentence_similarity": self.sentence_similarity,
                    "word_similarity": self.word_similarity,
                    "baseline_sentence_similarity": self.baseline_sentence_similarity,
                    "baseline_word_similarity": self.baseline_word_similarity},
                "objects": self.objects}


def _scores(images: ad.Tensor, provider, prompt) -> Tuple[float, float]:
    feats = provider.image_features(images).data
    text = np.asarray(provider.global_text(prompt))
    g = feats.mean(axis=0)
    sent = float(g @ text / (np.linalg.norm(g) * np.linalg.norm(text)))
    l_img, l_txt = fine_scores(correlation_map(feats, provider.word_features(prompt)))
    return sent, float((l_img.data + l_txt.data) / 2.0)


def evaluate(field_: StyleField, scene: SceneParse, mesh: Mesh, provider: EmbeddingProvider, cfg: TrainConfig,
             lights: Optional[Sequence[SGLight]] = None, n_views: int = 8, resolution: Optional[int] = None,
             use_dga: Optional[bool] = None) -> EvalReport:
    """Orbit renders at 45 degree spacing, provider-space scores and per-object albedo."""
    lights = default_lights() if lights is None else list(lights)
    mesh = normalize_unit_sphere(mesh)
    res = resolution or cfg.resolution
    use_dga = cfg.use_dga if use_dga is None else use_dga
    batch = ViewBatch.from_poses(mesh, orbit_poses(n_views, radius=cfg.camera_radius), res)
    words = np.asarray(provider.word_features(scene.prompt), dtype=np.float64)
    adj = scene.adjacency(batch.points) if use_dga else full_adjacency(len(batch.points), len(scene.words))
    images, out = render_views(field_, batch, adj, words, lights, cfg.background)
    sent, word = _scores(images, provider, scene.prompt)
    baseline = StyleField(**field_.config())
    base_imgs, _ = render_views(baseline, batch, adj, words, lights, cfg.background)
    b_sent, b_word = _scores(base_imgs, provider, scene.prompt)
    labels = assign_clusters(scene.gmm, batch.points)
    objects = []
    for c in range(scene.k):
        phrase = scene.phrases[int(scene.phrase_of_cluster[c])]
        sel = labels == c
        mean_diffuse = out.diffuse.data[sel].mean(axis=0) if sel.any() else np.full(3, np.nan)
        entry = {"cluster": c, "phrase": phrase.text, "n_points": int(sel.sum()),
                 "mean_diffuse": mean_diffuse.tolist()}
        target = color_target(phrase)
        if target is not None:
            entry["color"] = target[0]
            entry["target"] = target[1].tolist()
            entry["distance"] = float(np.linalg.norm(mean_diffuse - target[1]))
        objects.append(entry)
    return EvalReport(sent, word, b_sent, b_word, objects, images.data)


# --------------------------------------------------------------------------
# estimator facade


class TeMOStylizer(BaseEstimator):
    """Estimator wrapper: ``fit(mesh, prompt)`` trains, ``render``/``score`` evaluate."""

    def __init__(self, iterations=1500, lr0=5e-4, views_per_iter=5, crops_per_view=2, resolution=64,
                 lambda_c=1.0, lambda_f=0.33, use_dga=True, share_dga=False, seed=0, provider=None,
                 out_dir=None):
        self.iterations = iterations
        self.lr0 = lr0
        self.views_per_iter = views_per_iter
        self.crops_per_view = crops_per_view
        self.resolution = resolution
        self.lambda_c = lambda_c
        self.lambda_f = lambda_f
        self.use_dga = use_dga
        self.share_dga = share_dga
        self.seed = seed
        self.provider = provider
        self.out_dir = out_dir

    def _config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, lr0=self.lr0, views_per_iter=self.views_per_iter,
                           crops_per_view=self.crops_per_view, resolution=self.resolution,
                           lambda_c=self.lambda_c, lambda_f=self.lambda_f, use_dga=self.use_dga,
                           share_dga=self.share_dga, seed=self.seed)

    def _provider(self) -> EmbeddingProvider:
        if self.provider is None:
            return make_provider({"kind": "toy", "seed": 0})
        if isinstance(self.provider, dict):
            return make_provider(self.provider)
        return self.provider

    def fit(self, mesh: Mesh, prompt: str):
        if not isinstance(mesh, Mesh):
            raise TypeError("fit expects a Mesh")
        if not isinstance(prompt, str) or not prompt.strip():
            raise ValueError("fit expects a non-empty prompt")
        self.config_ = self._config()
        self.provider_ = self._provider()
        self.mesh_ = mesh
        result = train(mesh, prompt, self.config_, self.provider_, out_dir=self.out_dir)
        self.field_, self.scene_, self.metrics_ = result.field, result.scene, result.metrics
        return self

    def _check(self):
        if not hasattr(self, "field_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("TeMOStylizer is not fitted yet; call fit first")

    def render(self, n_views: int = 8) -> np.ndarray:
        self._check()
        return evaluate(self.field_, self.scene_, self.mesh_, self.provider_, self.config_, n_views=n_views).images

    def score(self, mesh=None, prompt=None) -> float:
        """Provider-space sentence similarity of the orbit renders."""
        self._check()
        return evaluate(self.field_, self.scene_, mesh or self.mesh_, self.provider_, self.config_).sentence_similarity
