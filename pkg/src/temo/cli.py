"""Command-line entry point: ``temo parse|stylize|render|eval --config run.yaml``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config, 3 missing
file, 4 prompt/scene/checkpoint mismatch, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import jsonschema
import numpy as np
import yaml

from .embed import make_provider
from .geometry import Mesh, load_mesh, normalize_unit_sphere, save_hitmap_png
from .render import save_png, save_raw
from .sceneparse import MatchingError, PromptParseError, phrase_word_mask
from .stylefield import CheckpointError, load_checkpoint
from .trainer import (NumericalError, SceneParse, TrainConfig, evaluate, parse_scene, read_metrics, train)

log = logging.getLogger("temo")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PATH, EXIT_MISMATCH, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
OUTPUT_DIR_ENV = "TEMO_OUTPUT_DIR"
BUILTIN_MESHES = ("builtin:two_spheres",)

_TRAIN_PROPS = {
    "iterations": {"type": "integer", "minimum": 0},
    "lr0": {"type": "number", "exclusiveMinimum": 0},
    "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "decay_every": {"type": "integer", "minimum": 1},
    "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
              "minItems": 2, "maxItems": 2},
    "eps": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "views_per_iter": {"type": "integer", "minimum": 1},
    "crops_per_view": {"type": "integer", "minimum": 1},
    "crop_scale": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                   "minItems": 2, "maxItems": 2},
    "seed": {"type": "integer", "minimum": 0},
    "lambda_c": {"type": "number", "minimum": 0},
    "lambda_f": {"type": "number", "minimum": 0},
    "use_dga": {"type": "boolean"},
    "share_dga": {"type": "boolean"},
    "num_bands": {"type": "integer", "minimum": 1},
    "width": {"type": "integer", "minimum": 1},
    "r_min": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "camera_radius": {"type": "number", "exclusiveMinimum": 1},
    "camera_sigma": {"type": "number", "minimum": 0},
    "parse_views": {"type": "integer", "minimum": 1},
    "background": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                   "minItems": 3, "maxItems": 3},
    "fine_rows": {"enum": ["crops", "views"]},
    "checkpoint_every": {"type": "integer", "minimum": 1},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mesh_path", "prompt"],
    "properties": {
        "mesh_path": {"type": "string", "minLength": 1},
        "prompt": {"type": "string", "minLength": 1},
        "provider": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["kind"],
                 "properties": {"kind": {"const": "toy"}, "seed": {"type": "integer", "minimum": 0}}},
                {"type": "object", "additionalProperties": False, "required": ["kind", "path"],
                 "properties": {"kind": {"const": "file"}, "path": {"type": "string"},
                                "image_seed": {"type": "integer", "minimum": 0}}},
            ]
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "render": {"type": "object", "additionalProperties": False,
                   "properties": {"resolution": {"type": "integer", "minimum": 16},
                                  "eval_views": {"type": "integer", "minimum": 1}}},
        "output_dir": {"type": "string", "minLength": 1},
        "check_object_count": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mesh_path: str
    prompt: str
    provider: dict
    train: TrainConfig
    output_dir: Path
    resolution: int = 64
    eval_views: int = 8
    check_object_count: bool = True

    def to_dict(self) -> dict:
        return {"mesh_path": self.mesh_path, "prompt": self.prompt, "provider": self.provider,
                "train": self.train.to_dict(), "render": {"resolution": self.resolution, "eval_views": self.eval_views},
                "output_dir": str(self.output_dir), "check_object_count": self.check_object_count}


def _resolve(path: str, base: Path) -> str:
    if path in BUILTIN_MESHES:
        return path
    p = Path(os.path.expanduser(path))
    return str(p if p.is_absolute() else (base / p).resolve())


def load_run_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Read, schema-check and resolve a YAML run config.

    Relative paths resolve against the config file's directory.  The output
    directory comes from ``out``, else ``$TEMO_OUTPUT_DIR``, else the file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        lines = [f"  at {'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError(f"{path}: invalid config\n" + "\n".join(lines))
    base = path.parent.resolve()
    train_opts = dict(raw.get("train", {}))
    if seed is not None:
        train_opts["seed"] = int(seed)
    render_opts = raw.get("render", {})
    resolution = int(render_opts.get("resolution", train_opts.get("resolution", 64)))
    train_opts.setdefault("resolution", resolution)
    try:
        tcfg = TrainConfig.from_dict(train_opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: at train: {exc}") from exc
    if out or os.environ.get(OUTPUT_DIR_ENV):
        out_dir = _resolve(out or os.environ[OUTPUT_DIR_ENV], Path.cwd())
    else:
        out_dir = _resolve(raw.get("output_dir", "temo_run"), base)
    provider = dict(raw.get("provider", {"kind": "toy", "seed": 0}))
    if provider.get("kind") == "file":
        provider["path"] = _resolve(provider["path"], base)
        if not Path(provider["path"]).exists():
            raise FileNotFoundError(f"embedding file not found: {provider['path']}")
    mesh_path = _resolve(raw["mesh_path"], base)
    if mesh_path not in BUILTIN_MESHES and not Path(mesh_path).exists():
        raise FileNotFoundError(f"mesh file not found: {mesh_path}")
    return RunConfig(mesh_path, raw["prompt"], provider, tcfg, Path(out_dir),
                     resolution, int(render_opts.get("eval_views", 8)), bool(raw.get("check_object_count", True)))


def _load_mesh(rc: RunConfig) -> Mesh:
    if rc.mesh_path == "builtin:two_spheres":
        from .scenes import two_sphere_mesh
        return two_sphere_mesh()
    return normalize_unit_sphere(load_mesh(rc.mesh_path))


def _write_resolved(rc: RunConfig):
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    (rc.output_dir / "config.resolved.yaml").write_text(yaml.safe_dump(rc.to_dict(), sort_keys=False))


def _require(paths: List[Path]):
    missing = [str(p) for p in paths if not Path(p).is_file() or Path(p).stat().st_size == 0]
    if missing:
        raise RuntimeError(f"expected artifacts missing or empty: {missing}")


# --------------------------------------------------------------------------
# commands


def cmd_parse(rc: RunConfig) -> dict:
    _write_resolved(rc)
    mesh = _load_mesh(rc)
    provider = make_provider(rc.provider)
    scene = parse_scene(mesh, rc.prompt, provider, rc.train, rc.check_object_count)
    out = rc.output_dir
    written = [out / "config.resolved.yaml"]
    masks_dir = out / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    for v in range(scene.object_masks.shape[0]):
        for c in range(scene.k):
            p = masks_dir / f"object_{c}_view_{v:02d}.png"
            save_hitmap_png(scene.object_masks[v, c], p)
            written.append(p)
    table = phrase_word_mask(scene.phrases, len(scene.words))
    sizes = scene.cluster_sizes
    graph = {"n_words": len(scene.words), "words": scene.words, "n_points": int(sizes.sum()),
             "clusters": [{"cluster": c, "phrase_id": int(scene.phrase_of_cluster[c]), "n_points": int(sizes[c]),
                           "word_indices": np.flatnonzero(table[scene.phrase_of_cluster[c]]).tolist(),
                           "n_edges": int(sizes[c] * table[scene.phrase_of_cluster[c]].sum())}
                          for c in range(scene.k)]}
    graph["n_edges"] = sum(c["n_edges"] for c in graph["clusters"])
    report = {"prompt": rc.prompt, "k": scene.k,
              "phrases": [{"phrase_id": p.phrase_id, "text": p.text, "adjectives": list(p.adjectives),
                           "head_noun": p.head_noun, "span": list(p.span)} for p in scene.phrases],
              "clusters": [{"cluster": c, "mean": scene.gmm.means[c].tolist(), "weight": float(scene.gmm.weights[c]),
                            "n_points": int(sizes[c])} for c in range(scene.k)],
              "matching": {"phrase_of_cluster": scene.phrase_of_cluster.tolist(),
                           "similarity": None if scene.similarity is None else scene.similarity.tolist()},
              "gmm_converged": bool(scene.gmm.converged), "gmm_iterations": len(scene.gmm.log_likelihoods)}
    (out / "parse.json").write_text(json.dumps(report, indent=2))
    (out / "graph.json").write_text(json.dumps(graph, indent=2))
    written += [out / "parse.json", out / "graph.json"]
    _require(written)
    return report


def _render_set(field, scene, mesh, provider, rc: RunConfig, subdir: str):
    report = evaluate(field, scene, mesh, provider, rc.train, n_views=rc.eval_views, resolution=rc.resolution)
    d = rc.output_dir / subdir
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(report.images):
        stem = f"view_{round(360.0 * i / rc.eval_views):03d}"
        save_png(img, d / f"{stem}.png")
        paths.append(d / f"{stem}.png")
    return report, paths


def cmd_stylize(rc: RunConfig, resume: Optional[str] = None) -> dict:
    _write_resolved(rc)
    mesh = _load_mesh(rc)
    provider = make_provider(rc.provider)
    result = train(mesh, rc.prompt, rc.train, provider, out_dir=rc.output_dir, resume_from=resume,
                   check_object_count=rc.check_object_count)
    report, paths = _render_set(result.field, result.scene, mesh, provider, rc, "renders")
    metrics_path = rc.output_dir / "metrics.csv"
    _require([metrics_path, rc.output_dir / "final.npz", rc.output_dir / "config.resolved.yaml"] + paths)
    rows = read_metrics(metrics_path)
    if len(rows) != rc.train.iterations:
        raise RuntimeError(f"metrics has {len(rows)} rows, expected {rc.train.iterations}")
    return {"iterations": len(rows), "final": rows[-1] if rows else None,
            "checkpoints": [str(p) for p in result.checkpoints]}


def _checkpoint_path(rc: RunConfig, checkpoint: Optional[str]) -> Path:
    p = Path(checkpoint) if checkpoint else rc.output_dir / "final.npz"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _restore(rc: RunConfig, checkpoint: Optional[str]):
    field, _, meta = load_checkpoint(_checkpoint_path(rc, checkpoint))
    if "scene" not in meta:
        raise CheckpointError("checkpoint carries no scene parse")
    scene = SceneParse.from_dict(meta["scene"])
    if scene.prompt != rc.prompt:
        raise CheckpointError(f"checkpoint was trained on {scene.prompt!r}, config prompt is {rc.prompt!r}")
    return field, scene


def cmd_render(rc: RunConfig, checkpoint: Optional[str] = None) -> dict:
    _write_resolved(rc)
    field, scene = _restore(rc, checkpoint)
    report, paths = _render_set(field, scene, _load_mesh(rc), make_provider(rc.provider), rc, "renders")
    raw_paths = []
    for p, img in zip(paths, report.images):
        save_raw(img, p.with_suffix(".raw"))
        raw_paths.append(p.with_suffix(".raw"))
    _require(paths + raw_paths)
    return {"renders": [str(p) for p in paths]}


def cmd_eval(rc: RunConfig, checkpoint: Optional[str] = None) -> dict:
    _write_resolved(rc)
    field, scene = _restore(rc, checkpoint)
    report, paths = _render_set(field, scene, _load_mesh(rc), make_provider(rc.provider), rc, "eval")
    out = report.to_dict()
    out["views"] = [p.name for p in paths]
    (rc.output_dir / "eval.json").write_text(json.dumps(out, indent=2))
    _require(paths + [rc.output_dir / "eval.json"])
    return out


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="temo", description="Text-driven multi-object mesh stylization.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("parse", "parse the prompt and the scene"), ("stylize", "optimise the style field"),
                        ("render", "render a checkpoint"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "stylize":
            p.add_argument("--resume", metavar="CHECKPOINT")
        if name in ("render", "eval"):
            p.add_argument("--checkpoint")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = load_run_config(args.config, args.seed, args.out)
        if args.command == "parse":
            result = cmd_parse(rc)
        elif args.command == "stylize":
            result = cmd_stylize(rc, args.resume)
        elif args.command == "render":
            result = cmd_render(rc, args.checkpoint)
        else:
            result = cmd_eval(rc, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"path error: {exc}", file=sys.stderr)
        return EXIT_PATH
    except (MatchingError, PromptParseError, CheckpointError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
