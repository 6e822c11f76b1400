import json

import pytest
import yaml

from temo.cli import (EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK, EXIT_PATH, ConfigError, load_run_config, main)
from temo.geometry import save_obj
from temo.scenes import two_sphere_mesh
from temo.trainer import read_metrics

PROMPT = "a red sphere and a blue sphere"
TRAIN = {"iterations": 3, "views_per_iter": 1, "crops_per_view": 1, "width": 16, "num_bands": 2,
         "parse_views": 2, "checkpoint_every": 2}


def config(tmp_path, **over):
    cfg = {"mesh_path": "builtin:two_spheres", "prompt": PROMPT, "provider": {"kind": "toy", "seed": 0},
           "train": dict(TRAIN), "render": {"resolution": 16, "eval_views": 8}, "output_dir": "out"}
    cfg.update(over)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_parse_two_spheres(tmp_path, capsys):
    assert run("parse", "--config", config(tmp_path)) == EXIT_OK
    report = json.loads((tmp_path / "out" / "parse.json").read_text())
    assert report["k"] == 2 and sorted(report["matching"]["phrase_of_cluster"]) == [0, 1]
    graph = json.loads((tmp_path / "out" / "graph.json").read_text())
    assert graph["n_edges"] == sum(c["n_points"] * 2 for c in graph["clusters"])
    assert len(list((tmp_path / "out" / "masks").glob("object_*_view_*.png"))) == 4
    assert (tmp_path / "out" / "config.resolved.yaml").exists()


def test_parse_single_phrase_on_two_objects(tmp_path, capsys):
    assert run("parse", "--config", config(tmp_path, prompt="a red sphere")) == EXIT_MISMATCH
    assert "1 noun phrase(s) but the mesh has 2 object(s)" in capsys.readouterr().err


def test_missing_mesh_and_config(tmp_path, capsys):
    assert run("parse", "--config", config(tmp_path, mesh_path="nope.obj")) == EXIT_PATH
    assert run("parse", "--config", tmp_path / "absent.yaml") == EXIT_PATH


def test_negative_fine_weight_is_config_error(tmp_path, capsys):
    train = dict(TRAIN, lambda_f=-0.5)
    assert run("stylize", "--config", config(tmp_path, train=train)) == EXIT_CONFIG
    assert "at train.lambda_f" in capsys.readouterr().err


def test_config_error_paths(tmp_path):
    with pytest.raises(ConfigError, match="at render.resolution"):
        load_run_config(config(tmp_path, render={"resolution": 4}))
    with pytest.raises(ConfigError, match="at <root>"):
        load_run_config(config(tmp_path, colour="red"))


def test_output_dir_precedence(tmp_path, monkeypatch):
    path = config(tmp_path)
    assert load_run_config(path).output_dir.name == "out"
    monkeypatch.setenv("TEMO_OUTPUT_DIR", str(tmp_path / "env"))
    assert load_run_config(path).output_dir == tmp_path / "env"
    assert load_run_config(path, out=str(tmp_path / "flag")).output_dir == tmp_path / "flag"
    assert load_run_config(path, seed=9).train.seed == 9


def test_mesh_path_relative_to_config(tmp_path, capsys):
    save_obj(two_sphere_mesh(subdivisions=1), tmp_path / "scene.obj")
    (tmp_path / "elsewhere").mkdir()
    assert run("parse", "--config", config(tmp_path, mesh_path="scene.obj"), "--out", tmp_path / "o") == EXIT_OK


def test_stylize_resume_render_eval(tmp_path, capsys):
    path = config(tmp_path)
    out = tmp_path / "out"
    assert run("stylize", "--config", path) == EXIT_OK
    assert len(read_metrics(out / "metrics.csv")) == 3
    assert {p.name for p in out.glob("*.npz")} == {"ckpt_00002.npz", "final.npz"}
    assert len(list((out / "renders").glob("view_*.png"))) == 8

    longer = config(tmp_path, train=dict(TRAIN, iterations=5))
    assert run("stylize", "--config", longer, "--resume", out / "final.npz") == EXIT_OK
    assert [r["iter"] for r in read_metrics(out / "metrics.csv")] == [0, 1, 2, 3, 4]

    assert run("render", "--config", longer) == EXIT_OK
    assert len(list((out / "renders").glob("view_*.raw"))) == 8

    assert run("eval", "--config", longer) == EXIT_OK
    names = sorted(p.name for p in (out / "eval").glob("*.png"))
    assert names == [f"view_{a:03d}.png" for a in range(0, 360, 45)]
    report = json.loads((out / "eval.json").read_text())
    assert {o["color"] for o in report["objects"]} == {"red", "blue"}


def test_eval_prompt_mismatch(tmp_path, capsys):
    assert run("stylize", "--config", config(tmp_path, train=dict(TRAIN, iterations=1))) == EXIT_OK
    other = config(tmp_path, prompt="a green sphere and a yellow sphere")
    assert run("eval", "--config", other) == EXIT_MISMATCH
    assert run("eval", "--config", other, "--checkpoint", tmp_path / "missing.npz") == EXIT_PATH
