import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rwcnet import cli
from rwcnet.config import run_config_from_dict
from rwcnet.data import load_keypoints, load_manifest, load_volume
from rwcnet.objectives import dice_score, tre
from rwcnet.params import load_params

TINY = {
    "network": {
        "full_extent": [16, 16, 16],
        "stages": [
            {"scale": 0.5, "rnn_steps": 2, "patch_factor": 0.5, "patches_per_image": 1, "training_steps": 3},
            {"scale": 1.0, "rnn_steps": 2, "patch_factor": 0.5, "patches_per_image": 8, "training_steps": 3},
        ],
        "feature_channels": 4,
        "hidden_channels": 8,
    },
    "loss_profile": "mse+tre",
    "seed": 7,
}


def run(*args):
    return cli.main([str(a) for a in args])


def digest(directory: Path) -> dict:
    return {str(p.relative_to(directory)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data16(tmp_path_factory):
    out = tmp_path_factory.mktemp("data16")
    assert run("synth", "--out", out, "--count", 10, "--size", 16, "--max-disp", 2, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


# -- synth -------------------------------------------------------------------


def test_synth_layout_and_split(data16):
    dirs = sorted(p for p in data16.iterdir() if p.is_dir())
    assert len(dirs) == 10
    m = load_manifest(data16)
    assert len(m.split("train")) == 9 and len(m.split("val")) == 1
    info = json.loads((data16 / "run.json").read_text())
    assert info["version"] and info["command"] == "synth"


def test_synth_prints_zero_baseline(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--count", 2, "--size", 16, "--max-disp", 0) == 0
    rows = [l.split() for l in capsys.readouterr().out.splitlines()[1:]]
    assert [float(r[1]) for r in rows] == [0.0, 0.0, 0.0]


def test_synth_is_reproducible(tmp_path):
    args = ("synth", "--out", tmp_path, "--count", 2, "--size", 16, "--seed", 11)
    assert run(*args) == 0
    first = digest(tmp_path)
    assert run(*args) == 0
    assert digest(tmp_path) == first


def test_synth_rejects_non_power_of_two(tmp_path):
    assert run("synth", "--out", tmp_path, "--count", 1, "--size", 24) == 2


# -- train -------------------------------------------------------------------


def test_train_stagewise_freezes_and_matches_all(data16, tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", tiny_cfg, "--data", data16, "--out", a, "--stage", 0) == 0
    assert run("train", "--config", tiny_cfg, "--data", data16, "--out", a, "--stage", 1) == 0
    p0, _ = load_params(a / "stage0.rwcp")
    p1, h1 = load_params(a / "stage1.rwcp")
    for name in p0.names("stage0."):
        assert p0[name].data.tobytes() == p1[name].data.tobytes()
        assert p1.is_frozen(name)
    assert h1["trained_stages"] == 2
    assert run("train", "--config", tiny_cfg, "--data", data16, "--out", b) == 0
    assert (a / "stage1.rwcp").read_bytes() == (b / "stage1.rwcp").read_bytes()
    header = (a / "loss_stage1.csv").read_text().splitlines()
    assert header[0] == "step,loss,mse,tre,dice,reg" and len(header) == 4
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["version"] and cfg["network"]["full_extent"] == [16, 16, 16]
    assert json.loads((a / "run.json").read_text())["version"]


def test_train_is_deterministic(data16, tiny_cfg, tmp_path):
    for d in ("x", "y"):
        assert run("train", "--config", tiny_cfg, "--data", data16, "--out", tmp_path / d, "--steps", 4) == 0
    x, y = digest(tmp_path / "x"), digest(tmp_path / "y")
    x.pop("run.json"), y.pop("run.json")  # records the output path
    assert x == y


def test_train_later_stage_needs_earlier_checkpoint(data16, tiny_cfg, tmp_path):
    assert run("train", "--config", tiny_cfg, "--data", data16, "--out", tmp_path, "--stage", 1) == 2


def test_train_rejects_indivisible_geometry(data16, tmp_path):
    bad = json.loads(json.dumps(TINY))
    bad["network"]["stages"][1]["patch_factor"] = 0.375
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert run("train", "--config", path, "--data", data16, "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_train_rejects_config_for_other_extents(data16, tmp_path):
    assert run("train", "--config", "smoke", "--data", data16, "--out", tmp_path / "o", "--steps", 1) == 2


def test_config_missing_geometry_is_rejected(tmp_path):
    bad = json.loads(json.dumps(TINY))
    del bad["network"]["full_extent"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert run("train", "--config", path, "--data", tmp_path, "--out", tmp_path / "o") == 2


# -- register ----------------------------------------------------------------


@pytest.fixture(scope="module")
def untrained(data16, tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("untrained")
    assert run("train", "--config", tiny_cfg, "--data", data16, "--out", out, "--steps", 0) == 0
    return out / "checkpoint.rwcp"


def test_register_untrained_is_identity(data16, untrained, tmp_path, capsys):
    pair = data16 / "pair_000"
    code = run(
        "register", "--checkpoint", untrained, "--fixed", pair / "fixed.rwv", "--moving", pair / "moving.rwv",
        "--out-field", tmp_path / "field.rwv", "--out-warped", tmp_path / "warped.rwv",
    )
    assert code == 0
    field = load_volume(tmp_path / "field.rwv")
    assert field.kind == "field" and field.data.shape == (3, 16, 16, 16)
    assert not field.data.any()
    assert load_volume(tmp_path / "warped.rwv").data.tobytes() == load_volume(pair / "moving.rwv").data.tobytes()
    out = capsys.readouterr().out
    assert "stage 0" in out and "stage 1" in out
    assert json.loads((tmp_path / "config.json").read_text())["version"]


def test_register_missing_checkpoint(data16, tmp_path):
    pair = data16 / "pair_000"
    code = run("register", "--checkpoint", tmp_path / "nope.rwcp", "--fixed", pair / "fixed.rwv",
               "--moving", pair / "moving.rwv", "--out-field", tmp_path / "f.rwv")
    assert code == 2


def test_runtime_failure_exit_code(data16, untrained, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setattr(cli, "multiscale_forward", boom)
    pair = data16 / "pair_000"
    code = run("register", "--checkpoint", untrained, "--fixed", pair / "fixed.rwv",
               "--moving", pair / "moving.rwv", "--out-field", tmp_path / "f.rwv")
    assert code == 3


# -- evaluate ----------------------------------------------------------------


def evaluate_json(capsys, *args):
    assert run("evaluate", *args, "--json") == 0
    return json.loads(capsys.readouterr().out)


def test_evaluate_zero_matches_library(data16, capsys):
    pair = data16 / "pair_001"
    out = evaluate_json(capsys, "--field", "zero", "--keypoints", pair / "keypoints.csv",
                        "--labels-fixed", pair / "labels_fixed.rwv", "--labels-moving", pair / "labels_moving.rwv",
                        "--spacing", "1.5,1.5,1.5")
    assert set(out) >= {"tre_mm", "dice", "per_label"}
    kps = load_keypoints(pair / "keypoints.csv", (1.5, 1.5, 1.5))
    assert out["tre_mm"] == tre(np.zeros((3, 16, 16, 16), np.float32), kps).item()
    lf, lm = load_volume(pair / "labels_fixed.rwv"), load_volume(pair / "labels_moving.rwv")
    assert out["dice"] == dice_score(lm.data, lf.data)


def test_evaluate_fixtures(data16, tmp_path, capsys):
    pair = data16 / "pair_002"
    (tmp_path / "same.csv").write_text("fz,fy,fx,mz,my,mx\n3,4,5,3,4,5\n8,8,8,8,8,8\n")
    assert evaluate_json(capsys, "--field", "zero", "--keypoints", tmp_path / "same.csv")["tre_mm"] == 0.0
    lab = pair / "labels_fixed.rwv"
    assert evaluate_json(capsys, "--field", "zero", "--labels-fixed", lab, "--labels-moving", lab)["dice"] == 1.0
    gt = evaluate_json(capsys, "--field", pair / "gt_field.rwv", "--keypoints", pair / "keypoints.csv",
                       "--gt-field", pair / "gt_field.rwv")
    assert gt["tre_mm"] < 0.1 and gt["epe_voxels"] == 0.0


def test_evaluate_needs_something_to_measure(tmp_path):
    assert run("evaluate", "--field", "zero") == 2


def test_evaluate_text_output(data16, capsys):
    pair = data16 / "pair_003"
    assert run("evaluate", "--field", "zero", "--keypoints", pair / "keypoints.csv") == 0
    assert capsys.readouterr().out.startswith("TRE: ")


# -- ablate ------------------------------------------------------------------


def test_ablate_variants_and_table(data16, tiny_cfg, tmp_path, capsys):
    full = tmp_path / "none"
    assert run("ablate", "--variant", "none", "--config", tiny_cfg, "--data", data16, "--out", full, "--steps", 2) == 0
    capsys.readouterr()
    single = tmp_path / "single"
    code = run("ablate", "--variant", "single_res", "--config", tiny_cfg, "--data", data16, "--out", single,
               "--steps", 2, "--baseline", full)
    assert code == 0
    table = capsys.readouterr().out
    assert "none" in table and "single_res" in table
    results = json.loads((single / "results.json").read_text())
    assert results["variant"] == "single_res" and results["epe_voxels"] is not None
    params, header = load_params(single / "checkpoint.rwcp")
    cfg = run_config_from_dict(header["config"])
    assert len(cfg.network.stages) == 1 and cfg.ablation == "single_res"
    assert params.names("stage1.") == []


def test_ablate_unknown_variant(data16, tiny_cfg, tmp_path):
    assert run("ablate", "--variant", "bogus", "--config", tiny_cfg, "--data", data16, "--out", tmp_path) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rwcnet", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("rwcnet ")
    proc = subprocess.run([sys.executable, "-m", "rwcnet", "evaluate", "--field", "zero"], capture_output=True)
    assert proc.returncode == 2
