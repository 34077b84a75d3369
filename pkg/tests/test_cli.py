import csv
import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from surfflow import io
from surfflow.cli import main
from surfflow.raster import backward_warp, read_field, write_field

SCENE_TOML = """\
width = 64
height = 48
focal = 60.0
near = 8.0
far = 30.0
motion = "surface"
speed_schedule = [[3, 2.0]]
frames = 4
frame_interval = 0.1
texture_scale = 0.5
lidar_fraction = 0.3
"""

SOLVER_TOML = """\
levels = 3
iters_per_level = 20

[weights]
lambda_flow = 0.9
lambda_depth = 0.1
"""


def tree_digest(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.toml").write_text(SCENE_TOML)
    (root / "solver.toml").write_text(SOLVER_TOML)
    assert main(["synth", "--config", str(root / "scene.toml"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def estimates(work):
    out = work / "est"
    assert main(["estimate", "--manifest", str(work / "data/manifest.json"), "--config", str(work / "solver.toml"), "--out", str(out)]) == 0
    return out


def test_synth_layout(work):
    data = work / "data"
    manifest = io.DatasetManifest.load(data / "manifest.json")
    assert manifest.epochs == [0, 1, 2, 3] and manifest.frame_interval == 0.1
    for k in range(4):
        assert manifest.image(k).shape == (48, 64, 1)
        assert len(manifest.cloud(k)) == round(0.3 * 64 * 48)
        assert manifest.depth_truth(k).shape == (48, 64, 1)
    assert manifest.flow_truth(3) is None
    assert manifest.rig().shape == (48, 64)
    assert json.loads((data / "gt/speeds.json").read_text()) == {"speeds_mps": [2.0, 2.0, 2.0]}


def test_estimate_writes_one_directory_per_pair(estimates):
    dirs = sorted(p.name for p in estimates.iterdir())
    assert dirs == ["pair_000000", "pair_000001", "pair_000002"]
    est = io.load_estimate(estimates / "pair_000001")
    assert est.epochs == (1, 2) and est.O_f.shape == (48, 64, 2)
    assert est.report["config"]["levels"] == 3


def test_rerun_is_a_no_op(work, estimates):
    before = tree_digest(estimates)
    mtimes = {p: p.stat().st_mtime_ns for p in estimates.rglob("*")}
    assert main(["estimate", "--manifest", str(work / "data/manifest.json"), "--config", str(work / "solver.toml"), "--out", str(estimates)]) == 0
    assert tree_digest(estimates) == before
    assert {p: p.stat().st_mtime_ns for p in estimates.rglob("*")} == mtimes


def test_parallel_run_is_bitwise_identical(work, estimates):
    out = work / "est_jobs2"
    assert main(["estimate", "--manifest", str(work / "data/manifest.json"), "--config", str(work / "solver.toml"), "--out", str(out), "--jobs", "2"]) == 0
    assert tree_digest(out) == tree_digest(estimates)


def test_corrupt_cloud_names_its_epoch(work, estimates, caplog):
    bad = work / "bad"
    shutil.copytree(work / "data", bad)
    (bad / "clouds/000002.dpc").write_bytes(b"garbage")
    out = work / "est_bad"
    with caplog.at_level(logging.ERROR, logger="surfflow"):
        code = main(["estimate", "--manifest", str(bad / "manifest.json"), "--config", str(work / "solver.toml"), "--out", str(out)])
    assert code == 1
    errors = [r.getMessage() for r in caplog.records if r.levelno >= logging.ERROR]
    assert errors and all(m.startswith("epoch 2:") for m in errors)
    assert sorted(p.name for p in out.iterdir() if io.is_complete(p)) == ["pair_000000"]
    assert tree_digest(out / "pair_000000") == tree_digest(estimates / "pair_000000")


def test_config_overrides(work, tmp_path):
    out = tmp_path / "est"
    args = ["estimate", "--manifest", str(work / "data/manifest.json"), "--config", str(work / "solver.toml"), "--out", str(out),
            "--eta", "0.8", "--lambda-flow", "0.8", "--lambda-depth", "0.2", "--no-static", "--no-cycle", "--seed", "3"]
    # a single pair keeps this quick
    manifest = io.DatasetManifest.load(work / "data/manifest.json")
    small = tmp_path / "manifest.json"
    io.DatasetManifest(**{**manifest.__dict__, "root": work / "data", "last": 1}).save(small)
    shutil.copytree(work / "data", tmp_path, dirs_exist_ok=True)
    io.DatasetManifest(**{**manifest.__dict__, "root": tmp_path, "last": 1}).save(small)
    args[2] = str(small)
    assert main(args) == 0
    cfg = io.load_estimate(out / "pair_000000").report["config"]
    assert cfg["eta"] == 0.8 and cfg["seed"] == 3
    assert cfg["weights"]["lambda_flow"] == 0.8 and cfg["weights"]["lambda_depth"] == 0.2
    assert not cfg["weights"]["enable_static"] and not cfg["weights"]["enable_cycle"]


def test_unknown_config_key_is_rejected(work, tmp_path, caplog):
    bad = tmp_path / "bad.toml"
    bad.write_text("levels = 3\nitters = 5\n")
    code = main(["estimate", "--manifest", str(work / "data/manifest.json"), "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2 and "itters" in caplog.text


def test_indivisible_crop_is_reported(work, tmp_path, caplog):
    manifest = io.DatasetManifest.load(work / "data/manifest.json")
    shutil.copytree(work / "data", tmp_path / "data")
    io.DatasetManifest(**{**manifest.__dict__, "root": tmp_path / "data", "crop": (0, 0, 62, 48), "last": 1}).save(tmp_path / "data/manifest.json")
    code = main(["estimate", "--manifest", str(tmp_path / "data/manifest.json"), "--config", str(work / "solver.toml"), "--out", str(tmp_path / "o")])
    assert code == 1 and "not divisible by 4" in caplog.text and "epoch 0" in caplog.text


def _eval(work, est_dir, *extra):
    out = work / f"eval_{Path(est_dir).name}.json"
    code = main(["eval", "--manifest", str(work / "data/manifest.json"), "--estimates", str(est_dir), "--out", str(out), *extra])
    return code, json.loads(out.read_text())


def test_eval_report_fields(work, estimates):
    code, report = _eval(work, estimates)
    assert code == 0
    assert len(report["pairs"]) == 3
    for key in ("rmsd", "census", "mae10", "mae30", "mae50", "abs_rel", "epe", "epe_below_1px"):
        assert report["summary"][key] is not None
    assert report["summary"]["epe"] < 0.5


def test_eval_frame_range(work, estimates):
    code, report = _eval(work, estimates, "--frames", "1,3")
    assert code == 0 and [p["epoch"] for p in report["pairs"]] == [1, 2]


def _replace_fields(src, dst, make):
    shutil.copytree(src, dst)
    for d in sorted(Path(dst).iterdir()):
        epoch = int(d.name.split("_")[1])
        for name, field in make(epoch).items():
            write_field(field, d / f"{name}.dflo")
    return dst


@pytest.fixture(scope="module")
def zero_flow(work, estimates):
    zeros = np.zeros((48, 64, 2))
    return _replace_fields(estimates, work / "est_zero", lambda e: {"O_f": zeros, "O_b": zeros})


@pytest.fixture(scope="module")
def truth(work, estimates):
    """Ground truth written in the estimate layout."""
    m = io.DatasetManifest.load(work / "data/manifest.json")

    def fields(e):
        O_f = m.flow_truth(e)
        return {"O_f": O_f, "O_b": backward_warp(-O_f, O_f), "D_t": m.depth_truth(e), "D_t1": m.depth_truth(e + 1)}

    return _replace_fields(estimates, work / "est_truth", fields)


def test_zero_flow_scores_worse_than_the_solver(work, estimates, zero_flow):
    _, solved = _eval(work, estimates)
    _, still = _eval(work, zero_flow)
    assert still["summary"]["rmsd"] > solved["summary"]["rmsd"]
    assert still["summary"]["census"] > solved["summary"]["census"]


def test_ground_truth_scores_best(work, zero_flow, truth):
    _, still = _eval(work, zero_flow)
    _, report = _eval(work, truth)
    s = report["summary"]
    # float32 storage of the flow
    assert s["epe"] < 1e-5 and s["epe_below_1px"] == 1.0
    assert s["mae50"] < 1e-4 and s["abs_rel"] < 1e-4
    # photometric residue from 8-bit quantisation and bilinear interpolation of the texture
    assert s["rmsd"] < 0.5 * still["summary"]["rmsd"]
    assert s["census"] < 0.5 * still["summary"]["census"]


def test_eval_flags_missing_metrics(work, estimates, caplog):
    code, report = _eval(work, estimates, "--metrics", "rmsd,angular")
    assert code == 1 and "angular" in caplog.text


def test_profile_of_a_constant_speed_sequence(work, truth):
    out = work / "profile.csv"
    assert main(["profile", "--manifest", str(work / "data/manifest.json"), "--estimates", str(truth), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert [float(r["time_s"]) for r in rows] == pytest.approx([0.0, 0.1, 0.2])
    # default box x in [-1, 1], y in [19, 21] lies inside this scene
    for r in rows:
        assert float(r["speed_mps"]) == pytest.approx(2.0, rel=0.03)


def test_profile_of_solver_estimates(work, estimates):
    out = work / "profile_est.csv"
    assert main(["profile", "--manifest", str(work / "data/manifest.json"), "--estimates", str(estimates), "--out", str(out)]) == 0
    speeds = [float(r["speed_mps"]) for r in csv.DictReader(open(out))]
    # a coarse solve on a tiny image; accuracy is covered by the acceptance suite
    assert all(1.0 < s < 3.0 for s in speeds)


def test_profile_with_a_custom_region_and_weights(work, truth):
    out = work / "profile2.csv"
    args = ["profile", "--manifest", str(work / "data/manifest.json"), "--estimates", str(truth), "--out", str(out),
            "--region=-3,3,10,25", "--lambdas", "0,1,0", "--moving-only"]
    assert main(args) == 0
    speeds = [float(r["speed_mps"]) for r in csv.DictReader(open(out))]
    assert speeds == pytest.approx([2.0] * 3, rel=0.03)


def test_profile_needs_two_estimates(work, estimates, tmp_path, caplog):
    shutil.copytree(estimates / "pair_000000", tmp_path / "pair_000000")
    code = main(["profile", "--manifest", str(work / "data/manifest.json"), "--estimates", str(tmp_path), "--out", str(tmp_path / "p.csv")])
    assert code == 2 and "two pair estimates" in caplog.text


def test_lift_outputs(work, truth):
    out = work / "lift"
    assert main(["lift", "--manifest", str(work / "data/manifest.json"), "--estimates", str(truth), "--out", str(out), "--band", "20,25"]) == 0
    scene = out / "scene_000001"
    points, velocity, valid = (read_field(scene / f"{n}.dflo") for n in ("points", "velocity", "valid"))
    assert points.shape == (48, 64, 3) and velocity.shape == (48, 64, 3) and valid.shape == (48, 64, 1)
    rows = list(csv.DictReader(open(scene / "cross_section.csv")))
    assert len(rows) > 5
    for r in rows:
        assert float(r["speed_mps"]) == pytest.approx(2.0, rel=0.05)
