import json

import numpy as np
import pytest

from voxocc import checks
from voxocc.cli import load_dataset, main
from voxocc.config import RunConfig
from voxocc.fileio import (read_checkpoint, read_json, read_occgrid,
                           write_json, write_occgrid)
from voxocc.geometry import VoxelGridSpec
from voxocc.model import OccupancyModel
from voxocc.synth import SceneSpec
from voxocc.trainer import build_or_load_vt

GRID = VoxelGridSpec(-8.0, 8.0, -8.0, 8.0, -2.0, 2.0, 16, 16, 8)


def scene_spec():
    return SceneSpec(seed=4, grid=GRID, n_cameras=2, image_height=64,
                     image_width=64, min_objects=2, max_objects=4)


def run_config():
    return RunConfig(seed=5, grid=GRID, n_cameras=2, image_height=64,
                     image_width=64, feat_channels=8, trunk_base=8,
                     decoder_channels=8, head_hidden=8, n_queries=4,
                     n_layers=1, log_every=1000)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One generated dataset plus a one-step training run, shared."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "scene.json"
    write_json(spec_path, scene_spec().to_dict())
    cfg_path = root / "config.json"
    run_config().to_json(cfg_path)
    ds = root / "ds"
    assert main(["gen", "--spec", str(spec_path), "--out", str(ds),
                 "--count", "2"]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(ds),
                 "--steps", "1", "--out", str(run), "--quiet"]) == 0
    return {"root": root, "spec": spec_path, "config": cfg_path,
            "ds": ds, "run": run}


def last_json(capsys):
    out = capsys.readouterr().out.strip()
    return json.loads(out.splitlines()[-1])


# -- gen ------------------------------------------------------------ --------

def test_gen_manifest_and_seed_derivation(ws):
    manifest = read_json(ws["ds"] / "manifest.json")
    assert manifest["count"] == 2
    assert [e["seed"] for e in manifest["samples"]] == [4, 5]
    assert manifest["samples"][0]["name"] == "sample_0000"
    assert (ws["ds"] / "rig.json").exists()
    assert (ws["ds"] / "sample_0001/labels.occgrid").exists()


def test_gen_is_deterministic(ws, tmp_path):
    again = tmp_path / "again"
    assert main(["gen", "--spec", str(ws["spec"]), "--out", str(again),
                 "--count", "2"]) == 0
    assert (again / "manifest.json").read_text() == \
        (ws["ds"] / "manifest.json").read_text()
    for rel in ("sample_0000/labels.occgrid", "sample_0000/cam_00.ppm",
                "sample_0001/cam_01.ppm", "rig.json"):
        assert (again / rel).read_bytes() == (ws["ds"] / rel).read_bytes()


def test_gen_count_zero_without_spec(tmp_path):
    out = tmp_path / "empty"
    assert main(["gen", "--out", str(out), "--count", "0"]) == 0
    manifest = read_json(out / "manifest.json")
    assert manifest["samples"] == [] and manifest["count"] == 0
    assert not (out / "rig.json").exists()


def test_gen_negative_count_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x"), "--count", "-1"]) == 2


def test_gen_rejects_unknown_spec_key(tmp_path):
    bad = tmp_path / "bad.json"
    write_json(bad, {"n_camera": 2})
    assert main(["gen", "--spec", str(bad), "--out", str(tmp_path / "o"),
                 "--count", "1"]) == 2


# -- train --------------------------------------------------------------------

def test_train_zero_steps_equals_fresh_init(ws, tmp_path):
    out = tmp_path / "zero"
    assert main(["train", "--config", str(ws["config"]), "--data",
                 str(ws["ds"]), "--steps", "0", "--out", str(out),
                 "--quiet"]) == 0
    saved = read_checkpoint(out / "model.ckpt")
    fresh = OccupancyModel(run_config()).state_dict()
    assert set(saved) == set(fresh)
    assert all(np.array_equal(saved[k], np.asarray(fresh[k], np.float32))
               for k in fresh)


def test_train_aux_off_logs_no_detection(ws, tmp_path):
    cfg_path = tmp_path / "noaux.json"
    cfg = run_config()
    cfg.use_aux = False
    cfg.to_json(cfg_path)
    out = tmp_path / "noaux"
    assert main(["train", "--config", str(cfg_path), "--data", str(ws["ds"]),
                 "--steps", "1", "--out", str(out), "--quiet"]) == 0
    lines = [json.loads(s) for s in
             (out / "train_log.jsonl").read_text().splitlines()]
    assert len(lines) == 1
    assert "det/total" not in lines[0] and "occ/total" in lines[0]


def test_train_rejects_unknown_config_key(ws, tmp_path):
    bad = tmp_path / "bad_cfg.json"
    d = run_config().to_dict()
    d["learning_rate"] = 1e-3
    write_json(bad, d)
    assert main(["train", "--config", str(bad), "--data", str(ws["ds"]),
                 "--steps", "1", "--out", str(tmp_path / "o"),
                 "--quiet"]) == 2


def test_train_rejects_mismatched_dataset(ws, tmp_path):
    # default config wants the 40x40x8 grid and 6 cameras
    assert main(["train", "--data", str(ws["ds"]), "--steps", "1",
                 "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_train_on_empty_dataset_fails(tmp_path):
    out = tmp_path / "empty"
    assert main(["gen", "--out", str(out), "--count", "0"]) == 0
    assert main(["train", "--data", str(out), "--steps", "1",
                 "--out", str(tmp_path / "o"), "--quiet"]) == 2


# -- eval -----------------------------------------------------------------

def all_class_dataset(ws, tmp_path):
    """Copy of the generated dataset with labels holding all 17 classes."""
    import shutil
    ds = tmp_path / "allcls"
    shutil.copytree(ws["ds"], ds)
    occ = (np.arange(GRID.nx * GRID.ny * GRID.nz) % 17).astype(np.uint8)
    occ = occ.reshape(GRID.nx, GRID.ny, GRID.nz)
    for name in ("sample_0000", "sample_0001"):
        write_occgrid(ds / name / "labels.occgrid", occ, 17)
    return ds


def test_eval_oracle_prediction_scores_one(ws, tmp_path, capsys):
    ds = all_class_dataset(ws, tmp_path)
    assert main(["eval", "--data", str(ds), "--oracle-pred"]) == 0
    doc = last_json(capsys)
    assert doc["overall"]["miou"] == 1.0
    assert doc["overall"]["scene_iou"] == 1.0
    assert doc["per_range"] == []       # no --ranges given
    assert doc["n_scenes"] == 2


def test_eval_ranges_and_report_file(ws, tmp_path, capsys):
    ds = all_class_dataset(ws, tmp_path)
    report = tmp_path / "report.json"
    assert main(["eval", "--data", str(ds), "--oracle-pred",
                 "--ranges", "2,8", "--out", str(report)]) == 0
    doc = last_json(capsys)
    assert [e["radius"] for e in doc["per_range"]] == [2.0, 8.0]
    assert doc["per_range"][1]["miou"] == 1.0
    assert doc["warnings"] == []
    assert read_json(report) == doc


def test_eval_range_beyond_extent_warns(ws, tmp_path, capsys):
    ds = all_class_dataset(ws, tmp_path)
    assert main(["eval", "--data", str(ds), "--oracle-pred",
                 "--ranges", "50"]) == 0
    doc = last_json(capsys)
    assert len(doc["warnings"]) == 1 and "clamped" in doc["warnings"][0]


def test_eval_checkpoint_path(ws, capsys):
    assert main(["eval", "--data", str(ws["ds"]), "--ckpt",
                 str(ws["run"] / "model.ckpt")]) == 0
    doc = last_json(capsys)
    assert 0.0 <= doc["overall"]["miou"] <= 1.0
    assert doc["overall"]["n_voxels"] == 2 * GRID.nx * GRID.ny * GRID.nz


def test_eval_usage_errors(ws, tmp_path):
    assert main(["eval", "--data", str(ws["ds"])]) == 2       # no ckpt
    assert main(["eval", "--data", str(ws["ds"]), "--oracle-pred",
                 "--ranges", "abc"]) == 2
    assert main(["eval", "--data", str(ws["ds"]), "--oracle-pred",
                 "--ranges", "-3"]) == 2
    assert main(["eval", "--data", str(tmp_path / "nowhere"),
                 "--oracle-pred"]) == 2


# -- export ---------------------------------------------------------------

def test_export_writes_model_prediction(ws, tmp_path, capsys):
    out = tmp_path / "pred.occgrid"
    assert main(["export", "--ckpt", str(ws["run"] / "model.ckpt"),
                 "--sample", str(ws["ds"] / "sample_0000"),
                 "--out", str(out)]) == 0
    got, n_classes = read_occgrid(out)
    assert n_classes == 17 and got.shape == (16, 16, 8)

    # the file must hold exactly what the checkpointed model predicts
    samples, _ = load_dataset(ws["ds"])
    cfg = RunConfig.from_json(ws["run"] / "config.json")
    model = OccupancyModel(cfg)
    model.load_state_dict(read_checkpoint(ws["run"] / "model.ckpt"))
    vt = build_or_load_vt(cfg, samples[0].rig)
    want = model.predict_labels(samples[0].images, vt, samples[0].rig)
    assert np.array_equal(got, want)


def test_export_unknown_sample_dir(ws, tmp_path):
    assert main(["export", "--ckpt", str(ws["run"] / "model.ckpt"),
                 "--sample", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "x.occgrid")]) == 2


# -- check ----------------------------------------------------------------

def test_check_single_suite_passes(capsys):
    assert main(["check", "--suite", "metrics"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
    doc = json.loads(out.strip().splitlines()[-1])
    assert doc["passed"] is True and doc["checks"] > 0
    assert doc["suites"] == ["metrics"]


def test_check_reports_failures_with_exit_one(monkeypatch, capsys):
    def forced(name, seed=0):
        return [checks.CheckResult(suite=name, name="forced", passed=False,
                                   detail="forced failure", seed=seed)]
    monkeypatch.setattr(checks, "run_suite", forced)
    assert main(["check", "--suite", "metrics"]) == 1
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["passed"] is False
    assert doc["failures"][0]["name"] == "forced"


def test_check_summary_file(tmp_path, capsys):
    out = tmp_path / "summary.json"
    assert main(["check", "--suite", "metrics", "--out", str(out)]) == 0
    assert read_json(out) == last_json(capsys)


# -- environment seed override ---------------------------------------------

def test_occu_seed_overrides_gen(monkeypatch, tmp_path):
    monkeypatch.setenv("OCCU_SEED", "7")
    spec_path = tmp_path / "scene.json"
    write_json(spec_path, scene_spec().to_dict())
    out = tmp_path / "seeded"
    assert main(["gen", "--spec", str(spec_path), "--out", str(out),
                 "--count", "1"]) == 0
    manifest = read_json(out / "manifest.json")
    assert manifest["base_seed"] == 7
    assert manifest["samples"][0]["seed"] == 7


def test_occu_seed_overrides_check(monkeypatch, capsys):
    monkeypatch.setenv("OCCU_SEED", "3")
    assert main(["check", "--suite", "metrics"]) == 0
    assert last_json(capsys)["seed"] == 3


def test_invalid_occu_seed_is_usage_error(monkeypatch, tmp_path):
    monkeypatch.setenv("OCCU_SEED", "notanumber")
    assert main(["gen", "--out", str(tmp_path / "x"), "--count", "1"]) == 2


# -- argparse surface -------------------------------------------------------

def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_missing_required_flag_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["gen", "--count", "1"])
    assert e.value.code == 2
