import numpy as np
import pytest

from voxocc.config import RunConfig
from voxocc.errors import ContractViolation, NumericError
from voxocc.fileio import read_checkpoint, read_jsonl
from voxocc.geometry import VoxelGridSpec
from voxocc.model import OccupancyModel
from voxocc.synth import Sample, SceneSpec, generate_dataset
from voxocc.trainer import (TrainResult, build_or_load_vt, evaluate,
                            smoothed, train)
from voxocc.view_transform import rig_signature

GRID = VoxelGridSpec(-8.0, 8.0, -8.0, 8.0, -2.0, 2.0, 16, 16, 8)


def small_config(**kw):
    base = dict(seed=5, grid=GRID, n_cameras=2, image_height=64,
                image_width=64, feat_channels=8, trunk_base=8,
                decoder_channels=8, head_hidden=8, n_queries=4, n_layers=1,
                log_every=1000)
    base.update(kw)
    return RunConfig(**base).validate()


def small_samples(n=2):
    spec = SceneSpec(seed=2, grid=GRID, n_cameras=2, image_height=64,
                     image_width=64, min_objects=2, max_objects=4)
    return generate_dataset(spec, n)


def test_zero_steps_writes_initial_checkpoint(tmp_path):
    cfg = small_config()
    samples = small_samples(1)
    res = train(cfg, samples, tmp_path, steps=0, quiet=True)
    assert isinstance(res, TrainResult)
    assert res.steps == 0 and res.log == []
    assert np.isnan(res.final_loss)
    saved = read_checkpoint(res.checkpoint_path)
    fresh = OccupancyModel(cfg).state_dict()
    assert set(saved) == set(fresh)
    for k in fresh:
        assert np.array_equal(saved[k], np.asarray(fresh[k], np.float32)), k
    assert read_jsonl(tmp_path / "train_log.jsonl") == []
    assert (tmp_path / "config.json").exists()


def test_reruns_are_byte_identical(tmp_path):
    cfg = small_config()
    samples = small_samples(2)
    a = train(cfg, samples, tmp_path / "a", steps=3, quiet=True)
    b = train(cfg, samples, tmp_path / "b", steps=3, quiet=True)
    assert (tmp_path / "a/model.ckpt").read_bytes() == \
        (tmp_path / "b/model.ckpt").read_bytes()
    assert (tmp_path / "a/train_log.jsonl").read_text() == \
        (tmp_path / "b/train_log.jsonl").read_text()
    assert a.log == b.log
    assert a.final_loss == b.final_loss


def test_log_lines_carry_all_terms(tmp_path):
    cfg = small_config()
    samples = small_samples(1)
    res = train(cfg, samples, tmp_path, steps=2, quiet=True)
    assert [line["step"] for line in res.log] == [0, 1]
    line = res.log[0]
    assert "total" in line and "occ/total" in line and "det/total" in line
    assert any(k.startswith("occ/scale1/") for k in line)
    assert any(k.startswith("det/layer1/") for k in line)
    assert read_jsonl(tmp_path / "train_log.jsonl") == res.log
    # composed exactly the way the loss assembles it
    assert np.isclose(line["total"],
                      line["det/total"] + cfg.lambda_occ * line["occ/total"],
                      rtol=1e-5)


def test_aux_off_logs_no_detection_terms(tmp_path):
    cfg = small_config(use_aux=False)
    res = train(cfg, small_samples(1), tmp_path, steps=1, quiet=True)
    assert "det/total" not in res.log[0]
    assert "occ/total" in res.log[0]


def test_train_input_contracts(tmp_path):
    cfg = small_config()
    with pytest.raises(ContractViolation):
        train(cfg, [], tmp_path, steps=1, quiet=True)
    with pytest.raises(ContractViolation):
        train(cfg, small_samples(1), tmp_path, steps=-1, quiet=True)


def test_non_finite_input_aborts(tmp_path):
    cfg = small_config()
    samples = small_samples(1)
    samples[0].images[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train(cfg, samples, tmp_path, steps=1, quiet=True)


def test_vt_cache_reused_and_invalidated(tmp_path):
    cfg = small_config()
    samples = small_samples(1)
    cache = tmp_path / "lift.ivtm"
    vt1 = build_or_load_vt(cfg, samples[0].rig, cache)
    assert cache.exists()
    vt2 = build_or_load_vt(cfg, samples[0].rig, cache)
    assert vt2.rig_hash == vt1.rig_hash
    other = SceneSpec(seed=2, grid=GRID, n_cameras=3, image_height=64,
                      image_width=64).rig()
    vt3 = build_or_load_vt(cfg, other, cache)
    assert vt3.rig_hash == rig_signature(other, cfg.grid)
    assert vt3.rig_hash != vt1.rig_hash


# -- smoothing ----------------------------------------------------------------

def test_smoothed_trailing_mean():
    got = smoothed([1.0, 2.0, 3.0, 4.0], window=2)
    assert np.allclose(got, [1.0, 1.5, 2.5, 3.5])


def test_smoothed_window_wider_than_series():
    got = smoothed([2.0, 4.0, 6.0], window=10)
    assert np.allclose(got, [2.0, 3.0, 4.0])
    assert got.shape == (3,)


# -- evaluation ---------------------------------------------------------------

def all_class_sample(grid):
    occ = (np.arange(grid.nx * grid.ny * grid.nz) % 17).astype(np.uint8)
    occ = occ.reshape(grid.nx, grid.ny, grid.nz)
    return Sample(images=np.zeros((2, 3, 64, 64), np.float32), rig=None,
                  occupancy=occ, boxes=[], ground_box=None, grid=grid,
                  seed=0)


def test_oracle_eval_is_perfect(tmp_path):
    cfg = small_config()
    res = evaluate(cfg, [all_class_sample(GRID)], None, radii=(8.0,),
                   oracle_pred=True)
    assert res.report.miou == 1.0
    assert res.report.scene_iou == 1.0
    assert res.n_scenes == 1
    assert res.per_range[0][1].miou == 1.0
    assert res.warnings == []


def test_eval_range_beyond_extent_warns():
    cfg = small_config()
    res = evaluate(cfg, [all_class_sample(GRID)], None, radii=(20.0,),
                   oracle_pred=True)
    assert len(res.warnings) == 1 and "clamped" in res.warnings[0]
    assert res.per_range[0][0] == 20.0
    assert res.per_range[0][1].miou == 1.0   # clamped to the full grid


def test_eval_runs_trained_checkpoint(tmp_path):
    cfg = small_config()
    samples = small_samples(1)
    res = train(cfg, samples, tmp_path, steps=1, quiet=True)
    ev = evaluate(cfg, samples, res.checkpoint_path, radii=(4.0, 8.0))
    assert 0.0 <= ev.report.miou <= 1.0
    assert ev.report.n_voxels == GRID.nx * GRID.ny * GRID.nz
    assert len(ev.per_range) == 2
    assert ev.per_range[0][1].n_voxels < ev.per_range[1][1].n_voxels
    d = ev.to_dict()
    assert set(d) == {"n_scenes", "overall", "per_range", "warnings"}
    assert d["per_range"][0]["radius"] == 4.0


def test_eval_rejects_empty_samples():
    with pytest.raises(ContractViolation):
        evaluate(small_config(), [], None, oracle_pred=True)
