import os

import numpy as np
import pytest

from scene_completion.config import RunConfig
from scene_completion.errors import ArgumentError
from scene_completion.geometry import SceneExtent
from scene_completion.losses import LossWeights
from scene_completion.sampling import TargetKind, TargetSet, build_batch
from scene_completion.trainer import (OptimizerState, adam_update, consistency_report, fit, initial_checkpoint,
                                      load_checkpoint, lr_schedule, metric_columns, save_checkpoint,
                                      trainable_tensors, train_step)


def small_config(**values):
    settings = {
        "grid.extent_min": (-2.0, -2.0, -1.0), "grid.extent_max": (2.0, 2.0, 1.0),
        "grid.delta": 0.5, "grid.feature_dims": (4, 4, 4), "grid.init_std": 0.1,
        "sampling.max_targets": 64, "training.steps": 4, "training.warmup_steps": 0,
        "training.base_lr": 1e-2, "training.log_every": 1, "training.resample_every": 0,
        "training.checkpoint_every": 0,
    }
    settings.update(values)
    return RunConfig().with_values(settings)


@pytest.fixture
def targets():
    rng = np.random.default_rng(4)
    counts = {TargetKind.SEMANTIC: 60, TargetKind.OCCUPIED_UNLABELED: 20, TargetKind.FREE: 40,
              TargetKind.CONSISTENCY: 20}
    kinds = np.concatenate([np.full(n, int(kind)) for kind, n in counts.items()])
    n = len(kinds)
    positions = rng.uniform([-1.9, -1.9, -0.9], [1.9, 1.9, 0.9], size=(n, 3))
    class_ids = np.where(kinds == TargetKind.SEMANTIC, rng.integers(1, 4, size=n), -1)
    occupied = (kinds == TargetKind.SEMANTIC) | (kinds == TargetKind.OCCUPIED_UNLABELED)
    origins = np.where(occupied[:, None], [0.0, 0.0, 0.5], np.nan)
    extent = SceneExtent((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0))
    return TargetSet(positions, kinds, class_ids, origins, np.zeros((0, 3)), np.zeros((0, 3)), extent, 0.25)


def assert_same_checkpoint(a, b):
    for name, tensor in trainable_tensors(a.params, a.grid).items():
        assert np.array_equal(tensor, trainable_tensors(b.params, b.grid)[name]), name
    for name, stat in a.params.running.items():
        assert np.array_equal(stat, b.params.running[name]), name
    assert a.step == b.step


# ======================================================= #
# Optimizer
# ======================================================= #
def test_lr_schedule():
    assert lr_schedule(0) == 0.0
    assert lr_schedule(1000) == pytest.approx(5e-4)
    assert lr_schedule(2000) == pytest.approx(1e-3)
    assert lr_schedule(39999) == pytest.approx(1e-3)
    assert lr_schedule(40000) == pytest.approx(5e-4)
    assert lr_schedule(80000) == pytest.approx(2.5e-4)
    assert lr_schedule(0, warmup_steps=0) == pytest.approx(1e-3)
    with pytest.raises(ArgumentError):
        lr_schedule(-1)


def test_adam_first_step_is_signed_lr():
    w = np.ones(3)
    state = OptimizerState.zeros_like({"w": w}, base_lr=0.1, warmup_steps=0)
    lr = adam_update(state, {"w": w}, {"w": np.array([2.0, -3.0, 0.0])})
    assert lr == pytest.approx(0.1)
    assert w.tolist() == pytest.approx([0.9, 1.1, 1.0])
    assert state.step == 1


def test_train_step_lowers_the_objective(targets, small_class_map):
    config = small_config()
    ckpt = initial_checkpoint(targets, config, small_class_map)
    batch = build_batch(targets, len(targets), False, 0, ckpt.grid.config)
    state = OptimizerState.zeros_like(trainable_tensors(ckpt.params, ckpt.grid), base_lr=1e-2, warmup_steps=0)
    objectives = []
    for _ in range(25):
        _, _, state, report, _ = train_step(ckpt.params, ckpt.grid, batch, state, LossWeights())
        objectives.append(report.objective)
    assert np.all(np.isfinite(objectives))
    assert objectives[-1] < objectives[0]
    assert state.step == 25


def test_targets_on_cell_centers_train(targets, small_class_map):
    config = small_config()
    ckpt = initial_checkpoint(targets, config, small_class_map)
    grid_config = ckpt.grid.config
    origin, delta = np.asarray(grid_config.origin), grid_config.delta
    positions = targets.positions.copy()
    positions[:, :2] = origin + (np.round((positions[:, :2] - origin) / delta - 0.5) + 0.5) * delta
    centered = TargetSet(positions, targets.kinds, targets.class_ids, targets.origins, targets.empty_voxels,
                         targets.unseen_voxels, targets.extent, targets.voxel_edge)

    state = OptimizerState.zeros_like(trainable_tensors(ckpt.params, ckpt.grid), base_lr=1e-2, warmup_steps=0)
    for seed in range(5):
        batch = build_batch(centered, len(centered), True, seed, grid_config)
        assert np.all(batch.region.weights.sum(axis=1) > 0)
        _, _, state, report, _ = train_step(ckpt.params, ckpt.grid, batch, state, LossWeights())
        assert np.isfinite(report.objective)

    fitted, metrics = fit(centered, config, small_class_map, progress=False)
    assert fitted.step == 4
    assert np.all(np.isfinite(metrics["objective"]))


# ======================================================= #
# Fitting
# ======================================================= #
def test_fit_zero_steps(targets, small_class_map):
    ckpt, metrics = fit(targets, small_config(**{"training.steps": 0}), small_class_map, progress=False)
    assert ckpt.step == 0
    assert metrics.empty
    assert list(metrics.columns) == metric_columns()
    assert ckpt.class_map.names == small_class_map.names
    assert len(ckpt.manifest["config_hash"]) == 64


def test_fit_logs_every_step(targets, small_class_map):
    ckpt, metrics = fit(targets, small_config(), small_class_map, progress=False)
    assert ckpt.step == 4
    assert metrics["step"].tolist() == [1, 2, 3, 4]
    assert set(metric_columns()) <= set(metrics.columns)
    assert np.all(np.isfinite(metrics["objective"]))


def test_fit_is_deterministic(targets, small_class_map):
    a, metrics_a = fit(targets, small_config(), small_class_map, progress=False)
    b, metrics_b = fit(targets, small_config(), small_class_map, progress=False)
    assert_same_checkpoint(a, b)
    assert metrics_a.equals(metrics_b)


def test_resume_matches_an_uninterrupted_run(targets, small_class_map, tmp_path):
    first, _ = fit(targets, small_config(**{"training.steps": 3}), small_class_map, progress=False)
    path = str(tmp_path / "checkpoint.sdif")
    save_checkpoint(path, first)
    resumed, metrics = fit(targets, small_config(**{"training.steps": 6}), small_class_map,
                           resume=load_checkpoint(path), progress=False)
    straight, _ = fit(targets, small_config(**{"training.steps": 6}), small_class_map, progress=False)
    assert metrics["step"].tolist() == [4, 5, 6]
    assert_same_checkpoint(resumed, straight)


def test_periodic_checkpoints(targets, small_class_map, tmp_path):
    config = small_config(**{"training.steps": 5, "training.checkpoint_every": 2})
    fit(targets, config, small_class_map, out_dir=str(tmp_path), progress=False)
    assert sorted(os.listdir(tmp_path)) == ["checkpoint_000002.sdif", "checkpoint_000004.sdif"]
    assert load_checkpoint(str(tmp_path / "checkpoint_000004.sdif")).step == 4


def test_fit_with_resampling(targets, small_class_map):
    config = small_config(**{"training.resample_every": 2, "sampling.consistency_count": 10})
    ckpt, metrics = fit(targets, config, small_class_map, progress=False)
    assert ckpt.step == 4
    assert np.all(np.isfinite(metrics["objective"]))


def test_fit_empty_targets(targets, small_class_map):
    with pytest.raises(ArgumentError):
        fit(targets.select(np.zeros(len(targets), dtype=bool)), small_config(), small_class_map, progress=False)


# ======================================================= #
# Checkpoints
# ======================================================= #
def test_checkpoint_round_trip(checkpoint, tmp_path):
    path = str(tmp_path / "checkpoint.sdif")
    checkpoint.manifest["seed"] = "3"
    save_checkpoint(path, checkpoint)
    loaded = load_checkpoint(path)
    assert_same_checkpoint(loaded, checkpoint)
    assert loaded.manifest == {"seed": "3"}
    assert loaded.class_map.names == checkpoint.class_map.names
    assert loaded.grid.config == checkpoint.grid.config
    assert loaded.opt_state.hyper() == checkpoint.opt_state.hyper()


def test_consistency_report(checkpoint):
    points = np.random.default_rng(0).uniform([-3.5, -3.5, -1.0], [3.5, 3.5, 1.0], size=(50, 3))
    value = consistency_report(checkpoint, points)
    assert np.isfinite(value) and value > 0.0
