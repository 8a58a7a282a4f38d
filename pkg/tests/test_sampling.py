import numpy as np
import pytest

from scene_completion.errors import ArgumentError, InvariantViolation
from scene_completion.geometry import SceneExtent
from scene_completion.latent_grid import GridConfig, support_regions
from scene_completion.sampling import (TargetKind, TargetSet, build_batch, choose_two_of_four, resample_free_targets,
                                       sample_consistency, sample_empty_voxels, sample_ray_free, sample_ray_free_batch,
                                       sample_targets, truncated_exponential_mean)

EXTENT = SceneExtent((-2.0, -2.0, -1.0), (6.0, 2.0, 3.0))
EDGE = 0.5


@pytest.fixture
def wall_targets():
    """Occupied targets on a wall at x = 4.2 seen from (0, 0, 1); voxel column x index 11 is unseen"""
    rng = np.random.default_rng(0)
    n = 400
    positions = np.column_stack([np.full(n, 4.2), rng.uniform(-1.0, 1.0, n), rng.uniform(0.0, 2.0, n)])
    kinds = np.where(np.arange(n) % 2 == 0, TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED)
    class_ids = np.where(kinds == TargetKind.SEMANTIC, 2, -1)
    origins = np.tile([0.0, 0.0, 1.0], (n, 1))
    iy, iz = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    unseen = np.column_stack([np.full(64, 11), iy.reshape(-1), iz.reshape(-1)])
    empty = np.array([[4, 4, 4], [5, 4, 4], [6, 4, 4]])
    return TargetSet(positions, kinds, class_ids, origins, empty, unseen, EXTENT, EDGE)


# ======================================================= #
# Free-space samples
# ======================================================= #
def test_ray_samples_lie_on_segments():
    rng = np.random.default_rng(1)
    points = rng.uniform(-5.0, 5.0, size=(500, 3))
    origins = rng.uniform(-5.0, 5.0, size=(500, 3))
    samples = sample_ray_free_batch(points, origins, 0.25, rng)
    ray = origins - points
    t = np.einsum("ij,ij->i", samples - points, ray) / np.einsum("ij,ij->i", ray, ray)
    assert np.all((t > 0) & (t < 1))
    assert np.allclose(points + t[:, None] * ray, samples, atol=1e-9)


def test_ray_sample_distance_follows_truncated_exponential():
    n = 20000
    points = np.tile([0.3, 0.0, 0.0], (n, 1))
    origins = np.zeros((n, 3))
    samples = sample_ray_free_batch(points, origins, 0.25, 7)
    d = np.linalg.norm(samples - points, axis=1)
    assert d.max() < 0.3
    assert d.mean() == pytest.approx(truncated_exponential_mean(0.25, 0.3), abs=5e-3)


def test_single_ray_sample():
    s = sample_ray_free([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.25, 0)
    assert 0.0 < s[0] < 1.0 and s[1] == 0.0 and s[2] == 0.0


def test_degenerate_ray():
    with pytest.raises(ArgumentError):
        sample_ray_free_batch(np.zeros((1, 3)), np.zeros((1, 3)), 0.25, 0)
    with pytest.raises(ArgumentError):
        sample_ray_free_batch(np.ones((1, 3)), np.zeros((1, 3)), 0.0, 0)


def test_empty_voxel_samples_inside_voxels():
    voxels = np.array([[0, 0, 0], [3, 1, 2], [7, 7, 7]])
    samples = sample_empty_voxels(voxels, EDGE, 0, EXTENT.min_corner)
    idx = np.floor((samples - EXTENT.min_corner) / EDGE).astype(int)
    assert np.array_equal(idx, voxels)


def test_consistency_samples_inside_extent():
    samples = sample_consistency(EXTENT, 1000, 3)
    assert samples.shape == (1000, 3)
    assert np.all(EXTENT.contains(samples))
    assert sample_consistency(EXTENT, 0, 3).shape == (0, 3)
    with pytest.raises(ArgumentError):
        sample_consistency(EXTENT, -1, 3)


# ======================================================= #
# Target sets
# ======================================================= #
def test_semantic_targets_need_class_ids():
    with pytest.raises(InvariantViolation):
        TargetSet(np.zeros((1, 3)), [TargetKind.SEMANTIC], [-1], np.zeros((1, 3)), [], [], EXTENT, EDGE)


def test_voxel_mask_and_lookup(wall_targets):
    mask = wall_targets.voxel_mask(wall_targets.unseen_voxels)
    assert mask.shape == (16, 8, 8)
    assert mask.sum() == 64
    hits = wall_targets.in_voxels(np.array([[3.7, 0.0, 1.0], [4.2, 0.0, 1.0], [100.0, 0.0, 0.0]]), mask)
    assert hits.tolist() == [True, False, False]


def test_sample_targets(wall_targets):
    targets = sample_targets(wall_targets, 0.25, 300, 5)
    counts = targets.counts()
    assert counts["semantic"] == 200
    assert counts["occupied_unlabeled"] == 200
    assert counts["consistency"] == 300
    meta = targets.meta
    assert meta["ray_samples"] + meta["dropped_ray_samples"] == 400
    assert meta["empty_voxel_samples"] == 3
    assert counts["free"] == meta["ray_samples"] + 3
    assert meta["dropped_ray_samples"] > 0

    free = targets.positions[targets.kinds == TargetKind.FREE]
    unseen = targets.in_voxels(free, targets.voxel_mask(targets.unseen_voxels))
    assert not np.any(unseen)
    assert np.all(np.isnan(targets.origins[targets.kinds == TargetKind.FREE]))


def test_free_count_without_unseen_voxels(wall_targets):
    clear = TargetSet(wall_targets.positions, wall_targets.kinds, wall_targets.class_ids, wall_targets.origins,
                      wall_targets.empty_voxels, [], EXTENT, EDGE)
    targets = sample_targets(clear, 0.25, 10, 5)
    assert targets.meta["dropped_ray_samples"] == 0
    assert targets.counts()["free"] == len(wall_targets) + len(wall_targets.empty_voxels)

    shadowed = sample_targets(wall_targets, 0.25, 10, 5)
    dropped = shadowed.meta["dropped_ray_samples"]
    assert shadowed.counts()["free"] == len(wall_targets) + 3 - dropped


def test_sample_targets_is_deterministic(wall_targets):
    a = sample_targets(wall_targets, 0.25, 50, 11)
    b = sample_targets(wall_targets, 0.25, 50, 11)
    assert np.array_equal(a.positions, b.positions)


def test_resample_keeps_occupied(wall_targets):
    targets = sample_targets(wall_targets, 0.25, 100, 1)
    again = resample_free_targets(targets, 0.25, 100, 2)
    occupied = np.isin(again.kinds, (TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED))
    assert np.array_equal(again.positions[occupied], wall_targets.positions)
    assert not np.array_equal(again.positions[~occupied], targets.positions[len(wall_targets):])


# ======================================================= #
# Batches
# ======================================================= #
@pytest.fixture
def wall_grid():
    return GridConfig.for_extent(EXTENT, delta=0.5, feature_dims=(4, 4, 4))


def test_batch_subsamples(wall_targets, wall_grid):
    targets = sample_targets(wall_targets, 0.25, 100, 0)
    batch = build_batch(targets, 64, False, 0, wall_grid)
    assert len(batch) == 64
    assert len(np.unique(batch.rows)) == 64
    assert np.array_equal(batch.positions, targets.positions[batch.rows])
    assert batch.region.n_supports == 4


def test_batch_keeps_everything_below_limit(wall_targets, wall_grid):
    batch = build_batch(wall_targets, 10000, False, 0, wall_grid)
    assert np.array_equal(batch.rows, np.arange(len(wall_targets)))


def test_two_of_four_doubles_weights(wall_targets, wall_grid):
    batch = build_batch(wall_targets, 50, True, 3, wall_grid)
    assert batch.region.n_supports == 2
    full = support_regions(batch.positions, wall_grid)
    for row in range(len(batch)):
        for k in range(2):
            match = np.all(full.indices[row, :, 2] == batch.region.indices[row, k, 2], axis=1)
            assert batch.region.weights[row, k] == pytest.approx(2.0 * full.weights[row][match][0])


def test_choose_two_of_four_is_uniform():
    chosen = choose_two_of_four(60000, 0)
    assert np.all(chosen[:, 0] < chosen[:, 1])
    _, counts = np.unique(chosen[:, 0] * 4 + chosen[:, 1], return_counts=True)
    assert len(counts) == 6
    assert np.all(np.abs(counts / 60000 - 1 / 6) < 0.01)


def test_batch_errors(wall_targets, wall_grid):
    with pytest.raises(ArgumentError):
        build_batch(wall_targets, 0, False, 0, wall_grid)
    with pytest.raises(ArgumentError):
        build_batch(wall_targets.select(np.zeros(len(wall_targets), dtype=bool)), 10, False, 0, wall_grid)


def test_two_of_four_keeps_weighted_supports():
    weights = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.5], [0.25, 0.25, 0.25, 0.25]] * 200)
    chosen = choose_two_of_four(len(weights), 0, weights)
    kept = np.take_along_axis(weights, chosen, axis=1)
    assert np.all(kept.sum(axis=1) > 0)
    assert np.all(chosen[0::3, 0] == 0)
    assert np.all(chosen[1::3] == [1, 3])
    assert len(np.unique(chosen[2::3, 0] * 4 + chosen[2::3, 1])) == 6


def test_batch_on_cell_centers_has_positive_weights(wall_grid):
    # x and y on finest cell centers: three of the four bilinear weights vanish
    centers = np.asarray(wall_grid.origin) + (np.array([[9, 4], [12, 6], [16, 9]]) + 0.5) * wall_grid.delta
    positions = np.column_stack([centers, [0.5, 1.0, 1.5]])
    targets = TargetSet(positions, [TargetKind.SEMANTIC] * 3, [2] * 3, np.tile([0.0, 0.0, 1.0], (3, 1)),
                        [], [], EXTENT, EDGE)
    assert np.sum(support_regions(positions, wall_grid).weights == 0.0) == 9
    for seed in range(20):
        batch = build_batch(targets, 10, True, seed, wall_grid)
        assert np.all(batch.region.weights.sum(axis=1) == pytest.approx(2.0))
