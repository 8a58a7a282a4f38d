"""
Target Sampling
Semantic targets, ray and empty-voxel free-space samples, consistency points and training batches
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict

import numpy as np

from .errors import ArgumentError, InvariantViolation
from .geometry import SceneExtent
from .latent_grid import GridConfig, SupportRegion, support_regions

logger = logging.getLogger(__name__)

DEFAULT_DECAY_SCALE = 0.25
DEFAULT_CONSISTENCY_COUNT = 2500


class TargetKind(IntEnum):
    SEMANTIC = 0
    OCCUPIED_UNLABELED = 1
    FREE = 2
    CONSISTENCY = 3


@dataclass
class TargetSet:
    """
    Training coordinates plus the voxel bookkeeping of the accumulation

    positions:     (n, 3) float64 scene-frame coordinates
    kinds:         (n,) TargetKind codes
    class_ids:     (n,) class id for SEMANTIC targets, -1 otherwise
    origins:       (n, 3) sensor origin of occupied targets, NaN for others
    empty_voxels:  (k, 3) int64 indices of observed-empty voxels (sorted, unique)
    unseen_voxels: (u, 3) int64 indices of shadow-masked voxels (sorted, unique)
    """

    positions: np.ndarray
    kinds: np.ndarray
    class_ids: np.ndarray
    origins: np.ndarray
    empty_voxels: np.ndarray
    unseen_voxels: np.ndarray
    extent: SceneExtent
    voxel_edge: float
    meta: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(n)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int16).reshape(n)
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(n, 3)
        self.empty_voxels = np.asarray(self.empty_voxels, dtype=np.int64).reshape(-1, 3)
        self.unseen_voxels = np.asarray(self.unseen_voxels, dtype=np.int64).reshape(-1, 3)
        if not self.voxel_edge > 0:
            raise ArgumentError(f"voxel edge must be > 0, got {self.voxel_edge}")
        semantic = self.kinds == TargetKind.SEMANTIC
        if np.any(self.class_ids[semantic] < 1):
            raise InvariantViolation("semantic targets need class ids >= 1")

    def __len__(self):
        return len(self.positions)

    @property
    def voxel_origin(self) -> np.ndarray:
        return self.extent.min_corner

    def voxel_index(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((points - self.voxel_origin) / self.voxel_edge).astype(np.int64)

    def counts(self) -> Dict[str, int]:
        return {kind.name.lower(): int(np.sum(self.kinds == kind)) for kind in TargetKind}

    def select(self, mask) -> "TargetSet":
        """Targets where mask holds, voxel sets unchanged"""
        return TargetSet(
            self.positions[mask], self.kinds[mask], self.class_ids[mask], self.origins[mask],
            self.empty_voxels, self.unseen_voxels, self.extent, self.voxel_edge, dict(self.meta),
        )

    def with_targets(self, positions, kinds, class_ids=None, origins=None) -> "TargetSet":
        """Append targets, keeping the voxel bookkeeping"""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        kinds = np.broadcast_to(np.asarray(kinds, dtype=np.int8), (n,))
        class_ids = np.full(n, -1, dtype=np.int16) if class_ids is None else class_ids
        origins = np.full((n, 3), np.nan) if origins is None else origins
        return TargetSet(
            np.concatenate([self.positions, positions]),
            np.concatenate([self.kinds, kinds]),
            np.concatenate([self.class_ids, class_ids]),
            np.concatenate([self.origins, origins]),
            self.empty_voxels, self.unseen_voxels, self.extent, self.voxel_edge, dict(self.meta),
        )

    def voxel_dims(self) -> np.ndarray:
        return self.extent.voxel_dims(self.voxel_edge)

    def voxel_mask(self, indices) -> np.ndarray:
        """Boolean volume of the voxel grid with the given (k, 3) indices set"""
        dims = self.voxel_dims()
        mask = np.zeros(tuple(dims), dtype=bool)
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if len(indices):
            mask[indices[:, 0], indices[:, 1], indices[:, 2]] = True
        return mask

    def in_voxels(self, points, mask: np.ndarray) -> np.ndarray:
        """Whether each point falls in a voxel set in mask (False outside the grid)"""
        idx = self.voxel_index(points)
        inside = np.all((idx >= 0) & (idx < np.asarray(mask.shape)), axis=1)
        hit = np.zeros(len(idx), dtype=bool)
        hit[inside] = mask[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        return hit


# ======================================================= #
# Free-space samples
# ======================================================= #
def sample_ray_free_batch(points, origins, decay_scale: float, rng) -> np.ndarray:
    """
    One free-space sample per ray origin -> point

    The distance d from the point back toward the origin follows an exponential
    distribution with the given scale, truncated by rejection at the ray length.
    """
    rng = np.random.default_rng(rng)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    if not decay_scale > 0:
        raise ArgumentError(f"decay scale must be > 0, got {decay_scale}")

    back = origins - points
    length = np.linalg.norm(back, axis=1)
    if np.any(length <= decay_scale * 1e-3):
        raise ArgumentError("degenerate ray: point coincides with its origin")

    d = np.empty(len(points))
    pending = np.arange(len(points))
    while len(pending):
        draw = rng.exponential(decay_scale, size=len(pending))
        ok = (draw > 0) & (draw < length[pending])
        d[pending[ok]] = draw[ok]
        pending = pending[~ok]

    return points + back * (d / length)[:, None]


def sample_ray_free(point, origin, decay_scale: float, rng) -> np.ndarray:
    """Single-ray version of sample_ray_free_batch"""
    return sample_ray_free_batch(np.reshape(point, (1, 3)), np.reshape(origin, (1, 3)), decay_scale, rng)[0]


def truncated_exponential_mean(scale: float, length: float) -> float:
    r = length / scale
    return scale - length * np.exp(-r) / (1.0 - np.exp(-r))


def sample_empty_voxels(empty_voxels, voxel_edge: float, rng, voxel_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """One uniform position inside every empty voxel"""
    if not voxel_edge > 0:
        raise ArgumentError(f"voxel edge must be > 0, got {voxel_edge}")
    rng = np.random.default_rng(rng)
    idx = np.asarray(empty_voxels, dtype=np.float64).reshape(-1, 3)
    return np.asarray(voxel_origin, dtype=np.float64) + (idx + rng.random(idx.shape)) * voxel_edge


def sample_consistency(extent: SceneExtent, count: int, rng) -> np.ndarray:
    """`count` uniform positions inside the extent"""
    if count < 0:
        raise ArgumentError(f"consistency count must be >= 0, got {count}")
    rng = np.random.default_rng(rng)
    return extent.min_corner + rng.random((int(count), 3)) * extent.size


def sample_targets(base: TargetSet, decay_scale: float = DEFAULT_DECAY_SCALE,
                   consistency_count: int = DEFAULT_CONSISTENCY_COUNT, rng=None) -> TargetSet:
    """
    Full training target set from an accumulated one

    Args:
        base: accumulated targets (SEMANTIC / OCCUPIED_UNLABELED with ray origins)
        decay_scale: exponential scale of the ray free-space distance (meters)
        consistency_count: number of consistency-only points
        rng: seed or Generator

    Returns:
        occupied targets of base, one ray sample per occupied target, one sample per
        empty voxel and the consistency points. Ray samples that fall into unseen voxels
        or outside the extent are dropped (counted in meta["dropped_ray_samples"]), so the
        FREE count is |empty voxels| + |occupied targets with an origin| - dropped.
    """
    rng = np.random.default_rng(rng)
    occupied = np.isin(base.kinds, (TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED))
    kept = base.select(occupied)

    with_origin = np.all(np.isfinite(kept.origins), axis=1)
    ray_free = sample_ray_free_batch(kept.positions[with_origin], kept.origins[with_origin], decay_scale, rng)

    inside = base.extent.contains(ray_free)
    unseen = base.in_voxels(ray_free, base.voxel_mask(base.unseen_voxels))
    ray_free = ray_free[inside & ~unseen]
    dropped = int(np.sum(~(inside & ~unseen)))

    empty_free = sample_empty_voxels(base.empty_voxels, base.voxel_edge, rng, base.voxel_origin)
    consistency = sample_consistency(base.extent, consistency_count, rng)

    out = kept.with_targets(ray_free, TargetKind.FREE)
    out = out.with_targets(empty_free, TargetKind.FREE)
    out = out.with_targets(consistency, TargetKind.CONSISTENCY)
    out.meta = dict(base.meta, ray_samples=len(ray_free), empty_voxel_samples=len(empty_free),
                    consistency_samples=len(consistency), dropped_ray_samples=dropped)
    if dropped:
        logger.info("dropped %d ray free-space samples (unseen voxel or outside extent)", dropped)
    return out


def resample_free_targets(targets: TargetSet, decay_scale: float, consistency_count: int, rng) -> TargetSet:
    """Re-draw FREE and CONSISTENCY targets, keeping the occupied ones"""
    occupied = np.isin(targets.kinds, (TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED))
    return sample_targets(targets.select(occupied), decay_scale, consistency_count, rng)


# ======================================================= #
# Training batches
# ======================================================= #
@dataclass
class TrainingBatch:
    """Subsampled targets with their (possibly 2-of-4) support regions"""

    positions: np.ndarray
    kinds: np.ndarray
    class_ids: np.ndarray
    region: SupportRegion
    rows: np.ndarray

    def __len__(self):
        return len(self.positions)

    def counts(self) -> Dict[str, int]:
        return {kind.name.lower(): int(np.sum(self.kinds == kind)) for kind in TargetKind}


def choose_two_of_four(n: int, rng, weights: np.ndarray = None) -> np.ndarray:
    """
    Two distinct support indices per row, uniformly, in ascending order

    With weights given, supports of zero weight are only taken when fewer than two
    supports of a row carry weight, so every row keeps a positive weight sum.
    """
    rng = np.random.default_rng(rng)
    keys = rng.random((n, 4))
    if weights is not None:
        keys += np.asarray(weights).reshape(n, 4) <= 0.0
    return np.sort(np.argsort(keys, axis=1)[:, :2], axis=1)


def build_batch(target_set: TargetSet, max_targets: int, support_subset: bool, rng,
                grid_config: GridConfig) -> TrainingBatch:
    if len(target_set) == 0:
        raise ArgumentError("cannot build a batch from an empty target set")
    if max_targets < 1:
        raise ArgumentError(f"max_targets must be >= 1, got {max_targets}")
    rng = np.random.default_rng(rng)

    n = len(target_set)
    if n > max_targets:
        rows = np.sort(rng.choice(n, size=int(max_targets), replace=False))
    else:
        rows = np.arange(n)

    positions = target_set.positions[rows]
    region = support_regions(positions, grid_config)
    if support_subset:
        # the two kept bilinear weights are doubled
        region = region.select_supports(choose_two_of_four(len(rows), rng, region.weights), scale=2.0)

    return TrainingBatch(
        positions=positions,
        kinds=target_set.kinds[rows],
        class_ids=target_set.class_ids[rows],
        region=region,
        rows=rows,
    )
