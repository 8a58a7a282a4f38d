"""
Scene I/O
KITTI-style scans, labels and poses; multi-scan accumulation with free-space carving and shadow masking
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .containers import read_container, write_container
from .errors import ArgumentError, DataError, DataFormatError
from .geometry import Pose, SceneExtent
from .mapping import MOVING_RAW_ID_MIN, UNLABELED, ClassMap, default_class_map
from .sampling import TargetKind, TargetSet

logger = logging.getLogger(__name__)

__all__ = [
    "PointCloud", "Pose", "SceneExtent", "load_scan", "save_scan", "load_labels", "load_raw_labels",
    "save_labels", "load_dynamic_flags", "load_poses", "save_poses", "traverse_rays", "accumulate",
    "save_target_set", "load_target_set",
]

MAX_POINTS_PER_VOXEL = 10
POSE_REPAIR_TOL = 1e-4


@dataclass
class PointCloud:
    """Sensor returns in one frame, reflectivity normalized to [0, 1]"""

    points: np.ndarray
    reflectivity: np.ndarray = None
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.reflectivity is None:
            self.reflectivity = np.zeros(n)
        self.reflectivity = np.asarray(self.reflectivity, dtype=np.float64).reshape(n)
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)

        finite = np.all(np.isfinite(self.points), axis=1) & np.isfinite(self.reflectivity)
        if not np.all(finite):
            raise DataError(f"point {int(np.argmin(finite))} has non-finite values")
        if not np.all(np.isfinite(self.sensor_origin)):
            raise DataError("sensor origin is not finite")

        # 8-bit intensities are rescaled, everything else clipped
        if n and self.reflectivity.max() > 1.0:
            self.reflectivity = self.reflectivity / 255.0
        self.reflectivity = np.clip(self.reflectivity, 0.0, 1.0)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.reflectivity.copy(), pose.apply(self.sensor_origin))


# ======================================================= #
# KITTI files
# ======================================================= #
def load_scan(path: str) -> PointCloud:
    """Read 16-byte records (x, y, z, reflectivity as little-endian float32)"""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) % 16:
        raise DataFormatError(f"{path}: {len(blob)} bytes is not a multiple of the 16-byte point record")

    records = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(records), axis=1)
    if not np.all(finite):
        raise DataError(f"{path}: record {int(np.argmin(finite))} contains non-finite values")
    return PointCloud(records[:, :3], records[:, 3])


def save_scan(cloud: PointCloud, path: str) -> None:
    records = np.hstack([cloud.points, cloud.reflectivity[:, None]]).astype("<f4")
    with open(path, "wb") as f:
        f.write(records.tobytes())


def load_raw_labels(path: str, n_points: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) % 4:
        raise DataFormatError(f"{path}: {len(blob)} bytes is not a multiple of the 4-byte label record")
    raw = np.frombuffer(blob, dtype="<u4")
    if len(raw) != n_points:
        raise DataFormatError(f"{path}: {len(raw)} label records for {n_points} points")
    return raw.astype(np.uint32)


def load_labels(path: str, n_points: int, class_map: ClassMap = None) -> np.ndarray:
    """Class ids 1..N per point, UNLABELED where the raw id is not mapped"""
    class_map = class_map or default_class_map()
    return class_map.map_raw(load_raw_labels(path, n_points))


def load_dynamic_flags(path: str, n_points: int) -> np.ndarray:
    """Points whose raw label is one of the moving-object classes"""
    return (load_raw_labels(path, n_points) & 0xFFFF) >= MOVING_RAW_ID_MIN


def save_labels(raw_ids, path: str) -> None:
    with open(path, "wb") as f:
        f.write(np.asarray(raw_ids, dtype="<u4").tobytes())


def load_poses(path: str) -> List[Pose]:
    """KITTI odometry poses: one row-major 3x4 matrix (12 floats) per line"""
    poses = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                values = np.array([float(v) for v in line.split()])
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: pose line is not numeric") from None
            if len(values) != 12:
                raise DataFormatError(f"{path}:{line_no}: expected 12 values, found {len(values)}")
            poses.append(_repaired_pose(values.reshape(3, 4), f"{path}:{line_no}"))
    return poses


def _repaired_pose(m: np.ndarray, where: str) -> Pose:
    # pose files are printed with limited precision
    rotation = m[:, :3]
    if not np.all(np.isfinite(m)):
        raise DataError(f"{where}: pose is not finite")
    if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > POSE_REPAIR_TOL:
        raise DataError(f"{where}: rotation is not orthonormal")
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        raise DataError(f"{where}: rotation is a reflection")
    return Pose(rotation, m[:, 3])


def save_poses(poses: Sequence[Pose], path: str) -> None:
    rows = np.array([pose.as_matrix34().reshape(12) for pose in poses]).reshape(-1, 12)
    np.savetxt(path, rows, fmt="%.17e")


# ======================================================= #
# Ray traversal (3D DDA)
# ======================================================= #
def traverse_rays(origins, ends, voxel_origin, voxel_edge: float, dims, chunk: int = 65536) -> np.ndarray:
    """
    Flat ids of all grid voxels crossed by the segments origin -> end

    The voxel holding the end point is not included (it is the measured surface);
    voxels outside the grid are skipped. Returns sorted unique C-order flat ids.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(ends)).reshape(-1, 3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(dims, dtype=np.int64)
    voxel_origin = np.asarray(voxel_origin, dtype=np.float64)

    visited = []
    for start in range(0, len(ends), chunk):
        a = (origins[start:start + chunk] - voxel_origin) / voxel_edge
        b = (ends[start:start + chunk] - voxel_origin) / voxel_edge
        visited.append(_dda_chunk(a, b, dims))
    if not visited:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(visited))


def _dda_chunk(a: np.ndarray, b: np.ndarray, dims: np.ndarray) -> np.ndarray:
    d = b - a
    cur = np.floor(a).astype(np.int64)
    last = np.floor(b).astype(np.int64)
    step = np.sign(d).astype(np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = np.where(step > 0, cur + 1, cur).astype(np.float64)
        tmax = np.where(d != 0, (boundary - a) / d, np.inf)
        tdelta = np.where(d != 0, 1.0 / np.abs(d), np.inf)

    ids = []
    active = np.nonzero(np.abs(last - cur).sum(axis=1) > 0)[0]
    while len(active):
        c = cur[active]
        inside = np.all((c >= 0) & (c < dims), axis=1)
        if np.any(inside):
            ids.append(np.ravel_multi_index(tuple(c[inside].T), tuple(dims)))

        t = tmax[active].copy()
        t[c == last[active]] = np.inf
        axis = np.argmin(t, axis=1)
        cur[active, axis] += step[active, axis]
        tmax[active, axis] += tdelta[active, axis]

        active = active[np.abs(last[active] - cur[active]).sum(axis=1) > 0]

    if not ids:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(ids))


# ======================================================= #
# Accumulation
# ======================================================= #
def _cap_per_voxel(voxel_ids: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices kept when at most `cap` entries per voxel id survive, chosen uniformly"""
    perm = rng.permutation(len(voxel_ids))
    order = perm[np.argsort(voxel_ids[perm], kind="stable")]
    sorted_ids = voxel_ids[order]
    group_start = np.searchsorted(sorted_ids, sorted_ids, side="left")
    rank = np.arange(len(order)) - group_start
    return np.sort(order[rank < cap])


def _shadow_mask(centers: np.ndarray, sensor: np.ndarray, dynamic_points: np.ndarray,
                 radius: float, chunk_pairs: int = 1_000_000) -> np.ndarray:
    """Centers whose sight line from the sensor passes within radius of a dynamic point beyond it"""
    shadow = np.zeros(len(centers), dtype=bool)
    if not len(centers) or not len(dynamic_points):
        return shadow

    q = dynamic_points - sensor
    q_dist = np.linalg.norm(q, axis=1)
    step = max(1, chunk_pairs // len(q))
    for start in range(0, len(centers), step):
        c = centers[start:start + step] - sensor
        c_dist = np.linalg.norm(c, axis=1)
        c_sq = np.maximum(c_dist ** 2, 1e-300)
        t = np.clip((c @ q.T) / c_sq[:, None], 0.0, 1.0)
        closest = t[:, :, None] * c[:, None, :]
        dist = np.linalg.norm(closest - q[None, :, :], axis=2)
        hit = (dist <= radius) & (c_dist[:, None] > q_dist[None, :])
        shadow[start:start + step] = hit.any(axis=1)
    return shadow


def accumulate(scans: Sequence[Tuple[PointCloud, Pose, Optional[np.ndarray]]], extent: SceneExtent,
               voxel_edge: float, dynamic_flags: Sequence[Optional[np.ndarray]] = None, rng=0,
               max_per_voxel: int = MAX_POINTS_PER_VOXEL) -> TargetSet:
    """
    Merge scans into one TargetSet of occupied targets plus empty / unseen voxel sets

    Args:
        scans: (cloud, pose, labels) per scan; labels are class ids or None (all unlabeled)
        extent: scene extent, also the voxel grid bounds
        voxel_edge: voxel edge in meters
        dynamic_flags: per-scan boolean arrays marking moving-object points (None = static)
        rng: seed or Generator for the per-voxel cap
        max_per_voxel: occupied targets retained per voxel

    Returns:
        TargetSet with SEMANTIC / OCCUPIED_UNLABELED targets and their sensor origins
    """
    if not scans:
        raise ArgumentError("accumulate needs at least one scan")
    if not voxel_edge > 0:
        raise ArgumentError(f"voxel edge must be > 0, got {voxel_edge}")
    rng = np.random.default_rng(rng)
    if dynamic_flags is None:
        dynamic_flags = [None] * len(scans)
    if len(dynamic_flags) != len(scans):
        raise ArgumentError(f"{len(dynamic_flags)} dynamic flag arrays for {len(scans)} scans")

    dims = extent.voxel_dims(voxel_edge)
    positions, labels, origins, traversed = [], [], [], []
    first_origin = None
    first_dynamic = np.zeros((0, 3))
    n_dynamic_dropped = 0

    for k, ((cloud, pose, scan_labels), flags) in enumerate(zip(scans, dynamic_flags)):
        world = pose.apply(cloud.points)
        origin = pose.apply(cloud.sensor_origin)
        n = len(world)
        scan_labels = np.full(n, UNLABELED) if scan_labels is None else np.asarray(scan_labels).reshape(n)
        flags = np.zeros(n, dtype=bool) if flags is None else np.asarray(flags, dtype=bool).reshape(n)

        if k == 0:
            first_origin = origin
            first_dynamic = world[flags]
        else:
            n_dynamic_dropped += int(flags.sum())

        traversed.append(traverse_rays(origin, world, extent.min_corner, voxel_edge, dims))

        keep = extent.contains(world) & (~flags if k else True)
        positions.append(world[keep])
        labels.append(scan_labels[keep])
        origins.append(np.broadcast_to(origin, (int(keep.sum()), 3)))

    positions = np.concatenate(positions)
    labels = np.concatenate(labels).astype(np.int64)
    origins = np.concatenate(origins)

    vox = np.floor((positions - extent.min_corner) / voxel_edge).astype(np.int64)
    vox = np.minimum(vox, dims - 1)
    flat = np.ravel_multi_index(tuple(vox.T), tuple(dims)) if len(vox) else np.zeros(0, dtype=np.int64)

    kept = _cap_per_voxel(flat, max_per_voxel, rng)
    n_capped = len(flat) - len(kept)
    positions, labels, origins, flat = positions[kept], labels[kept], origins[kept], flat[kept]

    occupied = np.unique(flat)
    traversed = np.unique(np.concatenate(traversed))
    empty = np.setdiff1d(traversed, occupied, assume_unique=True)

    # unseen wins over empty; occupied voxels are never candidates
    centers = extent.min_corner + (np.stack(np.unravel_index(empty, tuple(dims)), axis=1) + 0.5) * voxel_edge
    shadow = _shadow_mask(centers, first_origin, first_dynamic, voxel_edge * np.sqrt(3.0))
    unseen = empty[shadow]
    empty = empty[~shadow]

    kinds = np.where(labels >= 1, TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED)
    class_ids = np.where(labels >= 1, labels, -1)

    logger.debug("accumulated %d targets, %d empty / %d unseen voxels", len(positions), len(empty), len(unseen))
    return TargetSet(
        positions=positions,
        kinds=kinds,
        class_ids=class_ids,
        origins=origins,
        empty_voxels=_unflatten(empty, dims),
        unseen_voxels=_unflatten(unseen, dims),
        extent=extent,
        voxel_edge=float(voxel_edge),
        meta={"scans": len(scans), "capped_out": int(n_capped), "dynamic_dropped": n_dynamic_dropped},
    )


def _unflatten(flat_ids: np.ndarray, dims) -> np.ndarray:
    if not len(flat_ids):
        return np.zeros((0, 3), dtype=np.int64)
    return np.stack(np.unravel_index(np.sort(flat_ids), tuple(dims)), axis=1).astype(np.int64)


# ======================================================= #
# TargetSet container
# ======================================================= #
def save_target_set(path: str, targets: TargetSet) -> None:
    header = {
        "extent_min": targets.extent.min_corner.tolist(),
        "extent_max": targets.extent.max_corner.tolist(),
        "voxel_edge": targets.voxel_edge,
        "meta": targets.meta,
    }
    arrays = {
        "positions": targets.positions, "kinds": targets.kinds, "class_ids": targets.class_ids,
        "origins": targets.origins, "empty_voxels": targets.empty_voxels, "unseen_voxels": targets.unseen_voxels,
    }
    write_container(path, "target_set", header, arrays)


def load_target_set(path: str) -> TargetSet:
    _, header, arrays = read_container(path, "target_set")
    return TargetSet(
        positions=arrays["positions"], kinds=arrays["kinds"], class_ids=arrays["class_ids"],
        origins=arrays["origins"], empty_voxels=arrays["empty_voxels"], unseen_voxels=arrays["unseen_voxels"],
        extent=SceneExtent(header["extent_min"], header["extent_max"]),
        voxel_edge=float(header["voxel_edge"]), meta=dict(header.get("meta", {})),
    )
