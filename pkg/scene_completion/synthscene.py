"""
Synthetic Scenes
Parametric outdoor scenes with exact ground truth and a simulated LiDAR scanner
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .containers import read_container, write_container
from .errors import ArgumentError, GenerationError, GeometryError
from .geometry import Pose, SceneExtent
from .mapping import FREE, ClassMap, default_class_map
from .scene_io import PointCloud

logger = logging.getLogger(__name__)

GROUND = "ground-plane"
BOX = "box"
CYLINDER = "cylinder"
PRIMITIVE_KINDS = (GROUND, BOX, CYLINDER)

DEFAULT_SHELL = 0.05


@dataclass(frozen=True)
class ScenePrimitive:
    """
    One solid of a synthetic scene

    ground-plane: half-space below the local z = 0 plane, dimensions = xy size of the scene
    box:          centered at pose.translation, dimensions = full edge lengths (lx, ly, lz)
    cylinder:     axis along local z, centered at pose.translation, dimensions = (radius, height)
    """

    kind: str
    class_id: int
    pose: Pose
    dimensions: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        if self.kind not in PRIMITIVE_KINDS:
            raise ArgumentError(f"unknown primitive kind '{self.kind}'")
        if not self.dimensions or min(self.dimensions) <= 0:
            raise ArgumentError(f"{self.kind} dimensions must be strictly positive, got {self.dimensions}")
        if self.class_id < 1:
            raise ArgumentError(f"{self.kind} class id must be >= 1, got {self.class_id}")

    def footprint_radius(self) -> float:
        if self.kind == BOX:
            return 0.5 * float(np.hypot(self.dimensions[0], self.dimensions[1]))
        if self.kind == CYLINDER:
            return self.dimensions[0]
        return float("inf")

    def signed_distance(self, points) -> np.ndarray:
        """Signed distance (negative inside) of (n, 3) scene points"""
        q = self.pose.inverse_apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if self.kind == GROUND:
            return q[:, 2]
        if self.kind == BOX:
            d = np.abs(q) - 0.5 * np.asarray(self.dimensions)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            inside = np.minimum(d.max(axis=1), 0.0)
            return outside + inside
        radius, height = self.dimensions
        dr = np.hypot(q[:, 0], q[:, 1]) - radius
        dz = np.abs(q[:, 2]) - 0.5 * height
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return np.minimum(np.maximum(dr, dz), 0.0) + outside

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Nearest positive ray parameter per direction, inf on a miss"""
        o = self.pose.inverse_apply(origin[None, :])[0]
        d = directions @ self.pose.rotation
        if self.kind == GROUND:
            return _intersect_half_space(o, d)
        if self.kind == BOX:
            return _intersect_box(o, d, 0.5 * np.asarray(self.dimensions))
        return _intersect_cylinder(o, d, *self.dimensions)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "class_id": int(self.class_id), "dimensions": list(self.dimensions),
            "rotation": self.pose.rotation.tolist(), "translation": self.pose.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePrimitive":
        return cls(d["kind"], int(d["class_id"]), Pose(d["rotation"], d["translation"]), tuple(d["dimensions"]))


# ------------------------------------------------------------------------------------------------------------------------------ #
def _intersect_half_space(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
    return np.where((d[:, 2] < 0) & (t > 0), t, np.inf)


def _intersect_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = d == 0
    in_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(in_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(in_slab, np.inf, -np.inf), hi)

    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _intersect_cylinder(o, d, radius, height):
    half = 0.5 * height
    t_best = np.full(len(d), np.inf)

    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    c = o[0] ** 2 + o[1] ** 2 - radius ** 2
    disc = b ** 2 - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    z_side = o[2] + t_side * d[:, 2]
    side = (a > 0) & (disc >= 0) & (t_side > 0) & (np.abs(z_side) <= half)
    t_best = np.where(side, t_side, t_best)

    for cap in (-half, half):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = (cap - o[2]) / d[:, 2]
        x = o[0] + t_cap * d[:, 0]
        y = o[1] + t_cap * d[:, 1]
        ok = (d[:, 2] != 0) & (t_cap > 0) & (x ** 2 + y ** 2 <= radius ** 2)
        t_best = np.where(ok & (t_cap < t_best), t_cap, t_best)
    return t_best


# ======================================================= #
# Scenes
# ======================================================= #
@dataclass
class SyntheticScene:
    primitives: List[ScenePrimitive]
    extent: SceneExtent
    seed: int = 0

    def __post_init__(self):
        ground = [p for p in self.primitives if p.kind == GROUND]
        if len(ground) != 1:
            raise ArgumentError(f"a scene needs exactly one ground plane, found {len(ground)}")

    @property
    def objects(self) -> List[ScenePrimitive]:
        return [p for p in self.primitives if p.kind != GROUND]


@dataclass(frozen=True)
class SceneSpec:
    """Density parameters of a generated scene"""

    n_boxes: int = 5
    n_cylinders: int = 3
    n_strips: int = 0
    extent_min: Tuple[float, float, float] = (-10.0, -10.0, -1.0)
    extent_max: Tuple[float, float, float] = (10.0, 10.0, 5.0)
    ground_height: float = 0.0
    box_size: Tuple[float, float] = (1.5, 4.5)
    box_height: Tuple[float, float] = (1.5, 3.5)
    cylinder_radius: Tuple[float, float] = (0.15, 0.5)
    cylinder_height: Tuple[float, float] = (2.0, 4.0)
    strip_width: float = 2.0
    strip_height: float = 0.15
    gap: float = 0.5
    sensor_clearance: float = 2.5
    max_retries: int = 200
    ground_class: str = "road"
    strip_class: str = "sidewalk"
    box_classes: Tuple[str, ...] = ("car", "building", "truck")
    cylinder_classes: Tuple[str, ...] = ("pole", "trunk")

    def __post_init__(self):
        for name in ("n_boxes", "n_cylinders", "n_strips"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"scene spec {name} must be >= 0")
        if self.max_retries < 1:
            raise ArgumentError("scene spec max_retries must be >= 1")

    @property
    def extent(self) -> SceneExtent:
        return SceneExtent(self.extent_min, self.extent_max)


def generate_scene(seed: int, spec: SceneSpec = None, class_map: ClassMap = None) -> SyntheticScene:
    """
    Random non-overlapping boxes, cylinders and sidewalk strips on one ground plane

    Objects keep a footprint gap to each other and a clearance around the xy origin
    (the default sensor position). Ground is listed last so objects win ties.
    """
    spec = spec or SceneSpec()
    class_map = class_map or default_class_map()
    rng = np.random.default_rng(seed)
    extent = spec.extent
    lo, hi = extent.min_corner, extent.max_corner
    z0 = spec.ground_height

    primitives: List[ScenePrimitive] = []
    placed: List[Tuple[np.ndarray, float]] = []   # (xy center, footprint radius) of round-ish objects
    strips: List[Tuple[float, float]] = []        # (x center, half width)

    def clear_of_strips(xy, radius):
        return all(abs(xy[0] - sx) > hw + radius + spec.gap for sx, hw in strips)

    def clear_of_objects(xy, radius):
        return all(np.linalg.norm(xy - c) > r + radius + spec.gap for c, r in placed)

    for i in range(spec.n_strips):
        half_width = 0.5 * spec.strip_width
        for _ in range(spec.max_retries):
            x = rng.uniform(lo[0] + half_width, hi[0] - half_width)
            if abs(x) > half_width + spec.gap and all(abs(x - sx) > hw + half_width + spec.gap for sx, hw in strips):
                break
        else:
            raise GenerationError(f"could not place sidewalk strip {i + 1} after {spec.max_retries} retries")
        strips.append((x, half_width))
        dims = (spec.strip_width, float(hi[1] - lo[1]), spec.strip_height)
        pose = Pose(np.eye(3), (x, 0.5 * (lo[1] + hi[1]), z0 + 0.5 * spec.strip_height))
        primitives.append(ScenePrimitive(BOX, class_map.class_id(spec.strip_class), pose, dims))

    def place(kind, count, draw):
        for i in range(count):
            for _ in range(spec.max_retries):
                dims, radius, class_name, yaw = draw()
                xy = rng.uniform(lo[:2] + radius, hi[:2] - radius)
                if np.linalg.norm(xy) <= radius + spec.sensor_clearance:
                    continue
                if clear_of_objects(xy, radius) and clear_of_strips(xy, radius):
                    break
            else:
                raise GenerationError(f"could not place {kind} {i + 1} of {count} after {spec.max_retries} retries")
            height = dims[2] if kind == BOX else dims[1]
            pose = Pose.from_yaw(yaw, (xy[0], xy[1], z0 + 0.5 * height))
            primitives.append(ScenePrimitive(kind, class_map.class_id(class_name), pose, dims))
            placed.append((xy, radius))

    def draw_box():
        lx, ly = rng.uniform(*spec.box_size, size=2)
        lz = rng.uniform(*spec.box_height)
        name = spec.box_classes[rng.integers(len(spec.box_classes))]
        return (lx, ly, lz), 0.5 * float(np.hypot(lx, ly)), name, rng.uniform(-np.pi, np.pi)

    def draw_cylinder():
        r = rng.uniform(*spec.cylinder_radius)
        h = rng.uniform(*spec.cylinder_height)
        name = spec.cylinder_classes[rng.integers(len(spec.cylinder_classes))]
        return (r, h), r, name, 0.0

    place(BOX, spec.n_boxes, draw_box)
    place(CYLINDER, spec.n_cylinders, draw_cylinder)

    too_tall = [p for p in primitives if p.pose.translation[2] + 0.5 * _height(p) > hi[2]]
    if too_tall:
        raise GenerationError(f"{len(too_tall)} object(s) taller than the scene extent")

    ground_dims = (float(hi[0] - lo[0]), float(hi[1] - lo[1]))
    primitives.append(ScenePrimitive(GROUND, class_map.class_id(spec.ground_class),
                                     Pose(np.eye(3), (0.0, 0.0, z0)), ground_dims))
    return SyntheticScene(primitives, extent, int(seed))


def _height(p: ScenePrimitive) -> float:
    return p.dimensions[2] if p.kind == BOX else p.dimensions[1]


# ======================================================= #
# LiDAR simulation
# ======================================================= #
def scan_directions(angular_grid: Tuple[int, int], azimuth_range=(-np.pi, np.pi),
                    elevation_range=(np.radians(-25.0), np.radians(3.0))) -> np.ndarray:
    """
    Unit ray directions in the sensor frame, azimuth-major

    Azimuths split [start, end) evenly; elevations span [start, end] inclusive.
    A count of 1 uses the range start.
    """
    n_az, n_el = (int(c) for c in angular_grid)
    if n_az < 1 or n_el < 1:
        raise ArgumentError(f"angular counts must be >= 1, got {angular_grid}")
    az = azimuth_range[0] + np.arange(n_az) * (azimuth_range[1] - azimuth_range[0]) / n_az
    el = elevation_range[0] + (np.arange(n_el) * (elevation_range[1] - elevation_range[0]) / (n_el - 1)
                               if n_el > 1 else np.zeros(1))
    az, el = np.meshgrid(az, el, indexing="ij")
    az, el = az.reshape(-1), el.reshape(-1)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


def cast_rays(scene: SyntheticScene, origin, directions, max_range: float = np.inf):
    """Nearest hit per ray; returns (points, class_ids, hit_mask)"""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)

    t = np.stack([p.intersect(origin, directions) for p in scene.primitives], axis=1)
    nearest = np.argmin(t, axis=1)
    t_hit = t[np.arange(len(t)), nearest]
    hit = np.isfinite(t_hit) & (t_hit <= max_range)

    class_ids = np.array([p.class_id for p in scene.primitives])[nearest[hit]]
    return origin + t_hit[hit, None] * directions[hit], class_ids, hit


def class_reflectivity(class_ids) -> np.ndarray:
    """Per-class constant reflectivity in [0.1, 0.9]"""
    return 0.1 + 0.8 * ((np.asarray(class_ids) * 37) % 100) / 100.0


def simulate_labeled_scan(scene: SyntheticScene, sensor_pose: Pose, angular_grid=(720, 32),
                          azimuth_range=(-np.pi, np.pi), elevation_range=(np.radians(-25.0), np.radians(3.0)),
                          max_range: float = 100.0) -> Tuple[PointCloud, np.ndarray]:
    """Simulated scan in the scene frame plus the class id of every return"""
    origin = sensor_pose.translation
    inside = [p for p in scene.primitives if p.signed_distance(origin[None, :])[0] < 0]
    if inside:
        raise GeometryError(f"sensor at {origin.tolist()} lies inside a {inside[0].kind} primitive")

    directions = scan_directions(angular_grid, azimuth_range, elevation_range) @ sensor_pose.rotation.T
    points, class_ids, _ = cast_rays(scene, origin, directions, max_range)
    cloud = PointCloud(points, class_reflectivity(class_ids), origin)
    logger.debug("simulated %d returns from %d rays", len(points), len(directions))
    return cloud, class_ids


def simulate_scan(scene: SyntheticScene, sensor_pose: Pose, angular_grid=(720, 32), **kwargs) -> PointCloud:
    return simulate_labeled_scan(scene, sensor_pose, angular_grid, **kwargs)[0]


# ======================================================= #
# Ground truth
# ======================================================= #
def ground_truth_classes(scene: SyntheticScene, points, shell: float = DEFAULT_SHELL) -> np.ndarray:
    """Class of the first primitive within `shell` of each point, FREE elsewhere"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.full(len(points), FREE, dtype=np.int64)
    for primitive in reversed(scene.primitives):
        inside = primitive.signed_distance(points) <= shell
        labels[inside] = primitive.class_id
    return labels


def ground_truth_class(scene: SyntheticScene, p, shell: float = DEFAULT_SHELL) -> int:
    return int(ground_truth_classes(scene, np.reshape(p, (1, 3)), shell)[0])


def ground_truth_voxels(scene: SyntheticScene, origin=None, edge: float = 0.2, dims=None,
                        shell: float = 0.0):
    """Analytic voxel grid: class at every voxel center (defaults cover the scene extent)"""
    from .extraction import VoxelGrid

    origin = scene.extent.min_corner if origin is None else np.asarray(origin, dtype=np.float64)
    dims = scene.extent.voxel_dims(edge) if dims is None else np.asarray(dims, dtype=np.int64)
    axes = [origin[i] + (np.arange(dims[i]) + 0.5) * edge for i in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    labels = ground_truth_classes(scene, centers, shell).reshape(tuple(dims))
    return VoxelGrid(origin=origin, edge=edge, dims=tuple(int(d) for d in dims), labels=labels)


# ======================================================= #
# Serialization
# ======================================================= #
def save_scene(path: str, scene: SyntheticScene) -> None:
    header = {
        "seed": scene.seed,
        "extent_min": scene.extent.min_corner.tolist(),
        "extent_max": scene.extent.max_corner.tolist(),
        "primitives": [p.to_dict() for p in scene.primitives],
    }
    write_container(path, "synthetic_scene", header, {})


def load_scene(path: str) -> SyntheticScene:
    _, header, _ = read_container(path, "synthetic_scene")
    primitives = [ScenePrimitive.from_dict(d) for d in header["primitives"]]
    return SyntheticScene(primitives, SceneExtent(header["extent_min"], header["extent_max"]), int(header["seed"]))
