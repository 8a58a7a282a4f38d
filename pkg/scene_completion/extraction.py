"""
Extraction
Discrete artifacts of the continuous field: semantic voxel grids, isosurface meshes and ground images
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import Delaunay, QhullError

from .containers import read_container, write_container
from .errors import ArgumentError, ExtractionError, OutOfDomainError
from .field import as_field
from .mapping import FREE, VOID, ClassMap
from .marching_cubes import march_cells, straddles

logger = logging.getLogger(__name__)

GRADIENT_EPS = 1e-9
FIXED_POINT_EPS = 1e-9


# ======================================================= #
# Types
# ======================================================= #
@dataclass
class VoxelGrid:
    """Regular voxel grid with one class id (or FREE) per voxel"""

    origin: np.ndarray
    edge: float
    dims: Tuple[int, int, int]
    labels: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ArgumentError(f"voxel grid dims must be three positive integers, got {self.dims}")
        if not self.edge > 0:
            raise ArgumentError(f"voxel edge must be > 0, got {self.edge}")
        if self.labels is None:
            self.labels = np.full(self.dims, FREE, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != self.dims:
            raise ArgumentError(f"labels of shape {self.labels.shape} for a grid of dims {self.dims}")
        if np.any(self.labels < FREE):
            raise ArgumentError("voxel labels must be FREE (0) or a class id")

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != FREE

    def corner_points(self) -> np.ndarray:
        """All (nx+1)(ny+1)(nz+1) voxel corners, x-major"""
        axes = [self.origin[i] + np.arange(self.dims[i] + 1) * self.edge for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def centers(self) -> np.ndarray:
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.edge for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def same_spec(self, other: "VoxelGrid") -> bool:
        return (self.dims == other.dims and np.isclose(self.edge, other.edge)
                and np.allclose(self.origin, other.origin))

    def with_labels(self, labels) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.edge, self.dims, labels)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_class: np.ndarray = None
    meta: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.face_class is None:
            self.face_class = np.zeros(len(self.faces), dtype=np.int64)
        self.face_class = np.asarray(self.face_class, dtype=np.int64)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ArgumentError("face index out of range")
        if len(self.face_class) != len(self.faces):
            raise ArgumentError("one class per face required")

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class GroundImage:
    """Top-down class image; row r, column c covers y = origin_y + (r + 0.5) * cell, x = origin_x + (c + 0.5) * cell"""

    labels: np.ndarray
    heights: np.ndarray
    origin: np.ndarray
    cell: float

    def pixel_centers(self) -> np.ndarray:
        ny, nx = self.labels.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.cell
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([gx, gy], axis=-1)


# ======================================================= #
# Field evaluation
# ======================================================= #
def _require_domain(field_, points: np.ndarray, what: str):
    inside = field_.in_domain(points)
    if not np.all(inside):
        hint = field_.domain_hint()
        raise OutOfDomainError(
            f"{int((~inside).sum())} {what} lie outside the latent grid; inset the extraction grid"
            + (f": {hint}" if hint else "")
        )


def corner_probabilities(source, origin, edge: float, dims) -> np.ndarray:
    """Probabilities at every voxel corner (each shared corner evaluated once), shape (nx+1, ny+1, nz+1, N+1)"""
    f = as_field(source)
    grid = VoxelGrid(origin, edge, dims)
    corners = grid.corner_points()
    _require_domain(f, corners, "voxel corners")
    probs = f.probabilities(corners)
    return probs.reshape(tuple(d + 1 for d in grid.dims) + (probs.shape[-1],))


def labels_from_corners(corner_probs: np.ndarray, theta_empty: float) -> np.ndarray:
    """
    Voxel labels from corner probabilities

    A corner is occupied when its free-space probability is below theta_empty; a voxel with at least one
    occupied corner takes the semantic argmax of the mean of its occupied corners' probability vectors.
    """
    if not 0.0 < theta_empty < 1.0:
        raise ArgumentError(f"theta_empty must be in (0, 1), got {theta_empty}")
    nx, ny, nz = (s - 1 for s in corner_probs.shape[:3])
    occupied = corner_probs[..., -1] < theta_empty
    semantic = np.where(occupied[..., None], corner_probs[..., :-1], 0.0)

    total = np.zeros((nx, ny, nz, semantic.shape[-1]))
    count = np.zeros((nx, ny, nz), dtype=np.int64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                total += semantic[dx:dx + nx, dy:dy + ny, dz:dz + nz]
                count += occupied[dx:dx + nx, dy:dy + ny, dz:dz + nz]

    labels = np.full((nx, ny, nz), FREE, dtype=np.int64)
    hit = count > 0
    labels[hit] = np.argmax(total[hit] / count[hit][:, None], axis=1) + 1
    return labels


def voxelize(source, origin, edge: float, dims, theta_empty: float = 0.04) -> VoxelGrid:
    """Semantic voxel grid of a checkpoint (or any completion field)"""
    probs = corner_probabilities(source, origin, edge, dims)
    grid = VoxelGrid(origin, edge, dims, labels_from_corners(probs, theta_empty))
    logger.info("voxelized %s grid: %d occupied voxels", grid.dims, int(grid.occupied.sum()))
    return grid


# ======================================================= #
# Isosurface
# ======================================================= #
def _lattice(lo, hi, final_res):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    final_res = np.broadcast_to(np.asarray(final_res, dtype=np.int64), (3,)).copy()
    if np.any(final_res < 1) or np.any(hi <= lo):
        raise ArgumentError("extraction box must be non-empty with at least one cell per axis")
    return lo, (hi - lo) / final_res, final_res


def _evaluate_lattice(f, values, lo, spacing, indices):
    """Fill the free-space probability at lattice indices that are still unevaluated"""
    if not len(indices):
        return 0
    indices = np.unique(indices, axis=0)
    todo = np.isnan(values[indices[:, 0], indices[:, 1], indices[:, 2]])
    indices = indices[todo]
    if not len(indices):
        return 0
    points = lo + indices * spacing
    _require_domain(f, points, "lattice points")
    values[indices[:, 0], indices[:, 1], indices[:, 2]] = f.free_probability(points)
    return len(indices)


def _cell_corners(cells: np.ndarray, size: int) -> np.ndarray:
    offsets = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)]) * size
    return cells[:, None, :] + offsets[None]


def _with_neighbors(cells: np.ndarray, size: int, final_res: np.ndarray) -> np.ndarray:
    """Cells plus their 26 same-size neighbors inside the lattice"""
    ring = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), axis=-1).reshape(-1, 3) * size
    grown = (cells[:, None, :] + ring[None]).reshape(-1, 3)
    inside = np.all((grown >= 0) & (grown <= final_res - size), axis=1)
    return np.unique(grown[inside], axis=0)


def mise_mesh(source, lo, hi, theta_free: float = 0.3, coarse_res=16, final_res=64) -> TriMesh:
    """
    Multiresolution isosurface extraction of the theta_free level set of the free-space probability

    Starting from a coarse lattice, only cells whose corners straddle theta_free (and their direct
    neighbors) are subdivided, one octree level per halving, until final_res; marching cubes then runs
    on the active final cells.

    Args:
        source: checkpoint or completion field
        lo, hi: extraction box corners
        theta_free: free-space probability of the surface
        coarse_res: cells per axis of the starting lattice (int or 3 ints)
        final_res: cells per axis at the finest level, coarse_res * 2**levels

    Returns:
        TriMesh with meta["evaluations"] (points evaluated) and meta["dense_evaluations"]
    """
    if not 0.0 < theta_free < 1.0:
        raise ArgumentError(f"theta_free must be in (0, 1), got {theta_free}")
    f = as_field(source)
    lo, spacing, final_res = _lattice(lo, hi, final_res)
    coarse_res = np.broadcast_to(np.asarray(coarse_res, dtype=np.int64), (3,))
    ratio = final_res // np.maximum(coarse_res, 1)
    if np.any(coarse_res < 1) or np.any(coarse_res * ratio != final_res) or len(set(ratio.tolist())) != 1:
        raise ArgumentError(f"final_res {final_res.tolist()} must be one power-of-two refinement of {coarse_res.tolist()}")
    size = int(ratio[0])
    if size & (size - 1):
        raise ArgumentError(f"refinement factor {size} is not a power of two")

    values = np.full(tuple(final_res + 1), np.nan)
    coarse = np.stack(np.meshgrid(*[np.arange(n + 1) * size for n in coarse_res], indexing="ij"),
                      axis=-1).reshape(-1, 3)
    evaluations = _evaluate_lattice(f, values, lo, spacing, coarse)

    cells = np.stack(np.meshgrid(*[np.arange(n) * size for n in coarse_res], indexing="ij"), axis=-1).reshape(-1, 3)
    while True:
        corners = _cell_corners(cells, size)
        active = straddles(values[corners[..., 0], corners[..., 1], corners[..., 2]], theta_free)
        cells = cells[active]
        if size == 1 or not len(cells):
            break
        cells = _with_neighbors(cells, size, final_res)
        size //= 2
        children = _cell_corners(cells, size).reshape(-1, 3)
        evaluations += _evaluate_lattice(f, values, lo, spacing, _cell_corners(children, size).reshape(-1, 3))
        cells = np.unique(children, axis=0)
        logger.debug("mise level with cell size %d: %d candidate cells", size, len(cells))

    if size != 1:
        cells = np.zeros((0, 3), dtype=np.int64)
    vertices, faces = march_cells(values, theta_free, lo, spacing, cells)
    dense = int(np.prod(final_res + 1))
    logger.info("mise: %d faces, %d of %d lattice points evaluated", len(faces), evaluations, dense)
    return TriMesh(vertices, faces, meta={"evaluations": int(evaluations), "dense_evaluations": dense})


def dense_mesh(source, lo, hi, theta_free: float = 0.3, final_res=64) -> TriMesh:
    """Marching cubes over every cell of the full lattice"""
    if not 0.0 < theta_free < 1.0:
        raise ArgumentError(f"theta_free must be in (0, 1), got {theta_free}")
    f = as_field(source)
    lo, spacing, final_res = _lattice(lo, hi, final_res)
    index = np.stack(np.meshgrid(*[np.arange(n + 1) for n in final_res], indexing="ij"), axis=-1).reshape(-1, 3)
    points = lo + index * spacing
    _require_domain(f, points, "lattice points")
    values = f.free_probability(points).reshape(tuple(final_res + 1))
    vertices, faces = march_cells(values, theta_free, lo, spacing)
    count = int(np.prod(final_res + 1))
    return TriMesh(vertices, faces, meta={"evaluations": count, "dense_evaluations": count})


def refine_and_color(source, mesh: TriMesh, theta_free: float = 0.3, iters: int = 3, step: float = 1.0) -> TriMesh:
    """
    Pull vertices onto the theta_free level set, then color faces by their centroid class

    Each iteration moves v by -step * (f_free(v) - theta) * g / |g|^2 with g the exact gradient of the
    free-space probability. Vertices with |g| below 1e-9 or already on the level set stay put, as do
    moves that would leave the field's domain.
    """
    f = as_field(source)
    vertices = mesh.vertices.copy()
    faces = mesh.faces.copy()
    meta = dict(mesh.meta)

    if len(vertices):
        for _ in range(max(int(iters), 0)):
            free, grad = f.free_probability_and_gradient(vertices)
            residual = free - theta_free
            norm2 = np.einsum("ij,ij->i", grad, grad)
            move = (norm2 >= GRADIENT_EPS ** 2) & (np.abs(residual) >= FIXED_POINT_EPS)
            candidate = vertices.copy()
            candidate[move] -= step * (residual[move] / norm2[move])[:, None] * grad[move]
            keep = f.in_domain(candidate)
            vertices[keep] = candidate[keep]
        meta["refined_iters"] = int(iters)

    face_class = np.zeros(len(faces), dtype=np.int64)
    if len(faces):
        centroids = vertices[faces].mean(axis=1)
        _require_domain(f, centroids, "face centroids")
        probs = f.probabilities(centroids)
        face_class = np.argmax(probs[:, :-1], axis=1) + 1
    return TriMesh(vertices, faces, face_class, meta)


# ======================================================= #
# Ground image
# ======================================================= #
def segment_points(source, points) -> np.ndarray:
    """Argmax over the non-free classes at each point (1..N)"""
    f = as_field(source)
    return np.argmax(f.probabilities(points)[:, :-1], axis=1) + 1


def ground_image(source, points, ground_classes: Sequence[int], cell: float = 0.2,
                 bounds: Tuple[Sequence[float], Sequence[float]] = None) -> GroundImage:
    """
    Top-down image of the ground classes

    Input points predicted as a ground class are triangulated in xy; every pixel inside the triangulation
    gets its height by linear interpolation and the argmax over the ground classes at (x, y, height).
    Pixels outside the hull are VOID.

    Args:
        source: checkpoint or completion field
        points: (n, 3) input cloud (points outside the field's domain are ignored)
        ground_classes: class ids counted as ground
        cell: pixel edge in meters
        bounds: ((x0, y0), (x1, y1)) image window, defaults to the ground points' bounding box
    """
    f = as_field(source)
    if not cell > 0:
        raise ArgumentError(f"ground image cell must be > 0, got {cell}")
    ground_classes = np.asarray(sorted(set(int(c) for c in ground_classes)), dtype=np.int64)
    if not len(ground_classes):
        raise ArgumentError("at least one ground class is required")

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    points = points[f.in_domain(points)]
    ground = points[np.isin(segment_points(f, points), ground_classes)] if len(points) else points
    if len(ground) < 3:
        raise ExtractionError(f"only {len(ground)} ground points predicted, at least 3 are needed")
    try:
        triangulation = Delaunay(ground[:, :2])
    except QhullError as e:
        raise ExtractionError(f"ground points cannot be triangulated (collinear or duplicate): {e}") from None
    surface = LinearNDInterpolator(triangulation, ground[:, 2])

    if bounds is None:
        lo_xy, hi_xy = ground[:, :2].min(axis=0), ground[:, :2].max(axis=0)
    else:
        lo_xy, hi_xy = (np.asarray(b, dtype=np.float64) for b in bounds)
    nx, ny = np.maximum(np.ceil((hi_xy - lo_xy) / cell - 1e-9).astype(int), 1)

    image = GroundImage(np.full((ny, nx), VOID, dtype=np.int64), np.full((ny, nx), np.nan), lo_xy, cell)
    xy = image.pixel_centers().reshape(-1, 2)
    heights = surface(xy)
    queries = np.column_stack([xy, heights])
    inside = np.isfinite(heights)
    inside[inside] &= f.in_domain(queries[inside])

    labels = np.full(len(xy), VOID, dtype=np.int64)
    if np.any(inside):
        probs = f.probabilities(queries[inside])
        labels[inside] = ground_classes[np.argmax(probs[:, ground_classes - 1], axis=1)]
    image.labels = labels.reshape(ny, nx)
    image.heights = np.where(inside, heights, np.nan).reshape(ny, nx)
    logger.info("ground image %dx%d from %d ground points, %d void pixels", nx, ny, len(ground), int((~inside).sum()))
    return image


# ======================================================= #
# Writers
# ======================================================= #
def write_ply(path: str, mesh: TriMesh, class_map: ClassMap = None) -> None:
    """ASCII PLY with per-face class id and palette color"""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "property int class_id",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    for face, class_id in zip(mesh.faces, mesh.face_class):
        r, g, b = class_map.color(int(class_id)) if class_map else (200, 200, 200)
        lines.append(f"3 {face[0]} {face[1]} {face[2]} {int(class_id)} {r} {g} {b}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def save_voxel_grid(path: str, grid: VoxelGrid) -> None:
    header = {"origin": grid.origin.tolist(), "edge": float(grid.edge), "dims": list(grid.dims)}
    write_container(path, "voxel_grid", header, {"labels": grid.labels.astype(np.int32)})


def load_voxel_grid(path: str) -> VoxelGrid:
    _, header, arrays = read_container(path, "voxel_grid")
    return VoxelGrid(header["origin"], float(header["edge"]), tuple(header["dims"]), arrays["labels"])


def voxel_summary(grid: VoxelGrid, class_map: ClassMap = None) -> pd.DataFrame:
    """Voxel count and fraction per label present in the grid"""
    ids, counts = np.unique(grid.labels, return_counts=True)

    def name(class_id):
        if class_id == FREE:
            return "free"
        if class_map and class_id <= class_map.n_classes:
            return class_map.names[class_id - 1]
        return f"class-{class_id}"

    return pd.DataFrame({
        "class_id": ids.astype(int),
        "name": [name(int(i)) for i in ids],
        "voxels": counts.astype(int),
        "fraction": counts / grid.labels.size,
    })


def write_ground_image(path: str, image: GroundImage, class_map: ClassMap = None) -> str:
    """Binary PPM (north up) plus `<name>_palette.csv`; returns the palette path"""
    ny, nx = image.labels.shape
    ids = np.unique(image.labels)
    colors = {int(i): ((0, 0, 0) if i == VOID else (class_map.color(int(i)) if class_map else (128, 128, 128)))
              for i in ids}
    rgb = np.zeros((ny, nx, 3), dtype=np.uint8)
    for class_id, color in colors.items():
        rgb[image.labels == class_id] = color
    with open(path, "wb") as f:
        f.write(f"P6\n{nx} {ny}\n255\n".encode("ascii"))
        f.write(rgb[::-1].tobytes())

    names = {VOID: "void"}
    if class_map:
        names.update({i: class_map.names[i - 1] for i in colors if 1 <= i <= class_map.n_classes})
    palette = pd.DataFrame(
        [(i, names.get(i, f"class-{i}"), *colors[i], int((image.labels == i).sum())) for i in sorted(colors)],
        columns=["class_id", "name", "r", "g", "b", "pixels"],
    )
    palette_path = os.path.splitext(path)[0] + "_palette.csv"
    palette.to_csv(palette_path, index=False)
    return palette_path
