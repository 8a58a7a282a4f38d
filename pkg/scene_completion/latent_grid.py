"""
Latent Grid
Multi-resolution 2D grid of conditioning vectors, bilinear support regions and cell-relative coordinates

Level 0 is the coarsest grid (ratio 16, vectors c1), level 2 the finest (ratio 1, vectors c3).
Cell (i, j) of a level with ratio r covers x in origin_x + [i, i+1) * r * delta and
y in origin_y + [j, j+1) * r * delta; its center has z = 0.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .containers import read_container, write_container
from .errors import ArgumentError, InvariantViolation, OutOfDomainError

N_LEVELS = 3

# Neighbor offsets of the four supports, in support order
SUPPORT_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)


@dataclass(frozen=True)
class GridConfig:
    """Geometry of the latent grid"""

    delta: float = 0.32
    ratios: Tuple[int, int, int] = (16, 4, 1)
    origin: Tuple[float, float] = (0.0, 0.0)
    cells: Tuple[int, int] = (64, 64)
    feature_dims: Tuple[int, int, int] = (256, 256, 128)

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))

        if not self.delta > 0:
            raise ArgumentError(f"grid delta must be > 0, got {self.delta}")
        if len(self.ratios) != N_LEVELS or len(self.feature_dims) != N_LEVELS:
            raise ArgumentError("grid needs exactly three resolution levels")
        if self.ratios[-1] != 1 or list(self.ratios) != sorted(self.ratios, reverse=True):
            raise ArgumentError(f"ratios must be descending and end at 1, got {self.ratios}")
        if any(d <= 0 for d in self.feature_dims):
            raise ArgumentError(f"feature dims must be positive, got {self.feature_dims}")
        coarsest = self.ratios[0]
        if any(c < 2 or c % coarsest for c in self.cells):
            raise ArgumentError(f"grid cells {self.cells} must be positive multiples of {coarsest}")

    @classmethod
    def for_extent(cls, extent, delta: float = 0.32, feature_dims=(256, 256, 128), ratios=(16, 4, 1)) -> "GridConfig":
        """Smallest grid whose inset footprint covers the xy-extent, centered on it"""
        block = ratios[0] * delta
        span = np.asarray(extent.size[:2], dtype=np.float64) + delta
        cells = (np.ceil(span / block - 1e-9).astype(int) * ratios[0]).tolist()
        origin = np.asarray(extent.center[:2]) - 0.5 * np.asarray(cells) * delta
        return cls(delta=delta, ratios=tuple(ratios), origin=tuple(origin.tolist()),
                   cells=tuple(cells), feature_dims=tuple(feature_dims))

    def level_shape(self, level: int) -> Tuple[int, int]:
        r = self.ratios[level]
        return self.cells[0] // r, self.cells[1] // r

    def level_edge(self, level: int) -> float:
        return self.ratios[level] * self.delta

    def footprint(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.cells) * self.delta

    def in_domain(self, points) -> np.ndarray:
        """xy inside the footprint inset by delta/2 (the bilinear domain)"""
        xy = np.asarray(points, dtype=np.float64).reshape(-1, 3)[:, :2]
        lo, hi = self.footprint()
        inset = 0.5 * self.delta
        return np.all((xy >= lo + inset) & (xy <= hi - inset), axis=1)

    def to_dict(self) -> Dict:
        return {
            "delta": self.delta, "ratios": list(self.ratios), "origin": list(self.origin),
            "cells": list(self.cells), "feature_dims": list(self.feature_dims),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "GridConfig":
        return cls(delta=float(d["delta"]), ratios=tuple(d["ratios"]), origin=tuple(d["origin"]),
                   cells=tuple(d["cells"]), feature_dims=tuple(d["feature_dims"]))


@dataclass
class SupportRegion:
    """
    Support regions of n query points (S supports each)

    indices:      (n, S, 3, 2) cell index of every level per support
    rel:          (n, S, 3, 3) query minus cell center per level
    weights:      (n, S) bilinear weights
    weight_grads: (n, S, 2) d weight / d (x, y)
    """

    indices: np.ndarray
    rel: np.ndarray
    weights: np.ndarray
    weight_grads: np.ndarray

    @property
    def n_supports(self) -> int:
        return self.weights.shape[1]

    def __len__(self):
        return self.weights.shape[0]

    def take(self, rows) -> "SupportRegion":
        return SupportRegion(self.indices[rows], self.rel[rows], self.weights[rows], self.weight_grads[rows])

    def select_supports(self, chosen: np.ndarray, scale: float = 1.0) -> "SupportRegion":
        """Keep the supports chosen[r] of every row r, weights multiplied by scale"""
        rows = np.arange(len(self))[:, None]
        return SupportRegion(
            self.indices[rows, chosen],
            self.rel[rows, chosen],
            self.weights[rows, chosen] * scale,
            self.weight_grads[rows, chosen] * scale,
        )


# ======================================================= #
# Support region selection
# ======================================================= #
def support_regions(points, config: GridConfig) -> SupportRegion:
    """Four bilinear supports and per-level relative coordinates for every query point"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ArgumentError("query points must be finite")

    inside = config.in_domain(pts)
    if not np.all(inside):
        bad = pts[~inside][0]
        raise OutOfDomainError(
            f"{int((~inside).sum())} query point(s) outside the grid footprint inset by delta/2, "
            f"first at {bad.tolist()}"
        )

    origin = np.asarray(config.origin)
    cells = np.asarray(config.cells)
    delta = config.delta
    xy = pts[:, :2]
    n = len(pts)

    # continuous index relative to the finest cell centers
    u = (xy - origin) / delta - 0.5
    base = np.clip(np.floor(u).astype(np.int64), 0, cells - 2)
    frac = u - base
    fx, fy = frac[:, 0], frac[:, 1]

    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    dwdx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=1) / delta
    dwdy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=1) / delta
    weight_grads = np.stack([dwdx, dwdy], axis=2)

    n_sup = len(SUPPORT_OFFSETS)
    indices = np.empty((n, n_sup, N_LEVELS, 2), dtype=np.int64)
    rel = np.empty((n, n_sup, N_LEVELS, 3), dtype=np.float64)
    for level, ratio in enumerate(config.ratios):
        edge = ratio * delta
        if ratio == 1:
            idx = base[:, None, :] + SUPPORT_OFFSETS[None, :, :]
        else:
            shape = np.asarray(config.level_shape(level))
            own = np.clip(np.floor((xy - origin) / edge).astype(np.int64), 0, shape - 1)
            idx = np.broadcast_to(own[:, None, :], (n, n_sup, 2))
        centers = origin + (idx + 0.5) * edge
        indices[:, :, level] = idx
        rel[:, :, level, :2] = xy[:, None, :] - centers
        rel[:, :, level, 2] = pts[:, None, 2]

    return SupportRegion(indices=indices, rel=rel, weights=weights, weight_grads=weight_grads)


def support_region(p, config: GridConfig) -> SupportRegion:
    """Support region of a single query point (n = 1)"""
    return support_regions(np.asarray(p, dtype=np.float64).reshape(1, 3), config)


# ======================================================= #
# Latent grid storage
# ======================================================= #
@dataclass
class LatentGrid:
    """Three levels of conditioning vectors, shapes (rows_l, cols_l, d_l)"""

    levels: List[np.ndarray]
    config: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        self.levels = [np.asarray(level, dtype=np.float64) for level in self.levels]
        if len(self.levels) != N_LEVELS:
            raise ArgumentError("latent grid needs three levels")
        for level, array in enumerate(self.levels):
            expected = self.config.level_shape(level) + (self.config.feature_dims[level],)
            if array.shape != expected:
                raise ArgumentError(f"level {level} has shape {array.shape}, expected {expected}")
            if not np.all(np.isfinite(array)):
                raise ArgumentError(f"level {level} contains non-finite entries")

    @classmethod
    def initialize(cls, config: GridConfig, rng, std: float = 0.01) -> "LatentGrid":
        rng = np.random.default_rng(rng)
        levels = [
            rng.normal(0.0, std, size=config.level_shape(level) + (config.feature_dims[level],))
            for level in range(N_LEVELS)
        ]
        return cls(levels, config)

    @classmethod
    def zeros(cls, config: GridConfig) -> "LatentGrid":
        return cls([np.zeros(config.level_shape(l) + (config.feature_dims[l],)) for l in range(N_LEVELS)], config)

    def copy(self) -> "LatentGrid":
        return LatentGrid([level.copy() for level in self.levels], self.config)

    def flat_index(self, level: int, idx: np.ndarray) -> np.ndarray:
        """Row-major cell number of (…, 2) indices on one level"""
        rows, cols = self.config.level_shape(level)
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or np.any(idx[..., 0] >= rows) or np.any(idx[..., 1] >= cols)):
            raise InvariantViolation(f"cell index out of bounds on level {level}")
        return idx[..., 0] * cols + idx[..., 1]


def gather(grid: LatentGrid, region: SupportRegion):
    """
    Conditioning vectors and relative coordinates of every support

    Returns (c1, c2, c3, p1, p2, p3, w) with c_l of shape (n, S, d_l), p_l of shape (n, S, 3)
    and w of shape (n, S). Vectors are copies, not views into the grid.
    """
    conditioning = []
    for level in range(N_LEVELS):
        flat = grid.flat_index(level, region.indices[:, :, level])
        table = grid.levels[level].reshape(-1, grid.config.feature_dims[level])
        conditioning.append(table[flat])
    p1, p2, p3 = (region.rel[:, :, level].copy() for level in range(N_LEVELS))
    return conditioning[0], conditioning[1], conditioning[2], p1, p2, p3, region.weights.copy()


def compose(per_support_probs, weights) -> np.ndarray:
    """Blend per-support probability vectors: f = sum_V w_V f_V"""
    probs = np.asarray(per_support_probs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if probs.shape[:-1] != w.shape:
        raise ArgumentError(f"{probs.shape[:-1]} probability vectors but {w.shape} weights")
    return np.einsum("...sk,...s->...k", probs, w)


# ======================================================= #
# Serialization (float32 export)
# ======================================================= #
def save_latent_grid(path: str, grid: LatentGrid) -> None:
    arrays = {f"level_{l}": grid.levels[l].astype("<f4") for l in range(N_LEVELS)}
    write_container(path, "latent_grid", {"config": grid.config.to_dict()}, arrays)


def load_latent_grid(path: str) -> LatentGrid:
    _, header, arrays = read_container(path, "latent_grid")
    config = GridConfig.from_dict(header["config"])
    return LatentGrid([arrays[f"level_{l}"].astype(np.float64) for l in range(N_LEVELS)], config)


def grid_to_arrays(grid: LatentGrid, prefix: str = "grid", dtype=np.float64) -> Dict[str, np.ndarray]:
    return {f"{prefix}.level_{l}": grid.levels[l].astype(dtype) for l in range(N_LEVELS)}


def grid_from_arrays(arrays: Dict[str, np.ndarray], config: GridConfig, prefix: str = "grid") -> LatentGrid:
    return LatentGrid([arrays[f"{prefix}.level_{l}"].astype(np.float64) for l in range(N_LEVELS)], config)


def level_tables(grid: LatentGrid) -> Sequence[np.ndarray]:
    """Levels flattened to (cells_l, d_l) views"""
    return [grid.levels[l].reshape(-1, grid.config.feature_dims[l]) for l in range(N_LEVELS)]
