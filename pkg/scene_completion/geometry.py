"""
Geometry Primitives
Rigid poses and axis-aligned scene extents in the common right-handed scene frame (meters)
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ArgumentError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> rotation @ x + translation"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ArgumentError("pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise ArgumentError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ArgumentError("pose rotation is not a proper rotation (det != +1)")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about +z by yaw radians"""
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_euler(cls, angles_deg, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Intrinsic xyz Euler angles in degrees"""
        rotation = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()
        # re-orthonormalize so the 1e-9 invariant holds after float round-off
        u, _, vt = np.linalg.svd(rotation)
        return cls(u @ vt, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix34(cls, values) -> "Pose":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def as_matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """self after other"""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class SceneExtent:
    """Axis-aligned box [min_corner, max_corner)"""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ArgumentError("scene extent must be finite")
        if not np.all(lo < hi):
            raise ArgumentError(f"scene extent min_corner {lo.tolist()} must be < max_corner {hi.tolist()}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.min_corner) & (points < self.max_corner), axis=1)

    def voxel_dims(self, voxel_edge: float) -> np.ndarray:
        return np.ceil(self.size / voxel_edge - 1e-9).astype(np.int64)
