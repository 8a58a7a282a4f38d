"""
Completion Field
The continuous function every extraction reads: class probabilities (free space last) at arbitrary points
"""

import numpy as np

from .decoder import predict, predict_with_free_gradient
from .errors import ArgumentError


class CompletionField:
    """
    Interface of a continuous semantic field

    probabilities(points) -> (n, N+1) with the free-space probability in the last column
    free_probability_and_gradient(points) -> ((n,), (n, 3))
    """

    n_classes: int = 0

    def probabilities(self, points) -> np.ndarray:
        raise NotImplementedError

    def free_probability_and_gradient(self, points):
        raise NotImplementedError

    def free_probability(self, points) -> np.ndarray:
        return self.probabilities(points)[:, -1]

    def in_domain(self, points) -> np.ndarray:
        return np.ones(len(np.asarray(points).reshape(-1, 3)), dtype=bool)

    def domain_hint(self) -> str:
        return ""


class CheckpointField(CompletionField):
    """Field of a fitted checkpoint (decoder + latent grid)"""

    def __init__(self, checkpoint):
        self.checkpoint = checkpoint
        self.n_classes = checkpoint.params.n_classes

    def probabilities(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return predict(self.checkpoint.params, self.checkpoint.grid, points)

    def free_probability_and_gradient(self, points):
        probs, grad = predict_with_free_gradient(self.checkpoint.params, self.checkpoint.grid, points)
        return probs[:, -1], grad

    def in_domain(self, points) -> np.ndarray:
        return self.checkpoint.grid.config.in_domain(points)

    def domain_hint(self) -> str:
        lo, hi = self.checkpoint.grid.config.footprint()
        inset = 0.5 * self.checkpoint.grid.config.delta
        return (f"keep x in [{lo[0] + inset:.3f}, {hi[0] - inset:.3f}] and "
                f"y in [{lo[1] + inset:.3f}, {hi[1] - inset:.3f}] (footprint inset by delta/2)")


class SphereField(CompletionField):
    """
    Analytic field: a solid sphere of one class, free space outside

    The free-space probability is a logistic ramp of the signed distance, so the
    theta level set is a sphere of radius r + sharpness * logit(theta).
    """

    def __init__(self, center=(0.0, 0.0, 0.0), radius: float = 5.0, sharpness: float = 0.1,
                 n_classes: int = 2, class_id: int = 1):
        if radius <= 0 or sharpness <= 0:
            raise ArgumentError("sphere radius and sharpness must be > 0")
        if not 1 <= class_id <= n_classes:
            raise ArgumentError(f"class id {class_id} outside 1..{n_classes}")
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.sharpness = float(sharpness)
        self.n_classes = n_classes
        self.class_id = class_id

    def _free(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        offset = points - self.center
        dist = np.linalg.norm(offset, axis=1)
        free = 0.5 * (1.0 + np.tanh(0.5 * (dist - self.radius) / self.sharpness))
        return free, offset, dist

    def probabilities(self, points) -> np.ndarray:
        free, _, _ = self._free(points)
        probs = np.zeros((len(free), self.n_classes + 1))
        probs[:, self.class_id - 1] = 1.0 - free
        probs[:, -1] = free
        return probs

    def free_probability_and_gradient(self, points):
        free, offset, dist = self._free(points)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(dist[:, None] > 0, offset / dist[:, None], 0.0)
        grad = (free * (1.0 - free) / self.sharpness)[:, None] * direction
        return free, grad

    def level_radius(self, theta: float) -> float:
        return self.radius + self.sharpness * float(np.log(theta / (1.0 - theta)))


def as_field(source) -> CompletionField:
    """Field of a checkpoint, or the field itself"""
    if isinstance(source, CompletionField):
        return source
    if hasattr(source, "completion_field"):
        return source.completion_field()
    raise ArgumentError(f"cannot build a completion field from {type(source).__name__}")
