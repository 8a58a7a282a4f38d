import numpy as np
import pytest

from scene_completion.decoder import PARAM_NAMES, DecoderParams, param_shapes
from scene_completion.latent_grid import GridConfig, LatentGrid
from scene_completion.mapping import make_class_map
from scene_completion.trainer import Checkpoint, OptimizerState, trainable_tensors

N_CLASSES = 3
FEATURE_DIMS = (6, 5, 4)


@pytest.fixture
def grid_config():
    # footprint [-4, 4]^2, bilinear domain [-3.75, 3.75]^2; one coarse cell, 4x4 middle cells
    return GridConfig(delta=0.5, ratios=(16, 4, 1), origin=(-4.0, -4.0), cells=(16, 16), feature_dims=FEATURE_DIMS)


@pytest.fixture
def latent_grid(grid_config):
    return LatentGrid.initialize(grid_config, rng=2, std=0.5)


@pytest.fixture
def random_params():
    """Decoder with every weight random (the default initialization has a zero head)"""
    rng = np.random.default_rng(1)
    params = DecoderParams.initialize(N_CLASSES, FEATURE_DIMS, rng)
    shapes = param_shapes(N_CLASSES, FEATURE_DIMS)
    for name in PARAM_NAMES:
        shape = shapes[name]
        std = 1.0 / np.sqrt(shape[0]) if name.endswith(".W") else 0.5
        params.weights[name] = rng.normal(0.0, std, size=shape)
    for i in range(3):
        params.running[f"bn{i}.mean"] = rng.normal(0.0, 0.1, size=params.running[f"bn{i}.mean"].shape)
        params.running[f"bn{i}.var"] = rng.uniform(0.5, 2.0, size=params.running[f"bn{i}.var"].shape)
    return params


@pytest.fixture
def small_class_map():
    return make_class_map({10: 1, 40: 2, 50: 3}, ["car", "road", "building"])


@pytest.fixture
def checkpoint(random_params, latent_grid, small_class_map):
    state = OptimizerState.zeros_like(trainable_tensors(random_params, latent_grid))
    return Checkpoint(random_params, latent_grid, small_class_map, state)


@pytest.fixture
def domain_points(grid_config):
    """Draw n query points inside the bilinear domain of the test grid"""

    def draw(n, seed=0, z=(-1.0, 2.0)):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(-3.7, 3.7, size=(n, 2))
        return np.column_stack([xy, rng.uniform(*z, size=n)])

    return draw
