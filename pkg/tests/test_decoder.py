import numpy as np
import pytest

from scene_completion.decoder import (INFER, PARAM_NAMES, TRAIN, DecoderParams, backward, forward, forward_grid,
                                      load_decoder_params, predict, predict_with_free_gradient, save_decoder_params,
                                      softmax, update_running_stats)
from scene_completion.errors import ArgumentError, UsageError
from scene_completion.latent_grid import N_LEVELS, gather, support_regions

from .conftest import FEATURE_DIMS, N_CLASSES


def directional_check(fn, x, analytic, rng, h=1e-7, trials=3):
    """Compare analytic gradients with central differences along random unit directions"""
    for _ in range(trials):
        d = rng.normal(size=x.shape)
        d /= np.linalg.norm(d)
        numeric = (fn(x + h * d) - fn(x - h * d)) / (2 * h)
        exact = float(np.sum(analytic * d))
        assert abs(numeric - exact) <= 1e-5 + 1e-4 * abs(exact)


# ======================================================= #
# Forward
# ======================================================= #
def test_initial_conditioning_is_identity():
    rng = np.random.default_rng(7)
    params = DecoderParams.initialize(N_CLASSES, FEATURE_DIMS, 0)
    params.weights["out.W"] = rng.normal(size=params.weights["out.W"].shape)
    coords = tuple(rng.normal(size=(6, 3)) for _ in range(3))
    conditioning = tuple(rng.normal(0.0, 0.01, size=(6, d)) for d in FEATURE_DIMS)
    zeros = tuple(np.zeros_like(c) for c in conditioning)
    z, _ = forward(params, conditioning, coords, INFER)
    z_zero, _ = forward(params, zeros, coords, INFER)
    assert np.allclose(z, z_zero, atol=1e-12)
    projections = [name for name in PARAM_NAMES if name.startswith("cond") and name.endswith(".W")]
    assert all(np.all(params.weights[name] == 0.0) for name in projections)


def test_initial_field_is_constant(grid_config, latent_grid, domain_points):
    params = DecoderParams.initialize(N_CLASSES, FEATURE_DIMS, 0)
    probs = predict(params, latent_grid, domain_points(50))
    assert np.allclose(probs, probs[0])
    assert np.argmax(probs[0]) == N_CLASSES


def test_forward_grid_matches_gathered_forward(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(20), latent_grid.config)
    z_grid, _ = forward_grid(random_params, latent_grid, region, INFER)
    c1, c2, c3, p1, p2, p3, _ = gather(latent_grid, region)
    n, s = region.weights.shape
    z_rows, _ = forward(random_params, (c1.reshape(n * s, -1), c2.reshape(n * s, -1), c3.reshape(n * s, -1)),
                        (p1, p2, p3), INFER)
    assert np.max(np.abs(z_grid.reshape(n * s, -1) - z_rows)) <= 1e-12


def test_train_mode_uses_batch_statistics(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(30), latent_grid.config)
    z_train, cache = forward_grid(random_params, latent_grid, region, TRAIN)
    z_infer, _ = forward_grid(random_params, latent_grid, region, INFER)
    assert not np.allclose(z_train, z_infer)
    before = random_params.running["bn0.mean"].copy()
    update_running_stats(random_params, cache, 0.5)
    assert np.allclose(random_params.running["bn0.mean"], 0.5 * before + 0.5 * cache.batch_stats[0][0])


def test_running_stats_need_train_cache(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(5), latent_grid.config)
    _, cache = forward_grid(random_params, latent_grid, region, INFER)
    with pytest.raises(UsageError):
        update_running_stats(random_params, cache)


def test_invalid_mode(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(2), latent_grid.config)
    with pytest.raises(ArgumentError):
        forward_grid(random_params, latent_grid, region, "eval")


# ======================================================= #
# Backward
# ======================================================= #
@pytest.mark.parametrize("mode", [TRAIN, INFER])
def test_parameter_gradients(random_params, latent_grid, domain_points, mode):
    rng = np.random.default_rng(3)
    region = support_regions(domain_points(8, seed=1), latent_grid.config)
    z, cache = forward_grid(random_params, latent_grid, region, mode)
    upstream = rng.normal(size=z.shape)
    grads = backward(cache, upstream.reshape(-1, z.shape[-1]))

    def objective(params, grid):
        out, _ = forward_grid(params, grid, region, mode)
        return float(np.sum(out * upstream))

    for name in PARAM_NAMES:
        def with_param(value, name=name):
            params = random_params.copy()
            params.weights[name] = value
            return objective(params, latent_grid)

        directional_check(with_param, random_params.weights[name], grads.params[name], rng)

    for level in range(N_LEVELS):
        def with_level(value, level=level):
            grid = latent_grid.copy()
            grid.levels[level] = value
            return objective(random_params, grid)

        directional_check(with_level, latent_grid.levels[level], grads.grid[level], rng)


def test_row_forward_gradients(random_params):
    rng = np.random.default_rng(4)
    rows = 10
    conditioning = tuple(rng.normal(0.0, 0.5, size=(rows, d)) for d in FEATURE_DIMS)
    coords = tuple(rng.normal(size=(rows, 3)) for _ in range(3))
    z, cache = forward(random_params, conditioning, coords, TRAIN)
    upstream = rng.normal(size=z.shape)
    grads = backward(cache, upstream)

    for level in range(3):
        def with_conditioning(value, level=level):
            c = list(conditioning)
            c[level] = value
            return float(np.sum(forward(random_params, tuple(c), coords, TRAIN)[0] * upstream))

        directional_check(with_conditioning, conditioning[level], grads.conditioning[level], rng)

        def with_coords(value, level=level):
            p = list(coords)
            p[level] = value
            return float(np.sum(forward(random_params, conditioning, tuple(p), TRAIN)[0] * upstream))

        directional_check(with_coords, coords[level], grads.coords[level], rng)


def test_cache_is_single_use(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(4), latent_grid.config)
    z, cache = forward_grid(random_params, latent_grid, region, INFER)
    backward(cache, np.ones((z.shape[0] * z.shape[1], z.shape[2])))
    with pytest.raises(UsageError):
        backward(cache, np.ones((z.shape[0] * z.shape[1], z.shape[2])))


def test_inputs_only_skips_parameters(random_params, latent_grid, domain_points):
    region = support_regions(domain_points(4), latent_grid.config)
    z, cache = forward_grid(random_params, latent_grid, region, INFER)
    grads = backward(cache, np.ones((z.shape[0] * z.shape[1], z.shape[2])), inputs_only=True)
    assert grads.params == {}
    assert grads.grid is None
    assert grads.coords[0].shape == (z.shape[0] * z.shape[1], 3)


# ======================================================= #
# Prediction
# ======================================================= #
def test_predict_is_a_distribution(random_params, latent_grid, domain_points):
    probs = predict(random_params, latent_grid, domain_points(100))
    assert probs.shape == (100, N_CLASSES + 1)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.all(probs >= 0)


def test_predict_single_point(random_params, latent_grid):
    p = np.array([0.3, -1.2, 0.5])
    single = predict(random_params, latent_grid, p)
    assert single.shape == (N_CLASSES + 1,)
    assert np.allclose(single, predict(random_params, latent_grid, p[None])[0])


def test_predict_chunking_is_transparent(random_params, latent_grid, domain_points):
    points = domain_points(37)
    assert np.allclose(predict(random_params, latent_grid, points),
                       predict(random_params, latent_grid, points, chunk=5), atol=1e-14)


def test_free_gradient_matches_finite_differences(random_params, latent_grid, domain_points):
    points = domain_points(15, seed=5)
    probs, grad = predict_with_free_gradient(random_params, latent_grid, points)
    assert np.allclose(probs, predict(random_params, latent_grid, points))
    h = 1e-7
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        up = predict(random_params, latent_grid, points + step)[:, -1]
        down = predict(random_params, latent_grid, points - step)[:, -1]
        numeric = (up - down) / (2 * h)
        assert np.allclose(grad[:, axis], numeric, rtol=1e-4, atol=1e-6)


def test_softmax_rows():
    z = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]])
    s = softmax(z)
    assert np.allclose(s.sum(axis=1), 1.0)
    assert s[1, 0] == pytest.approx(0.5)


# ======================================================= #
# Parameters
# ======================================================= #
def test_params_reject_wrong_shape():
    params = DecoderParams.initialize(N_CLASSES, FEATURE_DIMS, 0)
    weights = dict(params.weights)
    weights["out.W"] = np.zeros((3, 3))
    with pytest.raises(ArgumentError):
        DecoderParams(weights, params.running, N_CLASSES, FEATURE_DIMS)


def test_conditioning_dims_must_match(random_params):
    rows = 3
    conditioning = (np.zeros((rows, 2)), np.zeros((rows, 5)), np.zeros((rows, 4)))
    coords = tuple(np.zeros((rows, 3)) for _ in range(3))
    with pytest.raises(ArgumentError):
        forward(random_params, conditioning, coords)


def test_save_load_round_trip(tmp_path, random_params):
    path = str(tmp_path / "decoder.sdif")
    save_decoder_params(path, random_params)
    loaded = load_decoder_params(path)
    for name in PARAM_NAMES:
        assert np.array_equal(loaded.weights[name], random_params.weights[name])
    assert np.array_equal(loaded.running["bn2.var"], random_params.running["bn2.var"])
    assert loaded.feature_dims == FEATURE_DIMS
