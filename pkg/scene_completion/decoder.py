"""
CBN Decoder
Conditioned-batch-normalization MLP mapping (c1, c2, c3, p1, p2, p3) to N+1 logits, with exact reverse-mode gradients

Layer layout (rows are query/support pairs):
    cond0  c1            -> (mu0, sigma0)   width 2*32
    cond1  [c1;c2]       -> (mu1, sigma1)
    cond2  [c1;c2;c3]    -> (mu2, sigma2)
    dense0 p1 (3 -> 32)          BN0, y = sigma0 * x + mu0, ReLU
    dense1 [a0;p2] (35 -> 32)    BN1, y = sigma1 * x + mu1, ReLU
    dense2 [a1;p3] (35 -> 32)    BN2, y = sigma2 * x + mu2, ReLU
    dense3 32 -> 32, ReLU
    dense4 32 -> 32, ReLU
    out    32 -> N+1 (last logit = free space)

The dense layers feeding a normalization carry no bias and the normalizations have no
affine parameters of their own; the conditioning supplies both.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .containers import read_container, write_container
from .errors import ArgumentError, NumericError, UsageError
from .latent_grid import N_LEVELS, LatentGrid, SupportRegion, level_tables, support_regions

logger = logging.getLogger(__name__)

HIDDEN = 32
BN_EPS = 1e-5
BN_MOMENTUM = 0.99
FREE_LOGIT_BIAS = 2.0
PREDICT_CHUNK = 32768

TRAIN = "train"
INFER = "infer"

# Fixed iteration order of the trainable parameters
PARAM_NAMES = (
    "cond0.W", "cond0.b", "cond1.W", "cond1.b", "cond2.W", "cond2.b",
    "dense0.W", "dense1.W", "dense2.W",
    "dense3.W", "dense3.b", "dense4.W", "dense4.b",
    "out.W", "out.b",
)
STAT_NAMES = ("bn0.mean", "bn0.var", "bn1.mean", "bn1.var", "bn2.mean", "bn2.var")


def param_shapes(n_classes: int, feature_dims) -> Dict[str, Tuple[int, ...]]:
    d1, d2, d3 = feature_dims
    k = n_classes + 1
    return {
        "cond0.W": (d1, 2 * HIDDEN), "cond0.b": (2 * HIDDEN,),
        "cond1.W": (d1 + d2, 2 * HIDDEN), "cond1.b": (2 * HIDDEN,),
        "cond2.W": (d1 + d2 + d3, 2 * HIDDEN), "cond2.b": (2 * HIDDEN,),
        "dense0.W": (3, HIDDEN), "dense1.W": (HIDDEN + 3, HIDDEN), "dense2.W": (HIDDEN + 3, HIDDEN),
        "dense3.W": (HIDDEN, HIDDEN), "dense3.b": (HIDDEN,),
        "dense4.W": (HIDDEN, HIDDEN), "dense4.b": (HIDDEN,),
        "out.W": (HIDDEN, k), "out.b": (k,),
    }


@dataclass
class DecoderParams:
    """Trainable weights plus the running statistics of the three normalizations"""

    weights: Dict[str, np.ndarray]
    running: Dict[str, np.ndarray]
    n_classes: int
    feature_dims: Tuple[int, int, int]

    def __post_init__(self):
        self.feature_dims = tuple(int(d) for d in self.feature_dims)
        shapes = param_shapes(self.n_classes, self.feature_dims)
        missing = set(PARAM_NAMES) - set(self.weights)
        if missing:
            raise ArgumentError(f"decoder params missing {sorted(missing)}")
        self.weights = {name: np.asarray(self.weights[name], dtype=np.float64) for name in PARAM_NAMES}
        self.running = {name: np.asarray(self.running[name], dtype=np.float64) for name in STAT_NAMES}
        for name in PARAM_NAMES:
            if self.weights[name].shape != shapes[name]:
                raise ArgumentError(f"{name} has shape {self.weights[name].shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(self.weights[name])):
                raise NumericError(f"{name} contains non-finite values")

    @classmethod
    def initialize(cls, n_classes: int, feature_dims, rng) -> "DecoderParams":
        """Fan-in uniform hidden layers, identity conditioning, zero head biased toward free space"""
        rng = np.random.default_rng(rng)
        shapes = param_shapes(n_classes, feature_dims)
        weights = {}
        for name in PARAM_NAMES:
            shape = shapes[name]
            if name.startswith("cond") and name.endswith(".W"):
                weights[name] = np.zeros(shape)
            elif name.startswith("cond"):
                weights[name] = np.concatenate([np.zeros(HIDDEN), np.ones(HIDDEN)])
            elif name.startswith("dense") and name.endswith(".W"):
                limit = np.sqrt(6.0 / shape[0])
                weights[name] = rng.uniform(-limit, limit, size=shape)
            elif name == "out.b":
                bias = np.zeros(shape)
                bias[-1] = FREE_LOGIT_BIAS
                weights[name] = bias
            else:
                weights[name] = np.zeros(shape)
        return cls(weights, default_running_stats(), n_classes, tuple(feature_dims))

    @property
    def n_logits(self) -> int:
        return self.n_classes + 1

    def copy(self) -> "DecoderParams":
        return DecoderParams({k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.running.items()}, self.n_classes, self.feature_dims)

    def to_arrays(self, prefix: str = "decoder") -> Dict[str, np.ndarray]:
        arrays = {f"{prefix}.{name}": self.weights[name] for name in PARAM_NAMES}
        arrays.update({f"{prefix}.{name}": self.running[name] for name in STAT_NAMES})
        return arrays

    @classmethod
    def from_arrays(cls, arrays, n_classes: int, feature_dims, prefix: str = "decoder") -> "DecoderParams":
        weights = {name: arrays[f"{prefix}.{name}"] for name in PARAM_NAMES}
        running = {name: arrays[f"{prefix}.{name}"] for name in STAT_NAMES}
        return cls(weights, running, n_classes, feature_dims)


def default_running_stats() -> Dict[str, np.ndarray]:
    stats = {}
    for i in range(3):
        stats[f"bn{i}.mean"] = np.zeros(HIDDEN)
        stats[f"bn{i}.var"] = np.ones(HIDDEN)
    return stats


def cond_blocks(feature_dims) -> List[Tuple[int, int]]:
    """Row ranges of each level's block inside the conditioning projection weights"""
    edges = np.concatenate([[0], np.cumsum(feature_dims)]).astype(int)
    return [(int(edges[l]), int(edges[l + 1])) for l in range(N_LEVELS)]


# ======================================================= #
# Forward
# ======================================================= #
@dataclass
class DecoderCache:
    """Activations of one forward pass; consumed by a single backward"""

    params: DecoderParams
    mode: str
    values: Dict[str, np.ndarray]
    batch_stats: List[Tuple[np.ndarray, np.ndarray]]
    rows: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    grid_front: Optional[dict] = None
    consumed: bool = False


def _check(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite activation in decoder layer '{name}'")
    return array


def _trunk(params: DecoderParams, g: List[np.ndarray], coords, mode: str):
    """Shared trunk given the three conditioning projections g_k = [mu_k, sigma_k]"""
    w = params.weights
    p1, p2, p3 = coords
    values = {}
    batch_stats = []
    extra = [None, p2, p3]
    a = None

    for i in range(3):
        x_in = p1 if i == 0 else np.concatenate([a, extra[i]], axis=1)
        h = _check(f"dense{i}", x_in @ w[f"dense{i}.W"])
        if mode == TRAIN:
            mean = h.mean(axis=0)
            var = h.var(axis=0)
            batch_stats.append((mean, var))
        else:
            mean = params.running[f"bn{i}.mean"]
            var = params.running[f"bn{i}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (h - mean) * inv_std
        mu, sigma = g[i][:, :HIDDEN], g[i][:, HIDDEN:]
        y = _check(f"cbn{i}", sigma * xhat + mu)
        a = np.maximum(y, 0.0)
        values.update({f"in{i}": x_in, f"xhat{i}": xhat, f"inv_std{i}": inv_std, f"y{i}": y, f"a{i}": a})

    for i in (3, 4):
        h = _check(f"dense{i}", a @ w[f"dense{i}.W"] + w[f"dense{i}.b"])
        values[f"in{i}"] = a
        values[f"h{i}"] = h
        a = np.maximum(h, 0.0)

    values["in_out"] = a
    z = _check("out", a @ w["out.W"] + w["out.b"])
    values["g"] = g
    return z, values, batch_stats


def _validate_mode(mode: str):
    if mode not in (TRAIN, INFER):
        raise ArgumentError(f"mode must be '{TRAIN}' or '{INFER}', got '{mode}'")


def forward(params: DecoderParams, conditioning, coords, mode: str = INFER):
    """
    Row-wise forward pass

    Args:
        params: decoder parameters
        conditioning: (c1, c2, c3) arrays of shape (R, d_l)
        coords: (p1, p2, p3) arrays of shape (R, 3)
        mode: "train" (batch statistics) or "infer" (running statistics)

    Returns:
        (logits of shape (R, N+1), DecoderCache)
    """
    _validate_mode(mode)
    c1, c2, c3 = (np.asarray(c, dtype=np.float64) for c in conditioning)
    coords = tuple(np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in coords)
    dims = (c1.shape[1], c2.shape[1], c3.shape[1])
    if dims != params.feature_dims:
        raise ArgumentError(f"conditioning dims {dims} do not match decoder {params.feature_dims}")

    w = params.weights
    stacked = [c1, np.concatenate([c1, c2], axis=1), np.concatenate([c1, c2, c3], axis=1)]
    g = [_check(f"cond{k}", stacked[k] @ w[f"cond{k}.W"] + w[f"cond{k}.b"]) for k in range(3)]

    z, values, batch_stats = _trunk(params, g, coords, mode)
    return z, DecoderCache(params, mode, values, batch_stats, rows=(c1, c2, c3))


def forward_grid(params: DecoderParams, grid: LatentGrid, region: SupportRegion, mode: str = INFER):
    """
    Grid-indexed forward over every (query, support) row of a region

    Each level's block of a conditioning projection is evaluated once per used cell and
    gathered per row. Returns (logits of shape (n, S, N+1), DecoderCache).
    """
    _validate_mode(mode)
    if tuple(grid.config.feature_dims) != params.feature_dims:
        raise ArgumentError(f"grid dims {grid.config.feature_dims} do not match decoder {params.feature_dims}")
    n, s = region.weights.shape
    tables = level_tables(grid)
    blocks = cond_blocks(params.feature_dims)
    w = params.weights

    cells = []
    for level in range(N_LEVELS):
        flat = grid.flat_index(level, region.indices[:, :, level].reshape(-1, 2))
        unique, inverse = np.unique(flat, return_inverse=True)
        cells.append((unique, inverse.reshape(-1)))

    g = []
    for k in range(3):
        acc = np.broadcast_to(w[f"cond{k}.b"], (n * s, 2 * HIDDEN)).copy()
        for level in range(k + 1):
            unique, inverse = cells[level]
            lo, hi = blocks[level]
            projected = tables[level][unique] @ w[f"cond{k}.W"][lo:hi]
            acc += projected[inverse]
        g.append(_check(f"cond{k}", acc))

    coords = tuple(region.rel[:, :, level].reshape(-1, 3) for level in range(N_LEVELS))
    z, values, batch_stats = _trunk(params, g, coords, mode)
    front = {"cells": cells, "shapes": [level.shape for level in grid.levels], "tables": tables}
    cache = DecoderCache(params, mode, values, batch_stats, grid_front=front)
    return z.reshape(n, s, -1), cache


def update_running_stats(params: DecoderParams, cache: DecoderCache, momentum: float = BN_MOMENTUM) -> None:
    """Blend the batch statistics of a train-mode forward into the running statistics"""
    if cache.mode != TRAIN:
        raise UsageError("running statistics can only be updated from a train-mode forward")
    for i, (mean, var) in enumerate(cache.batch_stats):
        params.running[f"bn{i}.mean"] = momentum * params.running[f"bn{i}.mean"] + (1 - momentum) * mean
        params.running[f"bn{i}.var"] = momentum * params.running[f"bn{i}.var"] + (1 - momentum) * var


# ======================================================= #
# Backward
# ======================================================= #
@dataclass
class DecoderGradients:
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    conditioning: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    grid: Optional[List[np.ndarray]] = None
    coords: Tuple[np.ndarray, np.ndarray, np.ndarray] = None


def _bn_backward(dxhat, xhat, inv_std, mode):
    if mode == INFER:
        return dxhat * inv_std
    n = dxhat.shape[0]
    return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


def backward(cache: DecoderCache, upstream, inputs_only: bool = False) -> DecoderGradients:
    """
    Exact gradients of sum(upstream * logits)

    With inputs_only only the coordinate gradients are produced (used for surface
    gradients at inference).
    """
    if cache.consumed:
        raise UsageError("decoder cache was already used by a backward pass")
    cache.consumed = True

    params, v, mode = cache.params, cache.values, cache.mode
    w = params.weights
    dz = np.asarray(upstream, dtype=np.float64).reshape(v["in_out"].shape[0], -1)
    grads: Dict[str, np.ndarray] = {}

    if not inputs_only:
        grads["out.W"] = v["in_out"].T @ dz
        grads["out.b"] = dz.sum(axis=0)
    da = dz @ w["out.W"].T

    for i in (4, 3):
        dh = da * (v[f"h{i}"] > 0)
        if not inputs_only:
            grads[f"dense{i}.W"] = v[f"in{i}"].T @ dh
            grads[f"dense{i}.b"] = dh.sum(axis=0)
        da = dh @ w[f"dense{i}.W"].T

    dg = [None, None, None]
    dcoords = [None, None, None]
    for i in (2, 1, 0):
        dy = da * (v[f"y{i}"] > 0)
        sigma = v["g"][i][:, HIDDEN:]
        dg[i] = np.concatenate([dy, dy * v[f"xhat{i}"]], axis=1)
        dh = _bn_backward(dy * sigma, v[f"xhat{i}"], v[f"inv_std{i}"], mode)
        if not inputs_only:
            grads[f"dense{i}.W"] = v[f"in{i}"].T @ dh
        din = dh @ w[f"dense{i}.W"].T
        if i == 0:
            dcoords[0] = din
        else:
            da = din[:, :HIDDEN]
            dcoords[i] = din[:, HIDDEN:]

    _check("backward", np.concatenate([d.reshape(-1) for d in dcoords]))
    out = DecoderGradients(coords=tuple(dcoords))
    if inputs_only:
        return out

    for k in range(3):
        grads[f"cond{k}.b"] = dg[k].sum(axis=0)

    blocks = cond_blocks(params.feature_dims)
    if cache.rows is not None:
        c1, c2, c3 = cache.rows
        stacked = [c1, np.concatenate([c1, c2], axis=1), np.concatenate([c1, c2, c3], axis=1)]
        dc = [np.zeros_like(c1), np.zeros_like(c2), np.zeros_like(c3)]
        for k in range(3):
            grads[f"cond{k}.W"] = stacked[k].T @ dg[k]
            dstacked = dg[k] @ w[f"cond{k}.W"].T
            for level in range(k + 1):
                lo, hi = blocks[level]
                dc[level] += dstacked[:, lo:hi]
        out.conditioning = tuple(dc)
    else:
        front = cache.grid_front
        grid_grads = [np.zeros(shape) for shape in front["shapes"]]
        for k in range(3):
            grads[f"cond{k}.W"] = np.zeros_like(w[f"cond{k}.W"])
        for level in range(N_LEVELS):
            unique, inverse = front["cells"][level]
            lo, hi = blocks[level]
            flat_grad = grid_grads[level].reshape(-1, grid_grads[level].shape[-1])
            for k in range(level, 3):
                per_cell = np.zeros((len(unique), 2 * HIDDEN))
                np.add.at(per_cell, inverse, dg[k])
                grads[f"cond{k}.W"][lo:hi] += front["tables"][level][unique].T @ per_cell
                flat_grad[unique] += per_cell @ w[f"cond{k}.W"][lo:hi].T
        out.grid = grid_grads

    out.params = {name: grads[name] for name in PARAM_NAMES}
    return out


# ======================================================= #
# Prediction
# ======================================================= #
def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: DecoderParams, grid: LatentGrid, points, chunk: int = PREDICT_CHUNK) -> np.ndarray:
    """
    Composed class probabilities sum_V w_V softmax(f_V(p)), shape (n, N+1)

    A single 3-vector returns a single probability vector.
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    points = points.reshape(-1, 3)
    out = np.empty((len(points), params.n_logits))
    for start in range(0, len(points), chunk):
        region = support_regions(points[start:start + chunk], grid.config)
        z, _ = forward_grid(params, grid, region, INFER)
        out[start:start + chunk] = np.einsum("nsk,ns->nk", softmax(z), region.weights)
    return out[0] if single else out


def predict_with_free_gradient(params: DecoderParams, grid: LatentGrid, points, chunk: int = PREDICT_CHUNK):
    """Composed probabilities (n, N+1) and the gradient of the free-space probability (n, 3)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    probs = np.empty((len(points), params.n_logits))
    grad = np.empty((len(points), 3))

    for start in range(0, len(points), chunk):
        region = support_regions(points[start:start + chunk], grid.config)
        z, cache = forward_grid(params, grid, region, INFER)
        s = softmax(z)
        w = region.weights
        probs[start:start + chunk] = np.einsum("nsk,ns->nk", s, w)

        # d s_free / d z = s_free * (onehot_free - s)
        s_free = s[..., -1]
        dz = -s * s_free[..., None]
        dz[..., -1] += s_free
        dz *= w[..., None]
        dcoords = backward(cache, dz.reshape(-1, z.shape[-1]), inputs_only=True).coords

        n, n_sup = w.shape
        # every relative coordinate moves one-to-one with the query
        g = sum(d.reshape(n, n_sup, 3) for d in dcoords).sum(axis=1)
        g[:, :2] += np.einsum("ns,nsj->nj", s_free, region.weight_grads)
        grad[start:start + chunk] = g

    return probs, grad


# ======================================================= #
# Serialization
# ======================================================= #
def save_decoder_params(path: str, params: DecoderParams) -> None:
    header = {"n_classes": params.n_classes, "feature_dims": list(params.feature_dims)}
    write_container(path, "decoder_params", header, params.to_arrays())


def load_decoder_params(path: str) -> DecoderParams:
    _, header, arrays = read_container(path, "decoder_params")
    return DecoderParams.from_arrays(arrays, int(header["n_classes"]), tuple(header["feature_dims"]))
