"""
Trainer
Joint auto-decoder optimization of decoder parameters and latent grid with Adam, warmup and staircase decay
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import RunConfig, config_hash, stream_rng
from .containers import read_container, write_container
from .decoder import INFER, PARAM_NAMES, TRAIN, DecoderParams, backward, forward_grid, update_running_stats
from .errors import ArgumentError
from .latent_grid import N_LEVELS, GridConfig, LatentGrid, grid_from_arrays, grid_to_arrays, support_regions
from .losses import LossWeights, consistency_losses, total_loss
from .mapping import ClassMap, class_map_from_records, default_class_map
from .sampling import TargetSet, build_batch, resample_free_targets

logger = logging.getLogger(__name__)


# ======================================================= #
# Optimizer
# ======================================================= #
def lr_schedule(step: int, base_lr: float = 1e-3, warmup_steps: int = 2000,
                decay_steps: int = 40000, decay_rate: float = 0.5) -> float:
    """base_lr * min(step / warmup, 1) * decay_rate ** floor(step / decay_steps)"""
    if step < 0:
        raise ArgumentError(f"step must be >= 0, got {step}")
    warmup = min(step / warmup_steps, 1.0) if warmup_steps > 0 else 1.0
    return base_lr * warmup * decay_rate ** (step // decay_steps)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name ("decoder.<name>" / "grid.level_<l>")"""

    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    step: int = 0
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 2000
    decay_steps: int = 40000
    decay_rate: float = 0.5

    @classmethod
    def zeros_like(cls, tensors: Dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, **hyper)

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.base_lr, self.warmup_steps, self.decay_steps, self.decay_rate)

    def hyper(self) -> Dict[str, float]:
        return {
            "base_lr": self.base_lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "warmup_steps": self.warmup_steps, "decay_steps": self.decay_steps, "decay_rate": self.decay_rate,
        }


def adam_update(state: OptimizerState, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
    """One in-place Adam step on every tensor; returns the learning rate used"""
    t = state.step + 1
    lr = state.lr(t)
    b1, b2 = state.beta1, state.beta2
    for name, tensor in tensors.items():
        g = grads[name]
        m = state.first[name]
        v = state.second[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return lr


def trainable_tensors(params: DecoderParams, grid: LatentGrid) -> Dict[str, np.ndarray]:
    """Live views of every trainable array, in a fixed order"""
    tensors = {f"decoder.{name}": params.weights[name] for name in PARAM_NAMES}
    tensors.update({f"grid.level_{l}": grid.levels[l] for l in range(N_LEVELS)})
    return tensors


# ======================================================= #
# One step
# ======================================================= #
def train_step(params: DecoderParams, grid: LatentGrid, batch, opt_state: OptimizerState,
               weights: LossWeights = None, reduction: str = "mean", bn_momentum: float = 0.99):
    """
    Forward, loss, backward and one Adam update (params, grid and state are updated in place)

    Returns (params, grid, opt_state, LossReport, lr).
    """
    z, cache = forward_grid(params, grid, batch.region, TRAIN)
    report, dz = total_loss(batch, z, weights, reduction)
    grads = backward(cache, dz.reshape(-1, z.shape[-1]))
    update_running_stats(params, cache, bn_momentum)

    flat = {f"decoder.{name}": grads.params[name] for name in PARAM_NAMES}
    flat.update({f"grid.level_{l}": grads.grid[l] for l in range(N_LEVELS)})
    lr = adam_update(opt_state, trainable_tensors(params, grid), flat)
    return params, grid, opt_state, report, lr


# ======================================================= #
# Checkpoints
# ======================================================= #
@dataclass
class Checkpoint:
    params: DecoderParams
    grid: LatentGrid
    class_map: ClassMap
    opt_state: OptimizerState
    manifest: Dict[str, str] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.opt_state.step

    def completion_field(self):
        from .field import CheckpointField
        return CheckpointField(self)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Everything needed to resume bit-for-bit; contains no timestamps"""
    header = {
        "n_classes": ckpt.params.n_classes,
        "feature_dims": list(ckpt.params.feature_dims),
        "grid_config": ckpt.grid.config.to_dict(),
        "class_names": list(ckpt.class_map.names),
        "step": ckpt.opt_state.step,
        "optimizer": ckpt.opt_state.hyper(),
        "manifest": ckpt.manifest,
    }
    arrays = ckpt.params.to_arrays()
    arrays.update(grid_to_arrays(ckpt.grid))
    for name in ckpt.opt_state.first:
        arrays[f"adam.m.{name}"] = ckpt.opt_state.first[name]
        arrays[f"adam.v.{name}"] = ckpt.opt_state.second[name]
    arrays["class_map"] = np.array(ckpt.class_map.raw_to_class, dtype=np.int64).reshape(-1, 2)
    write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path: str) -> Checkpoint:
    _, header, arrays = read_container(path, "checkpoint")
    params = DecoderParams.from_arrays(arrays, int(header["n_classes"]), tuple(header["feature_dims"]))
    grid = grid_from_arrays(arrays, GridConfig.from_dict(header["grid_config"]))
    names = [k[len("adam.m."):] for k in arrays if k.startswith("adam.m.")]
    state = OptimizerState(
        first={n: arrays[f"adam.m.{n}"] for n in names},
        second={n: arrays[f"adam.v.{n}"] for n in names},
        step=int(header["step"]),
        **header["optimizer"],
    )
    class_map = class_map_from_records(arrays["class_map"], header["class_names"])
    return Checkpoint(params, grid, class_map, state, dict(header.get("manifest", {})))


def initial_checkpoint(targets: TargetSet, config: RunConfig, class_map: ClassMap = None) -> Checkpoint:
    g, t = config.grid, config.training
    class_map = class_map or default_class_map()
    grid_config = GridConfig.for_extent(targets.extent, g.delta, tuple(g.feature_dims))
    rng = stream_rng(t.seed, "init")
    params = DecoderParams.initialize(class_map.n_classes, tuple(g.feature_dims), rng)
    grid = LatentGrid.initialize(grid_config, rng, g.init_std)
    state = OptimizerState.zeros_like(
        trainable_tensors(params, grid), base_lr=t.base_lr, beta1=t.beta1, beta2=t.beta2, eps=t.adam_eps,
        warmup_steps=t.warmup_steps, decay_steps=t.decay_steps, decay_rate=t.decay_rate,
    )
    manifest = {"seed": str(t.seed), "config_hash": config_hash(config)}
    return Checkpoint(params, grid, class_map, state, manifest)


# ======================================================= #
# Fitting driver
# ======================================================= #
def _targets_at(step: int, targets: TargetSet, config: RunConfig) -> TargetSet:
    """Target set in use at `step` (free/consistency targets are re-drawn every resample_every steps)"""
    every = config.training.resample_every
    if not every or step < every:
        return targets
    last = (step // every) * every
    s = config.sampling
    return resample_free_targets(targets, s.decay_scale, s.consistency_count,
                                 stream_rng(config.training.seed, "resample", last))


def fit(targets: TargetSet, config: RunConfig, class_map: ClassMap = None, resume: Checkpoint = None,
        out_dir: str = None, progress: bool = True) -> Tuple[Checkpoint, pd.DataFrame]:
    """
    Run train_step up to training.steps

    Args:
        targets: full training TargetSet (sampled)
        config: run configuration
        class_map: taxonomy stored with the checkpoint
        resume: continue from this checkpoint instead of a fresh initialization
        out_dir: when given, periodic checkpoints are written there
        progress: show a tqdm progress bar

    Returns:
        (final checkpoint, metrics DataFrame with one row per logged step)
    """
    if len(targets) == 0:
        raise ArgumentError("cannot fit an empty target set")
    t, s = config.training, config.sampling
    ckpt = resume if resume is not None else initial_checkpoint(targets, config, class_map)
    params, grid, state = ckpt.params, ckpt.grid, ckpt.opt_state
    weights = LossWeights(t.lambda_s, t.lambda_g, t.lambda_c)

    start = state.step
    working = _targets_at(start, targets, config)
    rows: List[Dict[str, float]] = []

    bar = tqdm(range(start, t.steps), desc="fit", disable=not progress, leave=False)
    for step in bar:
        if t.resample_every and step > start and step % t.resample_every == 0:
            working = _targets_at(step, targets, config)

        batch = build_batch(working, s.max_targets, s.support_subset, stream_rng(t.seed, "batch", step), grid.config)
        params, grid, state, report, lr = train_step(params, grid, batch, state, weights,
                                                     t.loss_reduction, t.bn_momentum)

        done = step + 1
        if done % t.log_every == 0 or done == t.steps:
            rows.append({"step": done, "lr": lr, **report.as_row()})
            bar.set_postfix(objective=f"{report.objective:.4f}")
        if out_dir and t.checkpoint_every and done % t.checkpoint_every == 0 and done != t.steps:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{done:06d}.sdif"), ckpt)
            logger.info("checkpoint at step %d", done)

    return ckpt, pd.DataFrame(rows, columns=metric_columns() if not rows else None)


def metric_columns() -> List[str]:
    return ["step", "lr", "objective", "total", "semantic", "geometric", "consistency",
            "semantic_mean", "geometric_mean", "consistency_mean",
            "n_semantic", "n_occupied_unlabeled", "n_free", "n_consistency"]


# ======================================================= #
# Diagnostics
# ======================================================= #
def consistency_report(ckpt: Checkpoint, points) -> float:
    """Mean JSD across all four supports at the given points (inference mode)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    region = support_regions(points, ckpt.grid.config)
    z, _ = forward_grid(ckpt.params, ckpt.grid, region, INFER)
    losses, _ = consistency_losses(z)
    return float(losses.mean())
