"""
Command Line
One entry point with subcommands wiring synthesis, sampling, fitting, extraction and evaluation

Every command reads and writes its artifacts inside --out and leaves a manifest_<command>.env there.

    python -m scene_completion synth --config configs/default.env --out runs/demo
    python -m scene_completion sample --out runs/demo
    python -m scene_completion fit --out runs/demo --set training.steps=2000
    python -m scene_completion eval --out runs/demo
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List

import numpy as np

from . import __version__
from .config import RunConfig, config_hash, load_config, stream_rng, validate_config
from .errors import ConfigError, DataError, SceneCompletionError
from .evaluation import point_segmentation_metrics, pr_sweep, unseen_mask, voxel_metrics, write_metrics
from .extraction import (ground_image, load_voxel_grid, mise_mesh, refine_and_color, save_voxel_grid, voxelize,
                         voxel_summary, write_ground_image, write_ply)
from .geometry import Pose, SceneExtent
from .mapping import ClassMap, default_class_map, load_class_map_csv
from .sampling import TargetKind, sample_targets
from .scene_io import (accumulate, load_dynamic_flags, load_labels, load_poses, load_scan, load_target_set,
                       save_labels, save_poses, save_scan, save_target_set)
from .synthscene import SceneSpec, generate_scene, ground_truth_voxels, save_scene, simulate_labeled_scan
from .trainer import consistency_report, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "sample", "fit", "voxelize", "mesh", "ground-image", "eval", "pr-sweep", "validate-config")

# Artifact names inside --out
SCENE_FILE = "scene.sdif"
TRUTH_FILE = "truth_voxels.sdif"
POSES_FILE = "poses.txt"
TARGETS_FILE = "targets.sdif"
CHECKPOINT_FILE = "checkpoint.sdif"
METRICS_LOG = "fit_metrics.csv"
VOXELS_FILE = "voxels.sdif"
MESH_FILE = "mesh.ply"
GROUND_FILE = "ground.ppm"
JSD_POINTS = 10000


@dataclass
class RunContext:
    command: str
    config: RunConfig
    out_dir: str
    class_map: ClassMap
    threads: int = 0
    artifacts: List[str] = field(default_factory=list)
    summary: Dict[str, str] = field(default_factory=dict)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def require(self, name: str, producer: str) -> str:
        path = self.path(name)
        if not os.path.exists(path):
            raise DataError(f"{path} not found (run `{producer}` first)")
        return path

    def produced(self, path: str) -> str:
        self.artifacts.append(path)
        print(f"✓ Wrote {path}")
        return path

    @property
    def extent(self) -> SceneExtent:
        return SceneExtent(self.config.grid.extent_min, self.config.grid.extent_max)


# ======================================================= #
# Console helpers
# ======================================================= #
def banner(title: str) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _quote(value) -> str:
    text = str(value)
    if any(c.isspace() for c in text) or "#" in text or '"' in text:
        return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return text


def write_manifest(ctx: RunContext, status: str, started: datetime, error: str = "") -> str:
    """Key-value record of the run (readable with dotenv_values)"""
    values = {
        "command": ctx.command,
        "status": status,
        "version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "threads": ctx.threads,
        "seed": ctx.config.training.seed,
        "config_hash": config_hash(ctx.config),
        "started": started.isoformat(timespec="seconds"),
        "finished": datetime.now().isoformat(timespec="seconds"),
        "artifacts": ",".join(ctx.artifacts),
    }
    if error:
        values["error"] = error
    values.update({f"summary.{k}": v for k, v in ctx.summary.items()})
    values.update({f"config.{k}": v for k, v in ctx.config.to_flat().items()})

    os.makedirs(ctx.out_dir, exist_ok=True)
    path = ctx.path(f"manifest_{ctx.command.replace('-', '_')}.env")
    with open(path, "w") as f:
        for key, value in values.items():
            f.write(f"{key}={_quote(value)}\n")
    return path


def _class_map(config: RunConfig) -> ClassMap:
    if config.io.class_map:
        return load_class_map_csv(config.io.class_map)
    return default_class_map()


# ======================================================= #
# Commands
# ======================================================= #
def cmd_synth(ctx: RunContext) -> None:
    """Synthetic scene, simulated labeled scans (KITTI files) and the analytic ground truth"""
    c, y = ctx.config, ctx.config.synth
    spec = SceneSpec(n_boxes=y.n_boxes, n_cylinders=y.n_cylinders, n_strips=y.n_strips,
                     extent_min=tuple(c.grid.extent_min), extent_max=tuple(c.grid.extent_max))
    scene = generate_scene(c.training.seed, spec, ctx.class_map)
    save_scene(ctx.produced(ctx.path(SCENE_FILE)), scene)

    os.makedirs(ctx.path("scans"), exist_ok=True)
    os.makedirs(ctx.path("labels"), exist_ok=True)
    poses = []
    offsets = (np.arange(y.n_scans) - 0.5 * (y.n_scans - 1)) * y.scan_spacing
    elevation = (np.radians(y.elevation_min_deg), np.radians(y.elevation_max_deg))
    to_raw = np.vectorize(ctx.class_map.raw_id_of, otypes=[np.uint32])

    for k, dx in enumerate(offsets):
        pose = Pose.from_yaw(0.0, (float(dx), 0.0, spec.ground_height + y.sensor_height))
        cloud, class_ids = simulate_labeled_scan(scene, pose, (y.azimuth_count, y.elevation_count),
                                                 elevation_range=elevation, max_range=y.max_range)
        local = cloud.transformed(Pose(pose.rotation.T, -pose.rotation.T @ pose.translation))
        save_scan(local, ctx.produced(ctx.path(os.path.join("scans", f"{k:06d}.bin"))))
        save_labels(to_raw(class_ids) if len(class_ids) else np.zeros(0, np.uint32),
                    ctx.produced(ctx.path(os.path.join("labels", f"{k:06d}.label"))))
        poses.append(pose)
        print(f"  scan {k}: {len(cloud)} returns")
    save_poses(poses, ctx.produced(ctx.path(POSES_FILE)))

    truth = ground_truth_voxels(scene, c.grid.extent_min, c.extraction.voxel_edge,
                                ctx.extent.voxel_dims(c.extraction.voxel_edge))
    save_voxel_grid(ctx.produced(ctx.path(TRUTH_FILE)), truth)
    ctx.summary.update(primitives=len(scene.primitives), scans=len(poses))


def _scan_inputs(ctx: RunContext):
    io = ctx.config.io
    if io.scan_paths:
        scan_paths, label_paths = list(io.scan_paths), list(io.label_paths)
        poses_path = io.poses_path
    else:
        scan_paths = sorted(glob.glob(ctx.path(os.path.join("scans", "*.bin"))))
        label_paths = sorted(glob.glob(ctx.path(os.path.join("labels", "*.label"))))
        poses_path = ctx.path(POSES_FILE) if os.path.exists(ctx.path(POSES_FILE)) else ""
    if not scan_paths:
        raise DataError(f"no scans found (set io.scan_paths or run `synth` into {ctx.out_dir})")
    if label_paths and len(label_paths) != len(scan_paths):
        raise DataError(f"{len(label_paths)} label files for {len(scan_paths)} scans")
    poses = load_poses(poses_path) if poses_path else [Pose.identity()] * len(scan_paths)
    if len(poses) < len(scan_paths):
        raise DataError(f"{len(poses)} poses for {len(scan_paths)} scans")
    return scan_paths, label_paths, poses


def cmd_sample(ctx: RunContext) -> None:
    """Accumulate scans into targets and draw the free-space / consistency samples"""
    s, seed = ctx.config.sampling, ctx.config.training.seed
    scan_paths, label_paths, poses = _scan_inputs(ctx)

    scans, dynamic = [], []
    for k, path in enumerate(scan_paths):
        cloud = load_scan(path)
        labels = load_labels(label_paths[k], len(cloud), ctx.class_map) if label_paths else None
        scans.append((cloud, poses[k], labels))
        dynamic.append(load_dynamic_flags(label_paths[k], len(cloud)) if label_paths else None)

    base = accumulate(scans, ctx.extent, s.voxel_edge, dynamic, stream_rng(seed, "accumulate"), s.max_per_voxel)
    targets = sample_targets(base, s.decay_scale, s.consistency_count, stream_rng(seed, "sample"))
    save_target_set(ctx.produced(ctx.path(TARGETS_FILE)), targets)

    for kind, count in targets.counts().items():
        print(f"  {kind:<20} {count}")
    ctx.summary.update(targets=len(targets), **{k: v for k, v in targets.meta.items()})


def cmd_fit(ctx: RunContext, resume: bool = False) -> None:
    targets = load_target_set(ctx.require(TARGETS_FILE, "sample"))
    previous = load_checkpoint(ctx.path(CHECKPOINT_FILE)) if resume and os.path.exists(ctx.path(CHECKPOINT_FILE)) else None
    if previous is not None:
        print(f"  resuming from step {previous.step}")
    ckpt, metrics = fit(targets, ctx.config, ctx.class_map, resume=previous, out_dir=ctx.out_dir)
    save_checkpoint(ctx.produced(ctx.path(CHECKPOINT_FILE)), ckpt)
    metrics.to_csv(ctx.produced(ctx.path(METRICS_LOG)), index=False)

    ctx.summary["steps"] = ckpt.step
    if len(metrics):
        last = metrics.iloc[-1]
        ctx.summary["objective"] = f"{last['objective']:.6f}"
        print(f"  step {int(last['step'])}: objective {last['objective']:.4f} "
              f"(S {last['semantic_mean']:.4f}, G {last['geometric_mean']:.4f}, C {last['consistency_mean']:.4f})")


def _grid_spec(ctx: RunContext):
    edge = ctx.config.extraction.voxel_edge
    return ctx.extent.min_corner, edge, ctx.extent.voxel_dims(edge)


def cmd_voxelize(ctx: RunContext) -> None:
    ckpt = load_checkpoint(ctx.require(CHECKPOINT_FILE, "fit"))
    origin, edge, dims = _grid_spec(ctx)
    grid = voxelize(ckpt, origin, edge, dims, ctx.config.extraction.theta_empty)
    save_voxel_grid(ctx.produced(ctx.path(VOXELS_FILE)), grid)

    summary = voxel_summary(grid, ckpt.class_map)
    with open(ctx.produced(ctx.path("voxels_summary.txt")), "w") as f:
        f.write(summary.to_string(index=False) + "\n")
    ctx.summary["occupied_voxels"] = int(grid.occupied.sum())


def cmd_mesh(ctx: RunContext) -> None:
    e = ctx.config.extraction
    ckpt = load_checkpoint(ctx.require(CHECKPOINT_FILE, "fit"))
    coarse_edge = ckpt.grid.config.level_edge(0) / e.mise_cells_per_coarsest
    coarse = np.maximum(np.ceil(ctx.extent.size / coarse_edge - 1e-9).astype(int), 1)
    final = coarse * 2 ** e.mise_levels

    mesh = mise_mesh(ckpt, ctx.extent.min_corner, ctx.extent.max_corner, e.theta_free, coarse, final)
    mesh = refine_and_color(ckpt, mesh, e.theta_free, e.refine_iters, e.refine_step)
    write_ply(ctx.produced(ctx.path(MESH_FILE)), mesh, ckpt.class_map)

    print(f"  {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    print(f"  evaluated {mesh.meta['evaluations']} of {mesh.meta['dense_evaluations']} lattice points")
    ctx.summary.update(faces=len(mesh.faces), evaluations=mesh.meta["evaluations"])


def cmd_ground_image(ctx: RunContext) -> None:
    e = ctx.config.extraction
    ckpt = load_checkpoint(ctx.require(CHECKPOINT_FILE, "fit"))
    targets = load_target_set(ctx.require(TARGETS_FILE, "sample"))
    occupied = np.isin(targets.kinds, (TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED))
    ground_ids = [ckpt.class_map.class_id(name) for name in e.ground_classes]

    bounds = (ctx.extent.min_corner[:2], ctx.extent.max_corner[:2])
    image = ground_image(ckpt, targets.positions[occupied], ground_ids, e.ground_cell, bounds)
    path = ctx.produced(ctx.path(GROUND_FILE))
    ctx.produced(write_ground_image(path, image, ckpt.class_map))
    ctx.summary["ground_pixels"] = int((image.labels >= 0).sum())


def _ignore_mask(ctx: RunContext, truth):
    if ctx.config.extraction.ignore_unseen and os.path.exists(ctx.path(TARGETS_FILE)):
        return unseen_mask(load_target_set(ctx.path(TARGETS_FILE)), truth)
    return None


def cmd_eval(ctx: RunContext) -> None:
    e, seed = ctx.config.extraction, ctx.config.training.seed
    ckpt = load_checkpoint(ctx.require(CHECKPOINT_FILE, "fit"))
    truth = load_voxel_grid(ctx.require(TRUTH_FILE, "synth"))

    pred = voxelize(ckpt, truth.origin, truth.edge, truth.dims, e.theta_empty)
    report = voxel_metrics(pred, truth, _ignore_mask(ctx, truth), ckpt.class_map.n_classes, ckpt.class_map)
    jsd_points = ctx.extent.min_corner + stream_rng(seed, "jsd").random((JSD_POINTS, 3)) * ctx.extent.size
    report.extra["mean_jsd"] = consistency_report(ckpt, jsd_points)
    for path in write_metrics(ctx.path("metrics_voxels"), report):
        ctx.produced(path)
    print(report.text())

    if os.path.exists(ctx.path(TARGETS_FILE)):
        targets = load_target_set(ctx.path(TARGETS_FILE))
        semantic = targets.kinds == TargetKind.SEMANTIC
        if np.any(semantic):
            points = point_segmentation_metrics(ckpt, targets.positions[semantic], targets.class_ids[semantic],
                                                ckpt.class_map)
            for path in write_metrics(ctx.path("metrics_points"), points):
                ctx.produced(path)
            ctx.summary["point_miou"] = f"{points.miou:.6f}"

    ctx.summary.update(occupied_iou=f"{report.occupied_iou:.6f}", miou=f"{report.miou:.6f}")


def cmd_pr_sweep(ctx: RunContext) -> None:
    e = ctx.config.extraction
    ckpt = load_checkpoint(ctx.require(CHECKPOINT_FILE, "fit"))
    truth = load_voxel_grid(ctx.require(TRUTH_FILE, "synth"))
    ignore = _ignore_mask(ctx, truth)

    curve, best = pr_sweep(ckpt, truth, sorted(e.pr_thetas), ignore, ckpt.class_map.n_classes, ckpt.class_map)
    pred = voxelize(ckpt, truth.origin, truth.edge, truth.dims, best)
    report = voxel_metrics(pred, truth, ignore, ckpt.class_map.n_classes, ckpt.class_map)
    report.extra["theta_empty"] = best
    for path in write_metrics(ctx.path("pr"), report, curve):
        ctx.produced(path)

    print(curve.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"\n  best theta_empty: {best} (occupied IoU {report.occupied_iou:.4f})")
    ctx.summary.update(best_theta=best, occupied_iou=f"{report.occupied_iou:.6f}")


def cmd_validate_config(ctx: RunContext) -> None:
    report = validate_config(ctx.config)
    for line in report.lines():
        print(line)
    ctx.summary.update(errors=len(report.errors), warnings=len(report.warnings))
    if not report.ok:
        raise ConfigError(f"configuration has {len(report.errors)} error(s)", report.errors)
    print(f"✓ Configuration valid ({len(report.warnings)} warning(s))")


# ======================================================= #
# Entry point
# ======================================================= #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene_completion",
                                     description="Semantic scene completion with local deep implicit functions")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="section.key=value configuration file")
        cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override one configuration value (repeatable)")
        cmd.add_argument("--threads", type=int, default=0, help="numeric thread count (0 = library default)")
        cmd.add_argument("--out", default="out", help="artifact directory")
        cmd.add_argument("-v", "--verbose", action="store_true")
        if name == "fit":
            cmd.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    return parser


def run(argv=None) -> int:
    """Parse arguments, run one command and return its exit status"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = datetime.now()

    banner(f"scene_completion {args.command}")
    ctx = None
    try:
        config = load_config(args.config, args.overrides)
        ctx = RunContext(args.command, config, args.out, default_class_map(), args.threads)
        print(f"Config: {args.config or '(defaults)'}  |  Output: {args.out}  |  Seed: {config.training.seed}")
        os.makedirs(args.out, exist_ok=True)

        if args.command != "validate-config":
            report = validate_config(config)
            if not report.ok:
                for line in report.lines():
                    print(line)
                raise ConfigError(f"configuration has {len(report.errors)} error(s)", report.errors)
            ctx.class_map = _class_map(config)

        handler = {
            "synth": cmd_synth,
            "sample": cmd_sample,
            "fit": lambda c: cmd_fit(c, args.resume),
            "voxelize": cmd_voxelize,
            "mesh": cmd_mesh,
            "ground-image": cmd_ground_image,
            "eval": cmd_eval,
            "pr-sweep": cmd_pr_sweep,
            "validate-config": cmd_validate_config,
        }[args.command]
        handler(ctx)
    except SceneCompletionError as e:
        print(f"\n✗ {e}")
        if ctx is not None:
            write_manifest(ctx, "failed", started, str(e))
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"\n✗ Unexpected error: {e}")
        if ctx is not None:
            write_manifest(ctx, "failed", started, str(e))
        return 1

    manifest = write_manifest(ctx, "ok", started)
    duration = datetime.now() - started
    print("\n" + "=" * 60)
    print(f"✓ {args.command} finished in {duration}")
    print(f"  Manifest: {manifest}")
    print("=" * 60)
    return 0


def main() -> None:
    sys.exit(run())
