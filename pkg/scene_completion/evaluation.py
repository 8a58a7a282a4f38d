"""
Evaluation
Confusion matrices, per-class IoU / mIoU, occupied-class precision-recall and threshold sweeps
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ArgumentError
from .extraction import VoxelGrid, corner_probabilities, labels_from_corners, segment_points
from .field import as_field
from .mapping import FREE, UNLABELED, ClassMap

logger = logging.getLogger(__name__)


# ======================================================= #
# Confusion matrix
# ======================================================= #
@dataclass
class ConfusionMatrix:
    """(N+1) x (N+1) counts, rows = ground truth, columns = prediction, index 0 = free space"""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ArgumentError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ArgumentError("confusion counts must be >= 0")

    @classmethod
    def from_labels(cls, truth, pred, n_classes: int, ignore=None) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ArgumentError(f"{len(pred)} predictions for {len(truth)} ground-truth labels")
        keep = np.ones(len(truth), dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool).reshape(-1)
        k = n_classes + 1
        truth, pred = truth[keep], pred[keep]
        if np.any((truth < 0) | (truth >= k) | (pred < 0) | (pred >= k)):
            raise ArgumentError(f"labels must be in 0..{n_classes}")
        counts = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def class_counts(self) -> pd.DataFrame:
        """TP / FP / FN of every semantic class (1..N)"""
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return pd.DataFrame({"class_id": np.arange(1, self.n_classes + 1),
                             "tp": tp[1:], "fp": fp[1:], "fn": fn[1:]})

    def per_class_iou(self) -> np.ndarray:
        """IoU of classes 1..N; NaN for classes absent from both truth and prediction"""
        c = self.class_counts()
        denom = (c["tp"] + c["fp"] + c["fn"]).to_numpy(dtype=np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, c["tp"].to_numpy() / denom, np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        return float(np.nanmean(iou)) if np.any(np.isfinite(iou)) else float("nan")

    def occupied_counts(self) -> Tuple[int, int, int]:
        """TP / FP / FN of the binarized occupied-vs-free problem"""
        tp = int(self.counts[1:, 1:].sum())
        fp = int(self.counts[FREE, 1:].sum())
        fn = int(self.counts[1:, FREE].sum())
        return tp, fp, fn

    def occupied_scores(self) -> Dict[str, float]:
        tp, fp, fn = self.occupied_counts()

        def ratio(a, b):
            return a / b if b else float("nan")

        return {"precision": ratio(tp, tp + fp), "recall": ratio(tp, tp + fn), "occupied_iou": ratio(tp, tp + fp + fn)}


# ======================================================= #
# Reports
# ======================================================= #
@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    class_names: List[str]
    include_occupied: bool = True
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def per_class_iou(self) -> Dict[str, float]:
        return dict(zip(self.class_names, self.confusion.per_class_iou().tolist()))

    @property
    def miou(self) -> float:
        return self.confusion.miou()

    @property
    def occupied_iou(self) -> float:
        return self.confusion.occupied_scores()["occupied_iou"]

    @property
    def precision(self) -> float:
        return self.confusion.occupied_scores()["precision"]

    @property
    def recall(self) -> float:
        return self.confusion.occupied_scores()["recall"]

    def to_frame(self) -> pd.DataFrame:
        frame = self.confusion.class_counts()
        frame.insert(1, "name", self.class_names)
        frame["iou"] = self.confusion.per_class_iou()
        return frame

    def to_key_values(self) -> Dict[str, str]:
        def fmt(value):
            return "n/a" if value is None or not np.isfinite(value) else f"{value:.6f}"

        values = {"evaluated": str(self.confusion.total), "miou": fmt(self.miou)}
        if self.include_occupied:
            values.update({k: fmt(v) for k, v in self.confusion.occupied_scores().items()})
        values.update({f"iou.{name}": fmt(v) for name, v in self.per_class_iou.items()})
        values.update({k: fmt(v) if isinstance(v, float) else str(v) for k, v in self.extra.items()})
        return values

    def text(self) -> str:
        lines = ["=" * 60]
        for key, value in self.to_key_values().items():
            if not key.startswith("iou."):
                lines.append(f"{key:<20} {value}")
        lines.append("-" * 60)
        frame = self.to_frame()
        frame["iou"] = [("n/a" if not np.isfinite(v) else f"{v:.4f}") for v in frame["iou"]]
        lines.append(frame.to_string(index=False))
        lines.append("=" * 60)
        return "\n".join(lines)


def _names(class_map: ClassMap, n_classes: int) -> List[str]:
    if class_map is not None and class_map.n_classes == n_classes:
        return list(class_map.names)
    return [f"class-{i}" for i in range(1, n_classes + 1)]


# ======================================================= #
# Voxel metrics
# ======================================================= #
def voxel_metrics(pred: VoxelGrid, truth: VoxelGrid, ignore=None, n_classes: int = None,
                  class_map: ClassMap = None) -> MetricsReport:
    """
    Per-class IoU, mIoU, occupied IoU and occupied precision/recall of a predicted voxel grid

    Args:
        pred, truth: grids with identical origin, edge and dims
        ignore: boolean volume of voxels excluded from every count (e.g. unseen voxels)
        n_classes: N (defaults to the class map, else the largest label present)
    """
    if not pred.same_spec(truth):
        raise ArgumentError(f"grid mismatch: prediction {pred.dims}@{pred.edge} vs truth {truth.dims}@{truth.edge}")
    if ignore is not None and np.shape(ignore) != truth.dims:
        raise ArgumentError(f"ignore mask of shape {np.shape(ignore)} for grid dims {truth.dims}")
    if n_classes is None:
        n_classes = class_map.n_classes if class_map else int(max(pred.labels.max(), truth.labels.max(), 1))
    confusion = ConfusionMatrix.from_labels(truth.labels, pred.labels, n_classes, ignore)
    return MetricsReport(confusion, _names(class_map, n_classes))


def unseen_mask(targets, grid: VoxelGrid) -> np.ndarray:
    """Voxels of `grid` whose center lies in an unseen voxel of the accumulation"""
    if not len(targets.unseen_voxels):
        return np.zeros(grid.dims, dtype=bool)
    mask = targets.voxel_mask(targets.unseen_voxels)
    return targets.in_voxels(grid.centers(), mask).reshape(grid.dims)


def pr_sweep(source, truth: VoxelGrid, thetas: Sequence[float], ignore=None, n_classes: int = None,
             class_map: ClassMap = None) -> Tuple[pd.DataFrame, float]:
    """
    Precision / recall / IoU of the occupied class across empty-voxel thresholds

    Corner probabilities are evaluated once and thresholded per theta.

    Returns:
        (frame with columns theta, precision, recall, occupied_iou, miou; theta with the highest occupied IoU)
    """
    thetas = [float(t) for t in thetas]
    if not thetas or any(not 0.0 < t < 1.0 for t in thetas):
        raise ArgumentError(f"thetas must be non-empty and in (0, 1), got {thetas}")
    if thetas != sorted(thetas):
        raise ArgumentError("thetas must be sorted ascending")
    f = as_field(source)
    n_classes = n_classes or f.n_classes
    probs = corner_probabilities(f, truth.origin, truth.edge, truth.dims)

    rows = []
    for theta in thetas:
        pred = truth.with_labels(labels_from_corners(probs, theta))
        report = voxel_metrics(pred, truth, ignore, n_classes, class_map)
        rows.append({"theta": theta, "precision": report.precision, "recall": report.recall,
                     "occupied_iou": report.occupied_iou, "miou": report.miou})
        logger.debug("theta %.4f: occupied IoU %.4f", theta, report.occupied_iou)

    frame = pd.DataFrame(rows, columns=["theta", "precision", "recall", "occupied_iou", "miou"])
    iou = frame["occupied_iou"].fillna(-1.0).to_numpy()
    best = float(frame["theta"].iloc[int(np.argmax(iou))])
    return frame, best


# ======================================================= #
# Point metrics
# ======================================================= #
def point_segmentation_metrics(source, points, labels, class_map: ClassMap = None) -> MetricsReport:
    """Per-point semantic IoU of the non-free argmax over labeled points (UNLABELED points are skipped)"""
    f = as_field(source)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(points):
        raise ArgumentError(f"{len(labels)} labels for {len(points)} points")
    labeled = labels != UNLABELED
    pred = np.zeros(len(points), dtype=np.int64)
    if np.any(labeled):
        pred[labeled] = segment_points(f, points[labeled])
    confusion = ConfusionMatrix.from_labels(labels[labeled], pred[labeled], f.n_classes)
    return MetricsReport(confusion, _names(class_map, f.n_classes), include_occupied=False,
                         extra={"skipped_unlabeled": int((~labeled).sum())})


# ======================================================= #
# Output
# ======================================================= #
def write_metrics(prefix: str, report: MetricsReport = None, curve: pd.DataFrame = None) -> List[str]:
    """
    Writes `<prefix>.txt` (text table), `<prefix>.env` (key=value) and, with a curve, `<prefix>_curve.csv`

    Returns the written paths.
    """
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    written = []
    if report is not None:
        with open(prefix + ".txt", "w") as f:
            f.write(report.text() + "\n")
        with open(prefix + ".env", "w") as f:
            for key, value in report.to_key_values().items():
                f.write(f"{key}={value}\n")
        written += [prefix + ".txt", prefix + ".env"]
    if curve is not None:
        curve.to_csv(prefix + "_curve.csv", index=False, float_format="%.6f")
        written.append(prefix + "_curve.csv")
    return written
