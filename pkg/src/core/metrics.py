"""
Occupancy evaluation.

A confusion matrix over the N + 1 labels (known classes plus empty) drives
per-class IoU, mIoU and the occupied-vs-empty IoU. Evaluation can be
restricted to a visibility mask and broken down by horizontal distance from
the ego position.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.config import get_config
from src.core.exceptions import ConfigError, DataError, DimensionMismatchError
from src.core.models import OccupancyGrid, Point3, VoxelGridSpec
from src.utils.file_utils import write_csv, write_json
from src.utils.parallel import OrderedChunkExecutor, chunk_ranges


class UndefinedPolicy(Enum):
    """How classes with TP + FP + FN = 0 enter the mean."""
    EXCLUDE = "exclude"
    ZERO = "zero"
    ONE = "one"


@dataclass(eq=False)
class ConfusionMatrix:
    """(N+1) x (N+1) counts, rows = truth, columns = prediction."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError("confusion matrix must be square", {"shape": counts.shape})
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise DataError("confusion counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise DataError("confusion counts must be non-negative")
        self.counts = counts

    @classmethod
    def zeros(cls, class_count: int) -> 'ConfusionMatrix':
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @classmethod
    def from_counts(cls, counts: Sequence[Sequence[int]]) -> 'ConfusionMatrix':
        return cls(np.array(counts, dtype=np.int64))

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        DimensionMismatchError.check("left", self.counts.shape, "right", other.counts.shape)
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - np.diag(self.counts)

    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def to_dict(self) -> Dict[str, Any]:
        return {"counts": self.counts.tolist(), "total": self.total}


def accumulate(pred: OccupancyGrid, truth: OccupancyGrid, visible: Optional[np.ndarray] = None,
               workers: Optional[int] = None, chunk_size: Optional[int] = None) -> ConfusionMatrix:
    """
    Confusion counts over all voxels, or only those with visible = 1.

    Voxels are processed in fixed-size chunks whose integer counts are summed,
    so the result does not depend on the worker count.
    """
    DimensionMismatchError.check("pred", pred.shape, "truth", truth.shape)
    if pred.num_classes != truth.num_classes:
        raise DataError("pred and truth use different class sets",
                        {"pred": pred.num_classes, "truth": truth.num_classes})
    class_count = truth.class_count
    truth_flat = truth.labels.reshape(-1)
    pred_flat = pred.labels.reshape(-1)
    if visible is not None:
        visible = np.asarray(visible).astype(bool)
        DimensionMismatchError.check("visible", visible.shape, "truth", truth.shape)
        keep = visible.reshape(-1)
        truth_flat, pred_flat = truth_flat[keep], pred_flat[keep]

    pairs = truth_flat * class_count + pred_flat
    size = chunk_size or get_config().processing.CHUNK_SIZE

    def count(bounds: Tuple[int, int]) -> np.ndarray:
        start, stop = bounds
        return np.bincount(pairs[start:stop], minlength=class_count * class_count)

    total = np.zeros(class_count * class_count, dtype=np.int64)
    for part in OrderedChunkExecutor(workers).map(count, chunk_ranges(len(pairs), size)):
        total += part
    return ConfusionMatrix(total.reshape(class_count, class_count))


def class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    """IoU of every label (empty included); None where TP + FP + FN = 0."""
    tp, fp, fn = cm.true_positives(), cm.false_positives(), cm.false_negatives()
    scores: List[Optional[float]] = []
    for c in range(cm.class_count):
        denominator = int(tp[c] + fp[c] + fn[c])
        scores.append(None if denominator == 0 else int(tp[c]) / denominator)
    return scores


def miou(cm: ConfusionMatrix, include: Optional[Sequence[int]] = None,
         policy: UndefinedPolicy = UndefinedPolicy.EXCLUDE) -> Tuple[List[Optional[float]], Optional[float]]:
    """
    Per-class IoU for `include` (default: the known classes 0..N-1) and their mean.

    Returns:
        (IoUs in the order of include, mIoU). Undefined classes are None in
        the list; under EXCLUDE they are left out of the mean, which is None
        when nothing is defined.
    """
    policy = UndefinedPolicy(policy)
    if include is None:
        include = range(cm.class_count - 1)
    include = list(include)
    if not include:
        raise ConfigError("include must name at least one class")
    if min(include) < 0 or max(include) >= cm.class_count:
        raise ConfigError("include holds an unknown class", {"include": include})

    all_scores = class_iou(cm)
    scores = [all_scores[c] for c in include]
    values = []
    for score in scores:
        if score is not None:
            values.append(score)
        elif policy is UndefinedPolicy.ZERO:
            values.append(0.0)
        elif policy is UndefinedPolicy.ONE:
            values.append(1.0)
    mean = math.fsum(values) / len(values) if values else None
    return scores, mean


def binary_iou(cm: ConfusionMatrix) -> Optional[float]:
    """Occupied-vs-empty IoU; None when neither side has an occupied voxel."""
    empty = cm.class_count - 1
    tp = int(cm.counts[:empty, :empty].sum())
    fp = int(cm.counts[empty, :empty].sum())
    fn = int(cm.counts[:empty, empty].sum())
    denominator = tp + fp + fn
    return None if denominator == 0 else tp / denominator


@dataclass
class BinResult:
    """Metrics of one distance ring [lower, upper)."""
    lower: float
    upper: float
    voxels: int
    iou: Optional[float]
    miou: Optional[float]
    per_class: List[Optional[float]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "voxels": self.voxels,
            "iou": self.iou,
            "miou": self.miou,
            "per_class": self.per_class,
        }


def horizontal_distance(grid: VoxelGridSpec, ego: Point3) -> np.ndarray:
    centers = grid.voxel_centers()
    return np.hypot(centers[..., 0] - ego.x, centers[..., 1] - ego.y)


def distance_binned_eval(pred: OccupancyGrid, truth: OccupancyGrid, ego: Point3, bins: Sequence[float],
                         grid: VoxelGridSpec, visible: Optional[np.ndarray] = None,
                         include: Optional[Sequence[int]] = None,
                         policy: UndefinedPolicy = UndefinedPolicy.EXCLUDE,
                         workers: Optional[int] = None) -> List[BinResult]:
    """
    Metrics per horizontal-distance ring around the ego position.

    Edges are right-open: [0, b1), [b1, b2), ...; voxels at or beyond the
    last edge are not evaluated.
    """
    edges = [float(b) for b in bins]
    if not edges or any(b <= 0 for b in edges) or edges != sorted(set(edges)):
        raise ConfigError("distance bins must be positive and strictly increasing", {"bins": edges})
    DimensionMismatchError.check("grid", grid.shape, "truth", truth.shape)

    distance = horizontal_distance(grid, ego)
    base = np.ones(truth.shape, dtype=bool) if visible is None else np.asarray(visible).astype(bool)
    results = []
    lower = 0.0
    for upper in edges:
        ring = base & (distance >= lower) & (distance < upper)
        cm = accumulate(pred, truth, ring, workers=workers)
        per_class, mean = miou(cm, include, policy)
        results.append(BinResult(lower, upper, cm.total, binary_iou(cm), mean, per_class))
        lower = upper
    return results


@dataclass
class EvaluationReport:
    """Global and distance-binned occupancy metrics."""
    confusion: ConfusionMatrix
    include: List[int]
    per_class: List[Optional[float]]
    miou: Optional[float]
    binary_iou: Optional[float]
    visible_mask: bool
    policy: str
    bins: List[BinResult] = field(default_factory=list)

    def class_rows(self) -> List[Dict[str, Any]]:
        tp, fp, fn = (self.confusion.true_positives(), self.confusion.false_positives(),
                      self.confusion.false_negatives())
        return [
            {"class_id": c, "iou": score, "tp": int(tp[c]), "fp": int(fp[c]), "fn": int(fn[c])}
            for c, score in zip(self.include, self.per_class)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "binary_iou": self.binary_iou,
            "miou": self.miou,
            "classes": self.class_rows(),
            "voxels": self.confusion.total,
            "visible_mask": self.visible_mask,
            "undefined_policy": self.policy,
            "confusion": self.confusion.counts.tolist(),
            "bins": [b.to_dict() for b in self.bins],
        }

    def write(self, out_dir: Path, prefix: str = "metrics") -> List[Path]:
        """<prefix>.json, <prefix>_classes.csv and, with bins, <prefix>_bins.csv."""
        out_dir = Path(out_dir)
        paths = [
            write_json(out_dir / f"{prefix}.json", self.to_dict()),
            write_csv(out_dir / f"{prefix}_classes.csv", self.class_rows(), ["class_id", "iou", "tp", "fp", "fn"]),
        ]
        if self.bins:
            rows = [{k: v for k, v in b.to_dict().items() if k != "per_class"} for b in self.bins]
            paths.append(write_csv(out_dir / f"{prefix}_bins.csv", rows, ["lower", "upper", "voxels", "iou", "miou"]))
        return paths


def evaluate(pred: OccupancyGrid, truth: OccupancyGrid, visible: Optional[np.ndarray] = None,
             include: Optional[Sequence[int]] = None, policy: UndefinedPolicy = UndefinedPolicy.EXCLUDE,
             grid: Optional[VoxelGridSpec] = None, ego: Optional[Point3] = None,
             bins: Optional[Sequence[float]] = None, workers: Optional[int] = None) -> EvaluationReport:
    """Global metrics plus, when grid, ego and bins are given, the distance breakdown."""
    policy = UndefinedPolicy(policy)
    cm = accumulate(pred, truth, visible, workers=workers)
    include = list(range(truth.num_classes)) if include is None else list(include)
    per_class, mean = miou(cm, include, policy)
    binned = []
    if grid is not None and ego is not None and bins:
        binned = distance_binned_eval(pred, truth, ego, bins, grid, visible, include, policy, workers)
    return EvaluationReport(cm, include, per_class, mean, binary_iou(cm), visible is not None,
                            policy.value, binned)
