"""
Training losses with analytic gradients.

Cross-entropy (plain and masked), the Lovasz-softmax surrogate of the
Jaccard index, the point-supervision loss combining the two, and the
weighted total over the five training terms. Logits and probabilities are
laid out with samples along the first axis and classes along the second,
except lovasz_softmax which takes K x n probabilities.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from src.core.exceptions import ConfigError, DimensionMismatchError, LossInputError

LOSS_COMPONENTS = ("depth", "seg", "pts", "mask_occ", "distill")
PROBABILITY_TOL = 1e-6


@dataclass
class LossWeights:
    """Per-term weights of the total loss."""
    lambda_depth: float = 0.05
    lambda_seg: float = 0.5
    lambda_pts: float = 1.0
    lambda_mask_occ: float = 1.0
    lambda_kl: float = 1.0

    def validate(self) -> 'LossWeights':
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError("loss weights must be finite and non-negative", {name: value})
        return self

    def by_component(self) -> Dict[str, float]:
        return {
            "depth": self.lambda_depth,
            "seg": self.lambda_seg,
            "pts": self.lambda_pts,
            "mask_occ": self.lambda_mask_occ,
            "distill": self.lambda_kl,
        }


def _check_logits(logits: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise LossInputError("logits must be an n x K array", {"ndim": logits.ndim})
    if logits.shape[1] < 2:
        raise LossInputError("cross-entropy needs at least two classes", {"K": logits.shape[1]})
    targets = targets.reshape(-1)
    if len(targets) != len(logits):
        raise DimensionMismatchError("logits and targets must have the same length",
                                     {"logits": len(logits), "targets": len(targets)})
    if not np.all(np.isfinite(logits)):
        raise LossInputError("logits must be finite")
    if len(targets) and (not np.issubdtype(targets.dtype, np.integer) and
                         not np.all(np.equal(np.mod(targets, 1), 0))):
        raise LossInputError("targets must be integer class ids")
    targets = targets.astype(np.int64)
    if len(targets) and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise LossInputError("target class out of range",
                             {"min": int(targets.min()), "max": int(targets.max()), "K": logits.shape[1]})
    return logits, targets


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean negative log-softmax of the target class.

    Args:
        logits: n x K scores
        targets: n class ids in 0..K-1

    Returns:
        (loss, d loss / d logits). An empty batch gives (0.0, empty gradient).

    Raises:
        LossInputError: K < 2 or a target outside 0..K-1
    """
    logits, targets = _check_logits(logits, targets)
    count = len(targets)
    if count == 0:
        return 0.0, np.zeros_like(logits)

    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(count)
    loss = float(-log_probs[rows, targets].mean())

    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    return loss, grad / count


def masked_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy averaged over samples with mask = 1; zero gradient elsewhere."""
    logits, targets = _check_logits(logits, targets)
    mask = np.asarray(mask).reshape(-1).astype(bool)
    DimensionMismatchError.check("mask", mask.shape, "targets", targets.shape)

    grad = np.zeros_like(logits)
    if not mask.any():
        return 0.0, grad
    loss, selected = cross_entropy(logits[mask], targets[mask])
    grad[mask] = selected
    return loss, grad


def lovasz_grad(sorted_fg: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a ground-truth indicator sorted by decreasing error."""
    sorted_fg = np.asarray(sorted_fg, dtype=np.float64)
    gts = sorted_fg.sum()
    intersection = gts - np.cumsum(sorted_fg)
    union = gts + np.cumsum(1.0 - sorted_fg)
    jaccard = 1.0 - intersection / union
    if len(jaccard) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _check_probabilities(probas: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    probas = np.asarray(probas, dtype=np.float64)
    if probas.ndim != 2:
        raise LossInputError("probabilities must be a K x n array", {"ndim": probas.ndim})
    targets = np.asarray(targets).reshape(-1).astype(np.int64)
    if len(targets) != probas.shape[1]:
        raise DimensionMismatchError("probabilities and targets disagree on n",
                                     {"probas": probas.shape, "targets": len(targets)})
    if probas.size and (not np.all(np.isfinite(probas)) or probas.min() < -PROBABILITY_TOL
                        or probas.max() > 1.0 + PROBABILITY_TOL):
        raise LossInputError("probabilities must lie in [0, 1]")
    if probas.size and np.max(np.abs(probas.sum(axis=0) - 1.0)) > PROBABILITY_TOL:
        raise LossInputError("probability columns must sum to 1")
    if len(targets) and (targets.min() < 0 or targets.max() >= probas.shape[0]):
        raise LossInputError("target class out of range", {"K": probas.shape[0]})
    return probas, targets


def lovasz_softmax(probas: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Lovasz-softmax loss averaged over the classes present in the targets.

    For each present class the absolute errors |fg - p| are sorted in
    decreasing order and dotted with the Jaccard increments of the sorted
    ground truth.

    Args:
        probas: K x n class probabilities (columns sum to 1)
        targets: n class ids

    Returns:
        (loss, d loss / d probas) with the gradient shaped K x n
    """
    probas, targets = _check_probabilities(probas, targets)
    grad = np.zeros_like(probas)
    present = [c for c in range(probas.shape[0]) if np.any(targets == c)]
    if not present:
        return 0.0, grad

    losses = []
    for c in present:
        fg = (targets == c).astype(np.float64)
        errors = np.abs(fg - probas[c])
        order = np.argsort(-errors, kind="stable")
        increments = lovasz_grad(fg[order])
        losses.append(float(np.dot(errors[order], increments)))
        grad[c, order] = increments * np.where(fg[order] > 0, -1.0, 1.0)
    return math.fsum(losses) / len(present), grad / len(present)


def _softmax_backward(probas: np.ndarray, grad_probas: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. n x K probabilities back to the logits."""
    inner = np.sum(grad_probas * probas, axis=1, keepdims=True)
    return probas * (grad_probas - inner)


def pts_loss(logits: np.ndarray, targets: np.ndarray, lovasz_weight: float = 1.0,
             ce_weight: float = 1.0) -> Tuple[Dict[str, float], np.ndarray]:
    """
    Point-supervised occupancy loss: Lovasz-softmax plus cross-entropy.

    Args:
        logits: n x K scores at voxels that contain LiDAR points
        targets: n class ids
        lovasz_weight, ce_weight: mixing weights (1:1 by default)

    Returns:
        ({"pts_lovasz", "pts_ce", "pts"}, d pts / d logits)
    """
    if lovasz_weight < 0 or ce_weight < 0:
        raise ConfigError("point-loss mixing weights must be non-negative",
                          {"lovasz": lovasz_weight, "ce": ce_weight})
    logits, targets = _check_logits(logits, targets)
    ce, ce_grad = cross_entropy(logits, targets)
    if len(targets) == 0:
        return {"pts_lovasz": 0.0, "pts_ce": 0.0, "pts": 0.0}, np.zeros_like(logits)

    probas = softmax(logits, axis=1)
    lovasz, lovasz_probas_grad = lovasz_softmax(probas.T, targets)
    lovasz_grad_logits = _softmax_backward(probas, lovasz_probas_grad.T)

    components = {
        "pts_lovasz": lovasz,
        "pts_ce": ce,
        "pts": math.fsum([lovasz_weight * lovasz, ce_weight * ce]),
    }
    return components, lovasz_weight * lovasz_grad_logits + ce_weight * ce_grad


def total_loss(components: Mapping[str, float], w: LossWeights) -> float:
    """
    Weighted sum of the depth, seg, pts, mask_occ and distill components.

    Missing components count as 0; unknown names are rejected.
    """
    unknown = set(components) - set(LOSS_COMPONENTS)
    if unknown:
        raise LossInputError(f"Unknown loss components: {sorted(unknown)}")
    weights = w.by_component()
    terms = []
    for name in LOSS_COMPONENTS:
        value = float(components.get(name, 0.0))
        if not math.isfinite(value):
            raise LossInputError("loss components must be finite", {name: value})
        terms.append(weights[name] * value)
    return math.fsum(terms)


@dataclass
class LossReport:
    """Loss components of one run and their weighted total."""
    components: Dict[str, float]
    weights: LossWeights
    details: Dict[str, float] = field(default_factory=dict)
    total: Optional[float] = None

    def __post_init__(self):
        if self.total is None:
            self.total = total_loss(self.components, self.weights)

    def to_dict(self) -> Dict[str, object]:
        return {
            "components": dict(self.components),
            "details": dict(self.details),
            "weights": asdict(self.weights),
            "total": self.total,
        }
