"""
Occupancy-driven active distillation.

The fused BEV map and the camera BEV map are reduced to occupancy masks.
Cells occupied in both form the active region (AR); cells occupied only in
the fused map form the inactive region (IR). IR cells get the weight
rho * beta with rho = N_AR / N_IR, which gives both regions the same total
weight when alpha = beta.
"""

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from src.core.exceptions import ConfigError, DataError, DimensionMismatchError
from src.core.models import BevFeatureMap
from src.utils.file_utils import save_pgm


@dataclass(eq=False)
class OccupancyMask2D:
    """H x W binary occupancy."""
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DataError("occupancy mask must be 2D", {"ndim": bits.ndim})
        if bits.dtype != bool:
            if not np.all((bits == 0) | (bits == 1)):
                raise DataError("occupancy mask must be binary")
            bits = bits.astype(bool)
        self.bits = bits

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape


@dataclass(eq=False)
class DistillWeightMap:
    """Per-cell distillation weights and the scalars that produced them."""
    weights: np.ndarray
    alpha: float
    beta: float
    rho: float
    n_ar: int
    n_ir: int

    def region_totals(self) -> Tuple[Fraction, Fraction]:
        """Exact (sum over AR, sum over IR) of the weights."""
        ar_total = Fraction(self.alpha) * self.n_ar
        if self.n_ir == 0:
            return ar_total, Fraction(0)
        return ar_total, Fraction(self.beta) * Fraction(self.n_ar, self.n_ir) * self.n_ir

    def summary(self) -> Dict[str, float]:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "rho": self.rho,
            "n_ar": self.n_ar,
            "n_ir": self.n_ir,
            "total_weight": float(self.weights.sum()),
        }


def occupancy_mask(f: BevFeatureMap, eps: float = 0.0) -> OccupancyMask2D:
    """Cells whose channel-wise L1 norm exceeds eps."""
    if eps < 0:
        raise ConfigError("eps must be non-negative", {"eps": eps})
    return OccupancyMask2D(np.abs(f.features).sum(axis=0) > eps)


def region_split(m_fused: OccupancyMask2D, m_img: OccupancyMask2D) -> Tuple[OccupancyMask2D, OccupancyMask2D]:
    """(AR, IR) = (fused and img, fused and not img)."""
    DimensionMismatchError.check("m_fused", m_fused.shape, "m_img", m_img.shape)
    ar = m_fused.bits & m_img.bits
    ir = m_fused.bits & ~m_img.bits
    return OccupancyMask2D(ar), OccupancyMask2D(ir)


def distill_weights(ar: OccupancyMask2D, ir: OccupancyMask2D, alpha: float = 1.0, beta: float = 1.0) -> DistillWeightMap:
    """
    Weight map: alpha on AR, (N_AR / N_IR) * beta on IR, 0 elsewhere.

    With an empty IR the IR term is dropped and rho is recorded as 0.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be non-negative", {"alpha": alpha, "beta": beta})
    DimensionMismatchError.check("ar", ar.shape, "ir", ir.shape)
    if np.any(ar.bits & ir.bits):
        raise DataError("AR and IR must be disjoint")

    n_ar, n_ir = ar.count, ir.count
    rho = n_ar / n_ir if n_ir > 0 else 0.0
    weights = np.zeros(ar.shape)
    weights[ar.bits] = alpha
    if n_ir > 0:
        weights[ir.bits] = rho * beta
    return DistillWeightMap(weights, float(alpha), float(beta), rho, n_ar, n_ir)


def distill_loss(fused: BevFeatureMap, camera: BevFeatureMap, w: DistillWeightMap,
                 normalize: bool = False) -> Tuple[float, np.ndarray]:
    """
    Weighted feature imitation loss and its gradient w.r.t. the camera map.

    loss = sum_c sum_ij W_ij (F_fuse - F_C)^2, grad = -2 W (F_fuse - F_C).
    With normalize, both are divided by sum W (left unchanged when sum W = 0).
    """
    DimensionMismatchError.check("fused", fused.features.shape, "camera", camera.features.shape)
    DimensionMismatchError.check("weights", w.weights.shape, "features", fused.spatial_shape)

    diff = fused.features - camera.features
    loss = float(np.sum(w.weights[None, :, :] * diff * diff))
    grad = -2.0 * w.weights[None, :, :] * diff
    if normalize:
        total = float(w.weights.sum())
        if total > 0:
            loss /= total
            grad = grad / total
    return loss, grad


def write_weight_pgm(w: DistillWeightMap, path: Path) -> Path:
    """Dump the weight map as an 8-bit PGM (brightest = largest weight)."""
    return save_pgm(path, w.weights)
