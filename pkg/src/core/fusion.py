"""
Cross-modal BEV fusion.

The source map provides queries; the cross map provides keys and values.
Every BEV position attends to the k x k window centred at the same position
in the cross map (truncated at the borders, softmax over in-bounds
neighbours only). A per-channel sigmoid gate computed from the globally
pooled result then rescales the attended features.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from src.core.exceptions import ConfigError, DimensionMismatchError
from src.core.models import BevFeatureMap, FusionDirection
from src.utils.parallel import OrderedChunkExecutor, split_range


class ScaleBy(Enum):
    """Denominator of the attention logits: sqrt of the value or of the query dim."""
    VALUE = "value"
    QUERY = "query"


@dataclass(eq=False)
class AttentionParams:
    """Projections (m_s x q, m_c x q, m_c x v), relative bias (2k-1) x (2k-1) and window k."""
    query_proj: np.ndarray
    key_proj: np.ndarray
    value_proj: np.ndarray
    rel_bias: np.ndarray
    window: int

    def __post_init__(self):
        self.query_proj = np.asarray(self.query_proj, dtype=np.float64)
        self.key_proj = np.asarray(self.key_proj, dtype=np.float64)
        self.value_proj = np.asarray(self.value_proj, dtype=np.float64)
        self.rel_bias = np.asarray(self.rel_bias, dtype=np.float64)
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window k must be a positive odd integer", {"k": self.window})
        side = 2 * self.window - 1
        DimensionMismatchError.check("rel_bias", self.rel_bias.shape, "expected", (side, side))
        if self.query_proj.shape[1] != self.key_proj.shape[1]:
            raise DimensionMismatchError("query and key projections must share the q dimension",
                                         {"query": self.query_proj.shape, "key": self.key_proj.shape})
        if self.key_proj.shape[0] != self.value_proj.shape[0]:
            raise DimensionMismatchError("key and value projections must read the same cross channels",
                                         {"key": self.key_proj.shape, "value": self.value_proj.shape})
        for name in ("query_proj", "key_proj", "value_proj", "rel_bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"{name} must be finite")

    @property
    def q_dim(self) -> int:
        return self.query_proj.shape[1]

    @property
    def v_dim(self) -> int:
        return self.value_proj.shape[1]

    def bias(self, di: int, dj: int) -> float:
        """Relative bias of offset (di, dj)."""
        return float(self.rel_bias[di + self.window - 1, dj + self.window - 1])

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "query_proj": self.query_proj,
            "key_proj": self.key_proj,
            "value_proj": self.value_proj,
            "rel_bias": self.rel_bias,
            "window": np.array([self.window], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'AttentionParams':
        return cls(arrays["query_proj"], arrays["key_proj"], arrays["value_proj"],
                   arrays["rel_bias"], int(np.asarray(arrays["window"]).reshape(-1)[0]))


@dataclass(eq=False)
class GateParams:
    """1x1 convolution over channels (v x v) plus bias (v)."""
    gate_weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.gate_weights = np.asarray(self.gate_weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        channels = self.bias.shape[0]
        DimensionMismatchError.check("gate_weights", self.gate_weights.shape, "expected", (channels, channels))
        if not (np.all(np.isfinite(self.gate_weights)) and np.all(np.isfinite(self.bias))):
            raise ConfigError("gate parameters must be finite")

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"gate_weights": self.gate_weights, "bias": self.bias}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'GateParams':
        return cls(arrays["gate_weights"], arrays["bias"])


def window_offsets(k: int) -> List[Tuple[int, int]]:
    half = k // 2
    return [(di, dj) for di in range(-half, half + 1) for dj in range(-half, half + 1)]


def _project(features: np.ndarray, proj: np.ndarray, name: str) -> np.ndarray:
    if features.shape[0] != proj.shape[0]:
        raise DimensionMismatchError(f"{name} projection does not match the feature channels",
                                     {"channels": features.shape[0], "projection": proj.shape})
    return np.einsum('chw,cd->hwd', features, proj)


def _attend(source: BevFeatureMap, cross: BevFeatureMap, p: AttentionParams, scale_by: ScaleBy,
            workers: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    DimensionMismatchError.check("source", source.spatial_shape, "cross", cross.spatial_shape)
    scale_by = ScaleBy(scale_by)
    queries = _project(source.features, p.query_proj, "query")
    keys = _project(cross.features, p.key_proj, "key")
    values = _project(cross.features, p.value_proj, "value")

    height, width = source.spatial_shape
    half = p.window // 2
    offsets = window_offsets(p.window)
    keys_pad = np.pad(keys, ((half, half), (half, half), (0, 0)))
    values_pad = np.pad(values, ((half, half), (half, half), (0, 0)))
    inside_pad = np.pad(np.ones((height, width), dtype=bool), half)
    scale = np.sqrt(p.v_dim if scale_by is ScaleBy.VALUE else p.q_dim)

    def band(rows: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        start, stop = rows
        q = queries[start:stop]
        logits = np.full((len(offsets), stop - start, width), -np.inf)
        for o, (di, dj) in enumerate(offsets):
            window = (slice(start + half + di, stop + half + di), slice(half + dj, half + dj + width))
            score = (np.einsum('hwd,hwd->hw', q, keys_pad[window]) + p.bias(di, dj)) / scale
            logits[o] = np.where(inside_pad[window], score, -np.inf)
        peak = logits.max(axis=0, keepdims=True)
        weights = np.exp(logits - peak)
        weights /= weights.sum(axis=0, keepdims=True)

        out = np.zeros((stop - start, width, p.v_dim))
        for o, (di, dj) in enumerate(offsets):
            window = (slice(start + half + di, stop + half + di), slice(half + dj, half + dj + width))
            out += weights[o][..., None] * values_pad[window]
        return weights, out

    executor = OrderedChunkExecutor(workers)
    parts = executor.map(band, split_range(height, executor.max_workers))
    weights = np.concatenate([w for w, _ in parts], axis=1)
    out = np.concatenate([o for _, o in parts], axis=0)
    return weights, np.transpose(out, (2, 0, 1))


def window_attention_weights(source: BevFeatureMap, cross: BevFeatureMap, p: AttentionParams,
                             scale_by: ScaleBy = ScaleBy.VALUE, workers: Optional[int] = None) -> np.ndarray:
    """Attention weights (k*k x H x W), offsets in row-major order; 0 for out-of-bounds neighbours."""
    return _attend(source, cross, p, scale_by, workers)[0]


def neighborhood_attention(source: BevFeatureMap, cross: BevFeatureMap, p: AttentionParams,
                           scale_by: ScaleBy = ScaleBy.VALUE, workers: Optional[int] = None) -> BevFeatureMap:
    """
    Windowed attention from source queries into cross keys/values.

    Args:
        source: query map (m_s x H x W)
        cross: key/value map (m_c x H x W)
        p: attention parameters
        scale_by: divide logits by sqrt(v) (default) or sqrt(q)
        workers: row-band parallelism

    Returns:
        v x H x W neighbourhood features

    Raises:
        DimensionMismatchError: spatial or channel mismatch
    """
    return BevFeatureMap(_attend(source, cross, p, scale_by, workers)[1])


def gated_fuse(neighbor: BevFeatureMap, g: GateParams) -> BevFeatureMap:
    """Scale each channel by sigmoid(W . mean_hw(neighbor) + b)."""
    if neighbor.channels != g.bias.shape[0]:
        raise DimensionMismatchError("gate size must match the feature channels",
                                     {"channels": neighbor.channels, "gate": g.bias.shape[0]})
    pooled = neighbor.features.mean(axis=(1, 2))
    gate = expit(g.gate_weights @ pooled + g.bias)
    return BevFeatureMap(gate[:, None, None] * neighbor.features)


def fuse_bev(camera: BevFeatureMap, lidar: BevFeatureMap, p: AttentionParams, g: GateParams,
             direction: FusionDirection = FusionDirection.CAMERA_SOURCE,
             scale_by: ScaleBy = ScaleBy.VALUE, workers: Optional[int] = None) -> BevFeatureMap:
    """
    Neighborhood attention followed by the gate.

    camera_source: camera queries, LiDAR keys/values.
    lidar_source: LiDAR queries, camera keys/values.
    """
    DimensionMismatchError.check("camera", camera.spatial_shape, "lidar", lidar.spatial_shape)
    direction = FusionDirection(direction)
    if direction is FusionDirection.CAMERA_SOURCE:
        source, cross = camera, lidar
    else:
        source, cross = lidar, camera
    return gated_fuse(neighborhood_attention(source, cross, p, scale_by, workers), g)


def zero_bias(k: int) -> np.ndarray:
    return np.zeros((2 * k - 1, 2 * k - 1))


def locality_attention_params(channels: int, k: int, locality: float) -> AttentionParams:
    """
    Stand-in parameters: identity projections and a quadratic distance penalty.

    rel_bias(di, dj) = -locality * (di^2 + dj^2), so with a large locality each
    query attends almost only to its own cell.
    """
    if locality < 0:
        raise ConfigError("locality must be non-negative", {"locality": locality})
    span = np.arange(-(k - 1), k)
    rel_bias = -locality * (span[:, None] ** 2 + span[None, :] ** 2).astype(np.float64)
    eye = np.eye(channels)
    return AttentionParams(eye, eye.copy(), eye.copy(), rel_bias, k)


def saturated_gate_params(channels: int, bias: float) -> GateParams:
    """Zero gate weights with a constant bias; bias=50 makes the gate pass-through."""
    return GateParams(np.zeros((channels, channels)), np.full(channels, float(bias)))
