"""
Data models for occ-forge.

This module defines the sensor, grid and feature containers shared by the
geometry, view-transform, fusion, occupancy and evaluation modules.

Conventions:
    - Known semantic classes are 0..N-1, the empty class is N, so a 3D
      volume has class_count = N + 1 channels per height bin.
    - 2D semantic masks use 0 for background and class c + 1 for class c.
    - BEV features are laid out C x H x W with H along x and W along y.
    - Occupancy labels are laid out H x W x D (x, y, z).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.core.exceptions import ConfigError, DataError, DimensionMismatchError, GeometryError

ORTHONORMAL_TOL = 1e-9
BEHIND_CAMERA_EPS = 1e-6


class LayersMeaning(Enum):
    """How the configured layer count maps to depth hypotheses."""
    PER_SIDE = "per_side"
    TOTAL = "total"


class FusionDirection(Enum):
    """Which BEV map acts as the attention query."""
    CAMERA_SOURCE = "camera_source"
    LIDAR_SOURCE = "lidar_source"


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive", {"fx": self.fx, "fy": self.fy})
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive", {"width": self.width, "height": self.height})
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image", {"cx": self.cx, "cy": self.cy})

    @property
    def matrix(self) -> np.ndarray:
        """The 3x3 K matrix."""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CameraIntrinsics':
        try:
            return cls(
                fx=float(data["fx"]), fy=float(data["fy"]),
                cx=float(data["cx"]), cy=float(data["cy"]),
                width=int(data["width"]), height=int(data["height"]),
            )
        except KeyError as e:
            raise GeometryError(f"intrinsics missing field {e}") from e


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """
    Rigid transform from the sensor (LiDAR/world) frame into the camera frame.

    p_cam = rotation @ p + translation
    """
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise GeometryError("extrinsics need a 3x3 rotation and a 3-vector translation",
                                {"rotation": rotation.shape, "translation": translation.shape})
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise GeometryError("extrinsics must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation must have determinant 1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> 'Extrinsics':
        return cls(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 T_ex."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: 'Extrinsics') -> 'Extrinsics':
        """Transform that applies `other` first, then `self`."""
        return Extrinsics(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def inverse(self) -> 'Extrinsics':
        return Extrinsics(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the sensor frame."""
        return -self.rotation.T @ self.translation

    def rotation_angle_deg(self) -> float:
        cos_angle = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos_angle)))

    def allclose(self, other: 'Extrinsics', atol: float = 1e-12) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def to_dict(self) -> Dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Extrinsics':
        try:
            return cls(np.array(data["rotation"], dtype=np.float64),
                       np.array(data["translation"], dtype=np.float64))
        except KeyError as e:
            raise GeometryError(f"extrinsics missing field {e}") from e


@dataclass(frozen=True)
class CameraModel:
    """Named camera: intrinsics plus extrinsics."""
    name: str
    intrinsics: CameraIntrinsics
    extrinsics: Extrinsics

    def with_extrinsics(self, extrinsics: Extrinsics) -> 'CameraModel':
        return CameraModel(self.name, self.intrinsics, extrinsics)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "intrinsics": self.intrinsics.to_dict(),
            "extrinsics": self.extrinsics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CameraModel':
        try:
            return cls(
                name=str(data["name"]),
                intrinsics=CameraIntrinsics.from_dict(data["intrinsics"]),
                extrinsics=Extrinsics.from_dict(data["extrinsics"]),
            )
        except KeyError as e:
            raise GeometryError(f"camera model missing field {e}") from e


@dataclass(frozen=True)
class Point3:
    """A point in the sensor frame (meters)."""
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise GeometryError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class PixelDepth:
    """Continuous pixel coordinates plus camera-frame depth."""
    u: float
    v: float
    depth: float


@dataclass(eq=False)
class PointCloud:
    """Labelled point cloud: N x 3 coordinates and N class ids."""
    points: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.classes):
            raise DimensionMismatchError("points and classes must have the same length",
                                         {"points": len(self.points), "classes": len(self.classes)})
        if not np.all(np.isfinite(self.points)):
            raise DataError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> 'PointCloud':
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# Image-plane grids
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DepthMap:
    """H x W depth in meters, 0 meaning no measurement."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("depth map must be 2D", {"ndim": self.values.ndim})
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise DataError("depth values must be finite and non-negative")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> 'DepthMap':
        return cls(np.zeros((height, width)))


@dataclass(eq=False)
class SemanticMask:
    """H x W labels in 0..num_classes, 0 = background."""
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise DataError("semantic mask must be 2D", {"ndim": self.labels.ndim})
        if np.any(self.labels < 0) or np.any(self.labels > self.num_classes):
            raise DataError("mask labels must lie in 0..num_classes", {"num_classes": self.num_classes})

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass(eq=False)
class ImageFeatureMap:
    """Context features C_t x H x W plus pre-softmax depth logits H x W x B."""
    features: np.ndarray
    depth_logits: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.depth_logits = np.asarray(self.depth_logits, dtype=np.float64)
        if self.features.ndim != 3 or self.depth_logits.ndim != 3:
            raise DataError("features must be C x H x W and depth logits H x W x B")
        DimensionMismatchError.check("features", self.features.shape[1:],
                                     "depth_logits", self.depth_logits.shape[:2])
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.depth_logits))):
            raise DataError("image features must be finite")

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def hypotheses(self) -> int:
        return self.depth_logits.shape[2]


@dataclass(eq=False)
class DepthHypotheses:
    """Per-pixel hypothesis depths H x W x B; rows with valid=False carry no hypotheses."""
    depths: np.ndarray
    valid: np.ndarray

    @property
    def count(self) -> int:
        return self.depths.shape[2]


@dataclass(eq=False)
class VirtualPointSet:
    """Flattened virtual points, ordered by pixel (row-major) then hypothesis."""
    rows: np.ndarray
    cols: np.ndarray
    depths: np.ndarray
    weights: np.ndarray
    features: np.ndarray
    points: np.ndarray
    hypothesis_index: np.ndarray

    def __len__(self) -> int:
        return len(self.depths)

    def weighted_features(self) -> np.ndarray:
        return self.weights[:, None] * self.features


# ---------------------------------------------------------------------------
# BEV and voxel grids
# ---------------------------------------------------------------------------

def _cells(lo: float, hi: float, cell: float, axis: str) -> int:
    count = (hi - lo) / cell
    rounded = int(round(count))
    if rounded <= 0 or abs(count - rounded) > 1e-6:
        raise ConfigError(f"{axis} extent must be a positive multiple of the cell size",
                          {"extent": hi - lo, "cell": cell})
    return rounded


@dataclass(frozen=True)
class BevGridSpec:
    """Ground-plane grid; H cells along x, W cells along y."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float
    channels: int

    def __post_init__(self):
        if self.cell <= 0:
            raise ConfigError("cell size must be positive", {"cell": self.cell})
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ConfigError("grid max must exceed min")
        if self.channels < 1:
            raise ConfigError("channels must be at least 1", {"channels": self.channels})
        _cells(self.x_min, self.x_max, self.cell, "x")
        _cells(self.y_min, self.y_max, self.cell, "y")

    @property
    def n_x(self) -> int:
        return _cells(self.x_min, self.x_max, self.cell, "x")

    @property
    def n_y(self) -> int:
        return _cells(self.y_min, self.y_max, self.cell, "y")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.n_x, self.n_y)

    def cell_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer (ix, iy) per point and an in-range flag."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ix = np.floor((points[:, 0] - self.x_min) / self.cell).astype(np.int64)
        iy = np.floor((points[:, 1] - self.y_min) / self.cell).astype(np.int64)
        inside = (ix >= 0) & (ix < self.n_x) & (iy >= 0) & (iy < self.n_y)
        return ix, iy, inside


@dataclass(frozen=True)
class VoxelGridSpec:
    """3D voxel lattice with cubic voxels."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    voxel: float

    def __post_init__(self):
        if self.voxel <= 0:
            raise ConfigError("voxel size must be positive", {"voxel": self.voxel})
        if self.x_max <= self.x_min or self.y_max <= self.y_min or self.z_max <= self.z_min:
            raise ConfigError("grid max must exceed min")
        _cells(self.x_min, self.x_max, self.voxel, "x")
        _cells(self.y_min, self.y_max, self.voxel, "y")
        _cells(self.z_min, self.z_max, self.voxel, "z")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (_cells(self.x_min, self.x_max, self.voxel, "x"),
                _cells(self.y_min, self.y_max, self.voxel, "y"),
                _cells(self.z_min, self.z_max, self.voxel, "z"))

    @property
    def depth_bins(self) -> int:
        return self.shape[2]

    def bev(self, channels: int) -> BevGridSpec:
        return BevGridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.voxel, channels)

    def voxel_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(N x 3) integer voxel indices and an in-grid flag."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        origin = np.array([self.x_min, self.y_min, self.z_min])
        index = np.floor((points - origin) / self.voxel).astype(np.int64)
        inside = np.all((index >= 0) & (index < np.array(self.shape)), axis=1)
        return index, inside

    def voxel_centers(self) -> np.ndarray:
        """H x W x D x 3 voxel center coordinates."""
        n_x, n_y, n_z = self.shape
        xs = self.x_min + (np.arange(n_x) + 0.5) * self.voxel
        ys = self.y_min + (np.arange(n_y) + 0.5) * self.voxel
        zs = self.z_min + (np.arange(n_z) + 0.5) * self.voxel
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)

    def to_dict(self) -> Dict[str, float]:
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "z_min": self.z_min, "z_max": self.z_max,
            "voxel": self.voxel,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'VoxelGridSpec':
        try:
            return cls(**{key: float(data[key]) for key in
                          ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "voxel")})
        except KeyError as e:
            raise ConfigError(f"grid spec missing field {e}") from e


@dataclass(eq=False)
class BevFeatureMap:
    """C x H x W feature plane."""
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise DataError("BEV features must be C x H x W", {"ndim": self.features.ndim})
        if not np.all(np.isfinite(self.features)):
            raise DataError("BEV features must be finite")

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.features.shape[1:]

    @classmethod
    def zeros(cls, spec: BevGridSpec) -> 'BevFeatureMap':
        return cls(np.zeros(spec.shape))


@dataclass(eq=False)
class OccupancyGrid:
    """H x W x D labels in 0..num_classes (num_classes is the empty id)."""
    labels: np.ndarray
    num_classes: int
    logits: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise DataError("occupancy labels must be H x W x D", {"ndim": self.labels.ndim})
        if np.any(self.labels < 0) or np.any(self.labels > self.num_classes):
            raise DataError("occupancy labels must lie in 0..num_classes",
                            {"num_classes": self.num_classes})
        if self.logits is not None:
            height, width, depth = self.labels.shape
            expected = (self.class_count, depth, height, width)
            DimensionMismatchError.check("logits", self.logits.shape, "expected", expected)

    @property
    def empty_class(self) -> int:
        return self.num_classes

    @property
    def class_count(self) -> int:
        return self.num_classes + 1

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape

    def occupied(self) -> np.ndarray:
        return self.labels != self.empty_class
