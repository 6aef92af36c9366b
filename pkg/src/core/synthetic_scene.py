"""
Procedural scenes for end-to-end runs without learned networks.

A scene is a ground slab plus axis-aligned boxes, a spinning multi-ring
LiDAR and a camera rig. Every sensor product (LiDAR returns, per-camera
semantic masks and oracle depth, ground-truth occupancy and the LiDAR
visibility mask) comes from the same ray/box intersection code.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import ConfigError, DataError
from src.core.geometry import extrinsics_from_pose
from src.core.models import (
    CameraIntrinsics,
    CameraModel,
    DepthMap,
    OccupancyGrid,
    PointCloud,
    SemanticMask,
    VoxelGridSpec,
)
from src.logging.logger_config import log_debug
from src.utils.file_utils import read_json, write_json
from src.utils.parallel import OrderedChunkExecutor, chunk_ranges

HIT_EPS = 1e-9
RAY_CHUNK = 4096


@dataclass(frozen=True)
class BoxPrimitive:
    """Axis-aligned box given by its center and full size."""
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    class_id: int

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigError("box center and size need three components")
        if any(s <= 0 for s in self.size):
            raise ConfigError("box size must be positive", {"size": self.size})
        if self.class_id < 0:
            raise ConfigError("box class must be non-negative", {"class_id": self.class_id})
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))

    @classmethod
    def from_bounds(cls, lo: Sequence[float], hi: Sequence[float], class_id: int) -> 'BoxPrimitive':
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        return cls(tuple((lo + hi) / 2.0), tuple(hi - lo), class_id)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2.0

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def to_dict(self) -> Dict[str, Any]:
        return {"center": list(self.center), "size": list(self.size), "class_id": self.class_id}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BoxPrimitive':
        return cls(tuple(data["center"]), tuple(data["size"]), int(data["class_id"]))


@dataclass(frozen=True)
class GroundSpec:
    """Ground slab: top surface at top_z, square half extent around the origin."""
    top_z: float
    thickness: float
    class_id: int
    half_extent: float

    def __post_init__(self):
        if self.thickness <= 0 or self.half_extent <= 0:
            raise ConfigError("ground thickness and extent must be positive",
                              {"thickness": self.thickness, "half_extent": self.half_extent})
        if self.class_id < 0:
            raise ConfigError("ground class must be non-negative", {"class_id": self.class_id})

    def as_box(self) -> BoxPrimitive:
        e = self.half_extent
        return BoxPrimitive.from_bounds((-e, -e, self.top_z - self.thickness), (e, e, self.top_z), self.class_id)

    def to_dict(self) -> Dict[str, Any]:
        return {"top_z": self.top_z, "thickness": self.thickness,
                "class_id": self.class_id, "half_extent": self.half_extent}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GroundSpec':
        return cls(float(data["top_z"]), float(data["thickness"]), int(data["class_id"]), float(data["half_extent"]))


@dataclass(frozen=True)
class LidarSpec:
    """Spinning LiDAR: rings evenly spread between two elevations, fixed azimuth step."""
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ring_count: int = 32
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 10.0
    azimuth_step_deg: float = 1.0
    max_range: float = 50.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.ring_count < 0:
            raise ConfigError("ring_count must be non-negative", {"ring_count": self.ring_count})
        if not 0 < self.azimuth_step_deg <= 360:
            raise ConfigError("azimuth step must be in (0, 360]", {"step": self.azimuth_step_deg})
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ConfigError("elevation max must not be below min")
        if self.max_range <= 0:
            raise ConfigError("max_range must be positive", {"max_range": self.max_range})
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative", {"sigma": self.noise_sigma})
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def azimuth_count(self) -> int:
        return int(round(360.0 / self.azimuth_step_deg))

    @property
    def ray_count(self) -> int:
        return self.ring_count * self.azimuth_count

    def directions(self) -> np.ndarray:
        """Unit ray directions, ring-major then azimuth (ray id = ring * azimuths + azimuth)."""
        if self.ring_count == 0:
            return np.zeros((0, 3))
        if self.ring_count == 1:
            elevations = np.array([self.elevation_min_deg])
        else:
            elevations = np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.ring_count)
        azimuths = np.arange(self.azimuth_count) * self.azimuth_step_deg
        e, a = np.meshgrid(np.radians(elevations), np.radians(azimuths), indexing="ij")
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "origin": list(self.origin),
            "ring_count": self.ring_count,
            "elevation_min_deg": self.elevation_min_deg,
            "elevation_max_deg": self.elevation_max_deg,
            "azimuth_step_deg": self.azimuth_step_deg,
            "max_range": self.max_range,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LidarSpec':
        defaults = cls()
        return cls(
            origin=tuple(data.get("origin", defaults.origin)),
            ring_count=int(data.get("ring_count", defaults.ring_count)),
            elevation_min_deg=float(data.get("elevation_min_deg", defaults.elevation_min_deg)),
            elevation_max_deg=float(data.get("elevation_max_deg", defaults.elevation_max_deg)),
            azimuth_step_deg=float(data.get("azimuth_step_deg", defaults.azimuth_step_deg)),
            max_range=float(data.get("max_range", defaults.max_range)),
            noise_sigma=float(data.get("noise_sigma", defaults.noise_sigma)),
        )


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to synthesize one frame."""
    seed: int
    num_classes: int
    lidar: LidarSpec
    ground: Optional[GroundSpec] = None
    boxes: Tuple[BoxPrimitive, ...] = ()
    cameras: Tuple[CameraModel, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1", {"num_classes": self.num_classes})
        for primitive in self.primitives():
            if primitive.class_id >= self.num_classes:
                raise ConfigError("primitive class exceeds num_classes",
                                  {"class_id": primitive.class_id, "num_classes": self.num_classes})
        if self.ground is not None:
            e = self.ground.half_extent
            for box in self.boxes:
                if np.any(np.abs(box.lo[:2]) > e) or np.any(np.abs(box.hi[:2]) > e):
                    raise ConfigError("box lies outside the ground extent", {"center": box.center})
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ConfigError("camera names must be unique", {"names": names})

    def primitives(self) -> List[BoxPrimitive]:
        """Ground first, then boxes; later primitives win where they overlap."""
        ground = [self.ground.as_box()] if self.ground is not None else []
        return ground + list(self.boxes)

    def camera(self, name: str) -> CameraModel:
        for camera in self.cameras:
            if camera.name == name:
                return camera
        raise DataError(f"Unknown camera: {name}", {"cameras": [c.name for c in self.cameras]})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "lidar": self.lidar.to_dict(),
            "ground": self.ground.to_dict() if self.ground is not None else None,
            "boxes": [b.to_dict() for b in self.boxes],
            "cameras": [c.to_dict() for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SceneSpec':
        try:
            return cls(
                seed=int(data.get("seed", 0)),
                num_classes=int(data["num_classes"]),
                lidar=LidarSpec.from_dict(data.get("lidar", {})),
                ground=GroundSpec.from_dict(data["ground"]) if data.get("ground") else None,
                boxes=tuple(BoxPrimitive.from_dict(b) for b in data.get("boxes", [])),
                cameras=tuple(CameraModel.from_dict(c) for c in data.get("cameras", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid scene spec: {e}") from e

    @classmethod
    def load(cls, path: Path) -> 'SceneSpec':
        return cls.from_dict(read_json(path))

    def save(self, path: Path) -> Path:
        return write_json(path, self.to_dict())


@dataclass(eq=False)
class LidarScan:
    """LiDAR returns in ray order."""
    points: np.ndarray
    classes: np.ndarray
    ray_ids: np.ndarray
    ranges: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.classes)


def _slab_interval(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray,
                   hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry and exit parameters of rays (n) against boxes (m): two n x m arrays."""
    o = origins[:, None, :]
    d = directions[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - o) / d
        t2 = (hi[None] - o) / d
    parallel = d == 0
    inside = (o >= lo[None]) & (o <= hi[None])
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return near.max(axis=2), far.min(axis=2)


def cast_rays(primitives: Sequence[BoxPrimitive], origins: np.ndarray, directions: np.ndarray,
              t_max: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest hit of every ray.

    Returns:
        (t, primitive index) per ray; t is inf and the index -1 on a miss.
        Rays starting inside a primitive ignore it. Ties go to the earlier
        primitive.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    count = len(directions)
    if count == 0 or not primitives:
        return np.full(count, np.inf), np.full(count, -1, dtype=np.int64)

    lo = np.stack([p.lo for p in primitives])
    hi = np.stack([p.hi for p in primitives])
    near, far = _slab_interval(origins, directions, lo, hi)
    hit = (near <= far) & (near > HIT_EPS) & (near <= t_max)
    t = np.where(hit, near, np.inf)
    index = np.argmin(t, axis=1)
    best = t[np.arange(count), index]
    return best, np.where(np.isfinite(best), index, -1)


def raycast_lidar(spec: SceneSpec, workers: Optional[int] = None) -> LidarScan:
    """
    Simulate one LiDAR sweep.

    Rays are processed in chunks and reassembled in ray order. Range noise,
    when enabled, is drawn for every ray in ray order from the scene seed, so
    the scan does not depend on the chunking.
    """
    lidar = spec.lidar
    directions = lidar.directions()
    origin = np.asarray(lidar.origin)
    primitives = spec.primitives()
    classes_of = np.array([p.class_id for p in primitives], dtype=np.int64)

    def chunk(bounds: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        start, stop = bounds
        origins = np.broadcast_to(origin, (stop - start, 3))
        return cast_rays(primitives, origins, directions[start:stop], lidar.max_range)

    parts = OrderedChunkExecutor(workers).map(chunk, chunk_ranges(len(directions), RAY_CHUNK))
    t = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    index = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)

    if lidar.noise_sigma > 0 and len(t):
        noise = np.random.default_rng(spec.seed).normal(0.0, lidar.noise_sigma, size=len(t))
        t = np.where(np.isfinite(t), np.maximum(t + noise, HIT_EPS), t)

    ray_ids = np.nonzero(index >= 0)[0]
    ranges = t[ray_ids]
    points = origin + directions[ray_ids] * ranges[:, None]
    log_debug(f"LiDAR: {len(ray_ids)} returns from {len(directions)} rays")
    return LidarScan(points.reshape(-1, 3), classes_of[index[ray_ids]] if len(ray_ids) else np.zeros(0, dtype=np.int64),
                     ray_ids, ranges)


def render_semantics_and_depth(spec: SceneSpec, cam: CameraModel) -> Tuple[SemanticMask, DepthMap]:
    """
    Oracle semantic mask (class + 1, 0 = background) and dense depth per pixel.

    Rays go through pixel centres; depth is the camera-frame z of the
    nearest surface, 0 where nothing is hit.
    """
    k = cam.intrinsics
    rows, cols = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
    cam_dirs = np.stack([((cols + 0.5) - k.cx) / k.fx, ((rows + 0.5) - k.cy) / k.fy,
                         np.ones_like(rows, dtype=np.float64)], axis=-1).reshape(-1, 3)
    # unit camera-frame z, so the ray parameter is the depth
    directions = cam_dirs @ cam.extrinsics.rotation
    origins = np.broadcast_to(cam.extrinsics.camera_center, directions.shape)

    primitives = spec.primitives()
    t, index = cast_rays(primitives, origins, directions)
    classes_of = np.array([p.class_id for p in primitives] + [-1], dtype=np.int64)
    labels = np.where(index >= 0, classes_of[index] + 1, 0).reshape(k.shape)
    depth = np.where(index >= 0, t, 0.0).reshape(k.shape)
    return SemanticMask(labels, spec.num_classes), DepthMap(depth)


def ground_truth_occupancy(spec: SceneSpec, grid: VoxelGridSpec) -> OccupancyGrid:
    """Label every voxel with the class of the last primitive containing its centre."""
    centers = grid.voxel_centers()
    labels = np.full(grid.shape, spec.num_classes, dtype=np.int64)
    for primitive in spec.primitives():
        labels[primitive.contains(centers)] = primitive.class_id
    return OccupancyGrid(labels, spec.num_classes)


def lidar_visibility_mask(spec: SceneSpec, scan: LidarScan, grid: VoxelGridSpec,
                          step: Optional[float] = None, workers: Optional[int] = None) -> np.ndarray:
    """
    Voxels observed by the LiDAR: the return voxels plus every voxel a ray
    crosses before its return (or before max range / leaving the grid on a miss).

    Rays are sampled every `step` meters (default: half a voxel).
    """
    step = step or grid.voxel / 2.0
    if step <= 0:
        raise ConfigError("sampling step must be positive", {"step": step})
    lidar = spec.lidar
    directions = lidar.directions()
    origin = np.asarray(lidar.origin)

    t_end = np.full(len(directions), lidar.max_range)
    t_end[scan.ray_ids] = scan.ranges
    lo = np.array([grid.x_min, grid.y_min, grid.z_min])
    hi = np.array([grid.x_max, grid.y_max, grid.z_max])
    if len(directions):
        _, exit_t = _slab_interval(np.broadcast_to(origin, directions.shape), directions, lo[None], hi[None])
        t_end = np.minimum(t_end, np.maximum(exit_t[:, 0], 0.0))

    n_x, n_y, n_z = grid.shape

    def chunk(bounds: Tuple[int, int]) -> np.ndarray:
        start, stop = bounds
        ends = t_end[start:stop]
        if not len(ends) or ends.max() <= 0:
            return np.zeros(0, dtype=np.int64)
        samples = np.arange(0.0, ends.max(), step)
        keep = samples[None, :] < ends[:, None]
        points = origin + directions[start:stop, None, :] * samples[None, :, None]
        index, inside = grid.voxel_index(points[keep])
        index = index[inside]
        return np.unique((index[:, 0] * n_y + index[:, 1]) * n_z + index[:, 2])

    visible = np.zeros(n_x * n_y * n_z, dtype=bool)
    for part in OrderedChunkExecutor(workers).map(chunk, chunk_ranges(len(directions), RAY_CHUNK)):
        visible[part] = True

    index, inside = grid.voxel_index(scan.points)
    index = index[inside]
    visible[(index[:, 0] * n_y + index[:, 1]) * n_z + index[:, 2]] = True
    return visible.reshape(n_x, n_y, n_z)


def default_rig(origin: Sequence[float], width: int = 64, height: int = 48,
                focal: float = 40.0) -> Tuple[CameraModel, ...]:
    """Front and back cameras at `origin`, looking along +x and -x."""
    intrinsics = CameraIntrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    position = np.asarray(origin, dtype=np.float64)
    return (
        CameraModel("front", intrinsics, extrinsics_from_pose(position, 0.0)),
        CameraModel("back", intrinsics, extrinsics_from_pose(position, 180.0)),
    )


TOY_ORIGIN = (0.1, 0.1, 0.9)


def toy_lidar(noise_sigma: float = 0.0) -> LidarSpec:
    return LidarSpec(origin=TOY_ORIGIN, ring_count=160, elevation_min_deg=-70.0, elevation_max_deg=10.0,
                     azimuth_step_deg=0.5, max_range=20.0, noise_sigma=noise_sigma)


def toy_scene(seed: int = 0) -> SceneSpec:
    """
    The frozen fixture scene for the default 20 x 20 x 8 grid.

    A thin ground slab in the lowest voxel layer and three boxes inset 2 cm
    from the voxel lattice, so every LiDAR return falls in a voxel whose
    centre lies inside the surface it hit.
    """
    boxes = (
        BoxPrimitive.from_bounds((1.62, 0.82, -0.58), (2.78, 1.98, 0.58), 1),
        BoxPrimitive.from_bounds((-2.78, -2.38, -0.58), (-1.62, -1.22, 0.58), 2),
        BoxPrimitive.from_bounds((-0.38, -3.58, -0.58), (0.78, -2.82, 0.58), 3),
    )
    return SceneSpec(
        seed=seed,
        num_classes=4,
        lidar=toy_lidar(),
        ground=GroundSpec(top_z=-0.62, thickness=0.38, class_id=0, half_extent=8.0),
        boxes=boxes,
        cameras=default_rig(TOY_ORIGIN),
    )


def empty_scene(seed: int = 0, num_classes: int = 4) -> SceneSpec:
    """Sensors only: no ground and no boxes."""
    return SceneSpec(seed=seed, num_classes=num_classes, lidar=toy_lidar(), cameras=default_rig(TOY_ORIGIN))


def random_scene(seed: int, num_boxes: int = 3, num_classes: int = 4,
                 grid: Optional[VoxelGridSpec] = None) -> SceneSpec:
    """
    Random boxes on the toy ground, inset from the voxel lattice like the toy scene.

    Class 0 is the ground; boxes take classes 1..num_classes-1. Boxes keep
    clear of the sensor column at the origin.
    """
    if num_classes < 2:
        raise ConfigError("random scenes need a ground class and a box class", {"num_classes": num_classes})
    grid = grid or VoxelGridSpec(-4.0, 4.0, -4.0, 4.0, -1.0, 2.2, 0.4)
    rng = np.random.default_rng(seed)
    n_x, n_y, _ = grid.shape
    v = grid.voxel
    inset = 0.05 * v

    boxes: List[BoxPrimitive] = []
    taken = np.zeros((n_x, n_y), dtype=bool)
    cx, cy, _ = grid.voxel_index(np.array([TOY_ORIGIN]))[0][0]
    taken[max(cx - 1, 0):cx + 2, max(cy - 1, 0):cy + 2] = True
    attempts = 0
    while len(boxes) < num_boxes and attempts < 100 * max(num_boxes, 1):
        attempts += 1
        sx, sy = rng.integers(1, 4, size=2)
        ix = int(rng.integers(0, n_x - sx + 1))
        iy = int(rng.integers(0, n_y - sy + 1))
        if taken[ix:ix + sx, iy:iy + sy].any():
            continue
        taken[max(ix - 1, 0):ix + sx + 1, max(iy - 1, 0):iy + sy + 1] = True
        height = int(rng.integers(1, 4))
        lo = (grid.x_min + ix * v + inset, grid.y_min + iy * v + inset, grid.z_min + v + inset)
        hi = (grid.x_min + (ix + sx) * v - inset, grid.y_min + (iy + sy) * v - inset,
              grid.z_min + (1 + height) * v - inset)
        boxes.append(BoxPrimitive.from_bounds(lo, hi, int(rng.integers(1, num_classes))))

    return SceneSpec(
        seed=seed,
        num_classes=num_classes,
        lidar=toy_lidar(),
        ground=GroundSpec(top_z=grid.z_min + v - inset, thickness=v - inset, class_id=0, half_extent=8.0),
        boxes=tuple(boxes),
        cameras=default_rig(TOY_ORIGIN),
    )
