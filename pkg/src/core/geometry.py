"""
Rigid transforms, pinhole projection and back-projection.

Points live in the sensor (LiDAR) frame; Extrinsics map them into the camera
frame, CameraIntrinsics map camera-frame points to pixels. Pixel validity
uses continuous half-open bounds [0, width) x [0, height).
"""

from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.core.exceptions import ConfigError, GeometryError
from src.core.models import (
    BEHIND_CAMERA_EPS,
    CameraIntrinsics,
    Extrinsics,
    PixelDepth,
    Point3,
)


def project_points(points: np.ndarray, ex: Extrinsics, k: CameraIntrinsics,
                   clip: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project N sensor-frame points into the image.

    Args:
        points: N x 3 array
        ex: sensor-to-camera extrinsics
        k: camera intrinsics
        clip: also require the pixel to fall inside the image

    Returns:
        (uv N x 2, depth N, valid N). uv is NaN where depth is behind the camera.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = points @ ex.rotation.T + ex.translation
    depth = cam[:, 2]
    in_front = depth > BEHIND_CAMERA_EPS

    uv = np.full((len(points), 2), np.nan)
    safe = np.where(in_front, depth, 1.0)
    uv[:, 0] = np.where(in_front, k.fx * cam[:, 0] / safe + k.cx, np.nan)
    uv[:, 1] = np.where(in_front, k.fy * cam[:, 1] / safe + k.cy, np.nan)

    valid = in_front
    if clip:
        with np.errstate(invalid='ignore'):
            valid = valid & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return uv, depth, valid


def project(point: Point3, ex: Extrinsics, k: CameraIntrinsics) -> Optional[PixelDepth]:
    """Project one point; None when it is behind the camera or outside the image."""
    uv, depth, valid = project_points(point.as_array()[None, :], ex, k)
    if not valid[0]:
        return None
    return PixelDepth(u=float(uv[0, 0]), v=float(uv[0, 1]), depth=float(depth[0]))


def back_project_pixels(u: np.ndarray, v: np.ndarray, depth: np.ndarray,
                        ex: Extrinsics, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixels with camera-frame depth to N x 3 sensor-frame points."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(depth <= 0):
        raise GeometryError("back-projection needs positive depth", {"min_depth": float(depth.min())})
    cam = np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=1)
    return (cam - ex.translation) @ ex.rotation


def back_project(pd: PixelDepth, ex: Extrinsics, k: CameraIntrinsics) -> Point3:
    """Inverse of project for a single pixel."""
    if not pd.depth > 0:
        raise GeometryError("back-projection needs positive depth", {"depth": pd.depth})
    point = back_project_pixels(np.array([pd.u]), np.array([pd.v]), np.array([pd.depth]), ex, k)[0]
    return Point3(float(point[0]), float(point[1]), float(point[2]))


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        vector = rng.normal(size=3)
        norm = np.linalg.norm(vector)
        if norm > 1e-12:
            return vector / norm


def perturb_extrinsics(ex: Extrinsics, d_translation: float, d_rotation: float, seed: int) -> Extrinsics:
    """
    Apply a random rigid perturbation in the camera frame.

    The translation direction and the rotation axis are drawn uniformly on the
    unit sphere (always both, in that order, so a given seed yields the same
    direction and axis for every magnitude).

    Args:
        ex: extrinsics to perturb
        d_translation: translation magnitude in meters
        d_rotation: rotation angle in degrees
        seed: random seed

    Returns:
        Perturbed extrinsics: R' = R_d R, t' = R_d t + d_translation * direction

    Raises:
        ConfigError: on negative magnitudes
    """
    if d_translation < 0 or d_rotation < 0:
        raise ConfigError("perturbation magnitudes must be non-negative",
                          {"d_translation": d_translation, "d_rotation": d_rotation})
    if d_translation == 0 and d_rotation == 0:
        return ex

    rng = np.random.default_rng(seed)
    direction = _unit_vector(rng)
    axis = _unit_vector(rng)

    if d_rotation > 0:
        delta = Rotation.from_rotvec(axis * np.radians(d_rotation)).as_matrix()
    else:
        delta = np.eye(3)

    return Extrinsics(delta @ ex.rotation, delta @ ex.translation + d_translation * direction)


def extrinsics_from_pose(position: np.ndarray, yaw_deg: float, pitch_deg: float = 0.0) -> Extrinsics:
    """
    Extrinsics of a camera at `position` looking along yaw/pitch.

    Camera axes follow the usual convention: x right, y down, z forward.
    Yaw is measured from the sensor +x axis towards +y, pitch upwards.
    """
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    forward = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return Extrinsics(rotation, -rotation @ np.asarray(position, dtype=np.float64))


def copoint_displacement(points: np.ndarray, ex_a: Extrinsics, ex_b: Extrinsics,
                         k: CameraIntrinsics, min_depth: float = 0.5) -> float:
    """
    Mean pixel displacement of points between two extrinsics.

    Only points at least `min_depth` in front of the first camera (and in
    front of the second) count; image bounds are ignored. Returns 0.0 when
    no point qualifies.
    """
    uv_a, depth_a, _ = project_points(points, ex_a, k, clip=False)
    uv_b, depth_b, _ = project_points(points, ex_b, k, clip=False)
    keep = (depth_a >= min_depth) & (depth_b > BEHIND_CAMERA_EPS)
    if not np.any(keep):
        return 0.0
    return float(np.mean(np.linalg.norm(uv_a[keep] - uv_b[keep], axis=1)))
