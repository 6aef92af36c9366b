"""
Semantic- and depth-guided view transformation.

Sparse LiDAR co-points are scattered into each camera, diffused inside
same-class regions of the semantic mask, expanded into depth hypotheses
around every diffused depth, weighted by the per-pixel depth distribution and
pooled into a BEV grid.

Summation into BEV cells always follows row-major pixel order, then
hypothesis order, so pooled maps are bit-reproducible.
"""

from typing import List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from src.core.exceptions import ConfigError, DataError, DimensionMismatchError
from src.core.geometry import back_project_pixels, project_points
from src.core.models import (
    BevFeatureMap,
    BevGridSpec,
    CameraIntrinsics,
    DepthHypotheses,
    DepthMap,
    Extrinsics,
    ImageFeatureMap,
    LayersMeaning,
    PointCloud,
    SemanticMask,
    VirtualPointSet,
    VoxelGridSpec,
)
from src.logging.logger_config import log_debug
from src.utils.parallel import OrderedChunkExecutor, split_range

DEPTH_FLOOR_M = 0.05


def scatter_copoints(cloud: PointCloud, ex: Extrinsics, k: CameraIntrinsics,
                     num_classes: int) -> Tuple[DepthMap, SemanticMask]:
    """
    Rasterize LiDAR points into a sparse depth map.

    Each point projecting into the image writes its depth at
    (floor(v), floor(u)); when several land in the same cell the smallest
    depth wins (ties go to the earlier point). The returned mask holds the
    winning point's class + 1, 0 where no point landed.
    """
    depth = np.zeros(k.shape)
    labels = np.zeros(k.shape, dtype=np.int64)
    if len(cloud) == 0:
        return DepthMap(depth), SemanticMask(labels, num_classes)

    uv, z, valid = project_points(cloud.points, ex, k)
    index = np.nonzero(valid)[0]
    rows = np.floor(uv[index, 1]).astype(np.int64)
    cols = np.floor(uv[index, 0]).astype(np.int64)
    linear = rows * k.width + cols

    order = np.lexsort((index, z[index], linear))
    first = np.unique(linear[order], return_index=True)[1]
    winners = order[first]

    depth[rows[winners], cols[winners]] = z[index[winners]]
    labels[rows[winners], cols[winners]] = cloud.classes[index[winners]] + 1
    log_debug(f"Scattered {len(winners)} co-points from {len(cloud)} points")
    return DepthMap(depth), SemanticMask(labels, num_classes)


def disk_offsets(radius_px: int) -> List[Tuple[int, int]]:
    """Offsets (di, dj) with di^2 + dj^2 <= r^2, in row-major order."""
    return [(di, dj)
            for di in range(-radius_px, radius_px + 1)
            for dj in range(-radius_px, radius_px + 1)
            if di * di + dj * dj <= radius_px * radius_px]


def diffuse_depth(depth: DepthMap, mask: SemanticMask, radius_px: int,
                  measured: Optional[np.ndarray] = None, workers: Optional[int] = None) -> DepthMap:
    """
    Fill unmeasured pixels with the mean of same-class measurements in a disk.

    Args:
        depth: sparse depth map (0 = no measurement)
        mask: semantic mask, 0 = background
        radius_px: disk radius in pixels
        measured: co-point set; defaults to depth > 0. Passing the original
            set when re-diffusing a diffused map reproduces it exactly.
        workers: row-band parallelism

    Returns:
        Extended depth map: 0 on background, the original value on co-points,
        the disk mean elsewhere (0 without a qualifying neighbor).
    """
    if radius_px < 0:
        raise ConfigError("diffusion radius must be non-negative", {"radius_px": radius_px})
    DimensionMismatchError.check("depth", depth.shape, "mask", mask.shape)

    values = depth.values
    labels = mask.labels
    if measured is None:
        measured = values > 0
    else:
        measured = np.asarray(measured, dtype=bool)
        DimensionMismatchError.check("measured", measured.shape, "depth", depth.shape)

    height, width = values.shape
    r = radius_px
    padded_depth = np.pad(np.where(measured, values, 0.0), r)
    padded_labels = np.pad(labels, r)
    padded_measured = np.pad(measured & (labels != 0), r)
    offsets = disk_offsets(r)

    def band(rows: Tuple[int, int]) -> np.ndarray:
        start, stop = rows
        target = labels[start:stop]
        total = np.zeros((stop - start, width))
        count = np.zeros((stop - start, width), dtype=np.int64)
        for di, dj in offsets:
            window = (slice(start + r + di, stop + r + di), slice(r + dj, r + dj + width))
            qualifies = padded_measured[window] & (padded_labels[window] == target)
            total += np.where(qualifies, padded_depth[window], 0.0)
            count += qualifies
        mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
        return mean

    executor = OrderedChunkExecutor(workers)
    diffused = np.concatenate(executor.map(band, split_range(height, executor.max_workers)), axis=0) \
        if height else np.zeros((0, width))

    diffused = np.where(labels == 0, 0.0, diffused)
    diffused = np.where(measured & (labels != 0), values, diffused)
    return DepthMap(diffused)


def hypothesis_offsets(range_m: float, per_side: int) -> np.ndarray:
    """
    Positive offsets of the bidirectional linear discretization.

    offset_k = (range / 2) * k (k + 1) / (l (l + 1)) for k = 1..l, so the
    outermost hypotheses sit at +-range/2 and the gap between neighbours
    grows linearly away from the co-point depth. The scale is fixed by the
    single-layer case: l = 1 around 10 m gives {9.5, 10.5}.
    """
    k = np.arange(1, per_side + 1, dtype=np.float64)
    return (range_m / 2.0) * k * (k + 1) / (per_side * (per_side + 1))


def discretize_depths(extended: DepthMap, range_m: float, layers: int,
                      layers_meaning: LayersMeaning = LayersMeaning.PER_SIDE,
                      floor_m: float = DEPTH_FLOOR_M) -> DepthHypotheses:
    """
    Expand each extended depth d > 0 into 2l sorted hypotheses around d.

    Raises:
        ConfigError: layers = 0, non-positive range, or an odd total count
    """
    if layers < 1:
        raise ConfigError("layers must be at least 1", {"layers": layers})
    if range_m <= 0:
        raise ConfigError("discretization range must be positive", {"range_m": range_m})
    layers_meaning = LayersMeaning(layers_meaning)
    if layers_meaning is LayersMeaning.TOTAL:
        if layers % 2:
            raise ConfigError("a total hypothesis count must be even", {"layers": layers})
        per_side = layers // 2
    else:
        per_side = layers

    offsets = hypothesis_offsets(range_m, per_side)
    signed = np.concatenate([-offsets[::-1], offsets])
    d = extended.values
    valid = d > 0
    depths = np.where(valid[..., None], np.maximum(d[..., None] + signed, floor_m), 0.0)
    return DepthHypotheses(depths=depths, valid=valid)


def nearest_hypothesis(hyps: DepthHypotheses, oracle: DepthMap) -> np.ndarray:
    """Index of the hypothesis closest to the oracle depth (-1 where undefined)."""
    DimensionMismatchError.check("hypotheses", hyps.valid.shape, "oracle", oracle.shape)
    target = np.argmin(np.abs(hyps.depths - oracle.values[..., None]), axis=2)
    return np.where(hyps.valid & (oracle.values > 0), target, -1)


def oracle_depth_logits(hyps: DepthHypotheses, oracle: DepthMap, sigma: float) -> np.ndarray:
    """Gaussian log-weights -(h - d*)^2 / (2 sigma^2); zero where no oracle depth."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive", {"sigma": sigma})
    DimensionMismatchError.check("hypotheses", hyps.valid.shape, "oracle", oracle.shape)
    logits = -((hyps.depths - oracle.values[..., None]) ** 2) / (2.0 * sigma ** 2)
    usable = (hyps.valid & (oracle.values > 0))[..., None]
    return np.where(usable, logits, 0.0)


def class_indicator_features(mask: SemanticMask, class_count: int) -> np.ndarray:
    """One-hot context features (class_count x H x W) from a 2D mask; background is all-zero."""
    if class_count < mask.num_classes:
        raise ConfigError("class_count must cover every mask class",
                          {"class_count": class_count, "num_classes": mask.num_classes})
    height, width = mask.shape
    features = np.zeros((class_count, height, width))
    rows, cols = np.nonzero(mask.labels)
    features[mask.labels[rows, cols] - 1, rows, cols] = 1.0
    return features


def build_virtual_points(img: ImageFeatureMap, hyps: DepthHypotheses,
                         ex: Extrinsics, k: CameraIntrinsics) -> VirtualPointSet:
    """Virtual points of every valid pixel, row-major, then by hypothesis index."""
    if hyps.depths.shape[:2] != img.depth_logits.shape[:2] or hyps.count != img.hypotheses:
        raise DimensionMismatchError("hypotheses must match the depth logits",
                                     {"hypotheses": hyps.depths.shape, "depth_logits": img.depth_logits.shape})

    rows, cols = np.nonzero(hyps.valid)
    count = hyps.count
    weights = softmax(img.depth_logits[rows, cols], axis=1)
    depths = hyps.depths[rows, cols]

    rep_rows = np.repeat(rows, count)
    rep_cols = np.repeat(cols, count)
    flat_depths = depths.reshape(-1)
    if len(flat_depths):
        points = back_project_pixels(rep_cols + 0.5, rep_rows + 0.5, flat_depths, ex, k)
    else:
        points = np.zeros((0, 3))

    return VirtualPointSet(
        rows=rep_rows,
        cols=rep_cols,
        depths=flat_depths,
        weights=weights.reshape(-1),
        features=np.repeat(img.features[:, rows, cols].T, count, axis=0),
        points=points,
        hypothesis_index=np.tile(np.arange(count), len(rows)),
    )


def _bev_slots(points: np.ndarray, spec: BevGridSpec, z_bins: Optional[VoxelGridSpec]):
    ix, iy, inside = spec.cell_index(points)
    iz = None
    if z_bins is not None:
        iz = np.floor((points[:, 2] - z_bins.z_min) / z_bins.voxel).astype(np.int64)
        inside = inside & (iz >= 0) & (iz < z_bins.depth_bins)
    return ix * spec.n_y + iy, iz, inside


def pool_to_bev(vps: VirtualPointSet, spec: BevGridSpec,
                z_bins: Optional[VoxelGridSpec] = None) -> BevFeatureMap:
    """
    Sum weighted virtual-point features into BEV cells.

    With z_bins, a point at height bin h adds its feature vector f to
    channels c * D + h (class-major), so channels must equal len(f) * D.
    Points outside the grid are dropped.
    """
    feature_dim = vps.features.shape[1] if vps.features.ndim == 2 else 0
    depth_bins = z_bins.depth_bins if z_bins is not None else 1
    if feature_dim * depth_bins != spec.channels:
        raise DimensionMismatchError("BEV channels must equal feature size times height bins",
                                     {"channels": spec.channels, "features": feature_dim, "bins": depth_bins})

    cells = spec.n_x * spec.n_y
    target = np.zeros((cells, feature_dim, depth_bins))
    if len(vps):
        linear, iz, inside = _bev_slots(vps.points, spec, z_bins)
        weighted = vps.weighted_features()[inside]
        height = iz[inside] if iz is not None else np.zeros(int(inside.sum()), dtype=np.int64)
        np.add.at(target, (linear[inside], slice(None), height), weighted)
        log_debug(f"Pooled {int(inside.sum())}/{len(vps)} virtual points into BEV")

    flat = target.reshape(cells, spec.channels)
    return BevFeatureMap(flat.T.reshape(spec.channels, spec.n_x, spec.n_y))


def bev_coverage(vps: VirtualPointSet, spec: BevGridSpec) -> np.ndarray:
    """H x W flags of BEV cells that receive at least one virtual point."""
    covered = np.zeros(spec.n_x * spec.n_y, dtype=bool)
    if len(vps):
        linear, _, inside = _bev_slots(vps.points, spec, None)
        covered[linear[inside]] = True
    return covered.reshape(spec.n_x, spec.n_y)


def lift_to_bev(img: ImageFeatureMap, hyps: DepthHypotheses, ex: Extrinsics, k: CameraIntrinsics,
                spec: BevGridSpec, z_bins: Optional[VoxelGridSpec] = None) -> BevFeatureMap:
    """Softmax-weight every hypothesis, back-project and pool into BEV."""
    return pool_to_bev(build_virtual_points(img, hyps, ex, k), spec, z_bins)


def single_hypothesis_points(features: np.ndarray, depth: DepthMap,
                             ex: Extrinsics, k: CameraIntrinsics) -> VirtualPointSet:
    """Baseline lifting: one weight-1 virtual point per pixel at its own depth."""
    hyps = DepthHypotheses(depths=depth.values[..., None], valid=depth.values > 0)
    img = ImageFeatureMap(features, np.zeros(depth.shape + (1,)))
    return build_virtual_points(img, hyps, ex, k)


def single_hypothesis_lift(features: np.ndarray, depth: DepthMap, ex: Extrinsics, k: CameraIntrinsics,
                           spec: BevGridSpec, z_bins: Optional[VoxelGridSpec] = None) -> BevFeatureMap:
    return pool_to_bev(single_hypothesis_points(features, depth, ex, k), spec, z_bins)


def voxelize_lidar_to_bev(cloud: PointCloud, grid: VoxelGridSpec, num_classes: int) -> BevFeatureMap:
    """
    LiDAR BEV features: per-voxel class fractions in channels class * D + h.

    The empty-class channels stay zero; voxels without points are all-zero.
    """
    class_count = num_classes + 1
    n_x, n_y, n_z = grid.shape
    counts = np.zeros((class_count, n_z, n_x, n_y))
    if len(cloud):
        if np.any(cloud.classes < 0) or np.any(cloud.classes >= num_classes):
            raise DataError("point classes must lie in 0..num_classes-1", {"num_classes": num_classes})
        index, inside = grid.voxel_index(cloud.points)
        index = index[inside]
        np.add.at(counts, (cloud.classes[inside], index[:, 2], index[:, 0], index[:, 1]), 1.0)
    totals = counts.sum(axis=0, keepdims=True)
    fractions = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return BevFeatureMap(fractions.reshape(class_count * n_z, n_x, n_y))


def normalize_bev(bev: BevFeatureMap, depth_bins: Optional[int] = None) -> BevFeatureMap:
    """
    L1-normalize features per BEV cell.

    With depth_bins, channels are read class-major (class, height) and each
    (height, cell) is normalized over classes instead. All-zero slots stay zero.
    """
    features = np.abs(bev.features)
    if depth_bins is None:
        totals = features.sum(axis=0, keepdims=True)
        return BevFeatureMap(np.divide(bev.features, totals, out=np.zeros_like(features), where=totals > 0))

    channels, height, width = bev.features.shape
    if channels % depth_bins:
        raise DimensionMismatchError("channels must be a multiple of depth_bins",
                                     {"channels": channels, "depth_bins": depth_bins})
    blocks = bev.features.reshape(channels // depth_bins, depth_bins, height, width)
    totals = np.abs(blocks).sum(axis=0, keepdims=True)
    normalized = np.divide(blocks, totals, out=np.zeros_like(blocks), where=totals > 0)
    return BevFeatureMap(normalized.reshape(channels, height, width))
