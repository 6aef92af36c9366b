"""
Channel-to-height decoding.

A BEV map with C = C_N * D channels is read as C_N classes times D height
bins, class-major: channel c holds (class c // D, height c % D). The
reshape is lossless; decode_labels then takes the per-voxel argmax.
"""

from pathlib import Path
from typing import List, Union

import numpy as np

from src.core.exceptions import ConfigError, DataError, DimensionMismatchError
from src.core.models import BevFeatureMap, OccupancyGrid
from src.utils.file_utils import save_pgm


def channel_to_height(bev: Union[BevFeatureMap, np.ndarray], class_count: int, depth_bins: int) -> np.ndarray:
    """
    Reshape (..., C, H, W) features into (..., C_N, D, H, W) logits.

    Raises:
        DimensionMismatchError: C != class_count * depth_bins
    """
    features = bev.features if isinstance(bev, BevFeatureMap) else np.asarray(bev)
    if class_count < 1 or depth_bins < 1:
        raise ConfigError("class_count and depth_bins must be positive",
                          {"class_count": class_count, "depth_bins": depth_bins})
    if features.ndim < 3:
        raise DataError("features must be at least C x H x W", {"ndim": features.ndim})
    channels = features.shape[-3]
    if channels != class_count * depth_bins:
        raise DimensionMismatchError("BEV channels must equal class_count * depth_bins",
                                     {"channels": channels, "class_count": class_count, "depth_bins": depth_bins})
    return features.reshape(features.shape[:-3] + (class_count, depth_bins) + features.shape[-2:])


def height_to_channel(logits: np.ndarray) -> np.ndarray:
    """Inverse of channel_to_height: (..., C_N, D, H, W) -> (..., C_N * D, H, W)."""
    logits = np.asarray(logits)
    if logits.ndim < 4:
        raise DataError("logits must be at least C_N x D x H x W", {"ndim": logits.ndim})
    lead = logits.shape[:-4]
    class_count, depth_bins, height, width = logits.shape[-4:]
    return logits.reshape(lead + (class_count * depth_bins, height, width))


def apply_empty_floor(logits: np.ndarray, floor: float) -> np.ndarray:
    """
    Raise the empty-class (last) logit to at least `floor`.

    With class-fraction features this turns "no class above floor" into
    empty, which is what the learned empty score does in a trained head.
    """
    logits = np.array(logits, dtype=np.float64)
    logits[-1] = np.maximum(logits[-1], floor)
    return logits


def decode_labels(logits: np.ndarray) -> OccupancyGrid:
    """
    Per-voxel argmax of C_N x D x H x W logits into an H x W x D grid.

    Ties go to the smallest class id. The last class is the empty class.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 4:
        raise DataError("logits must be C_N x D x H x W", {"ndim": logits.ndim})
    if logits.shape[0] < 2:
        raise DataError("logits need at least one known class plus empty", {"C_N": logits.shape[0]})
    if not np.all(np.isfinite(logits)):
        raise DataError("logits must be finite")
    labels = np.argmax(logits, axis=0)
    return OccupancyGrid(np.transpose(labels, (1, 2, 0)), logits.shape[0] - 1, logits)


def height_bins(z_min: float, z_max: float, voxel: float) -> int:
    """Number of height bins D for a z range; the range must be a multiple of the voxel size."""
    if voxel <= 0 or z_max <= z_min:
        raise ConfigError("need voxel > 0 and z_max > z_min", {"z_min": z_min, "z_max": z_max, "voxel": voxel})
    count = (z_max - z_min) / voxel
    rounded = int(round(count))
    if abs(count - rounded) > 1e-6:
        raise ConfigError("z range must be a multiple of the voxel size",
                          {"z_min": z_min, "z_max": z_max, "voxel": voxel})
    return rounded


def write_occupancy_slices(grid: OccupancyGrid, out_dir: Path, prefix: str = "occupancy") -> List[Path]:
    """One PGM per height bin: empty is black, class c is (c + 1) / N of full brightness."""
    out_dir = Path(out_dir)
    shade = np.where(grid.occupied(), grid.labels + 1, 0)
    return [
        save_pgm(out_dir / f"{prefix}_z{h:02d}.pgm", shade[:, :, h], max_value=grid.num_classes)
        for h in range(grid.shape[2])
    ]
