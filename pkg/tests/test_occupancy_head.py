"""Tests for channel-to-height decoding."""

import numpy as np
import pytest
from PIL import Image

from src.core.config import GridConfig
from src.core.exceptions import ConfigError, DataError, DimensionMismatchError
from src.core.models import BevFeatureMap, OccupancyGrid
from src.core.occupancy_head import (
    apply_empty_floor,
    channel_to_height,
    decode_labels,
    height_bins,
    height_to_channel,
    write_occupancy_slices,
)


class TestChannelToHeight:

    def test_occ3d_layout(self):
        grid = GridConfig().occ3d_grid()
        depth_bins = height_bins(-1.0, 5.4, 0.4)
        assert depth_bins == grid.depth_bins == 16
        class_count = GridConfig().OCC3D_NUM_CLASSES + 1
        assert class_count * depth_bins == 272

        features = np.zeros((272, 3, 2))
        assert channel_to_height(features, class_count, depth_bins).shape == (17, 16, 3, 2)

    def test_index_mapping(self, rng):
        # batch 2, three classes of four height bins
        source = rng.normal(size=(2, 12, 5, 6))
        logits = channel_to_height(source, 3, 4)
        assert logits.shape == (2, 3, 4, 5, 6)
        assert logits[1, 1, 1, 4, 3] == source[1, 5, 4, 3]
        for c in range(12):
            np.testing.assert_array_equal(logits[:, c // 4, c % 4], source[:, c])

    def test_round_trip_is_lossless(self, rng):
        bev = BevFeatureMap(rng.normal(size=(10, 4, 3)))
        logits = channel_to_height(bev, 5, 2)
        np.testing.assert_array_equal(height_to_channel(logits), bev.features)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            channel_to_height(np.zeros((10, 2, 2)), 4, 3)
        with pytest.raises(ConfigError):
            channel_to_height(np.zeros((10, 2, 2)), 0, 3)
        with pytest.raises(DataError):
            channel_to_height(np.zeros((10, 2)), 5, 2)

    @pytest.mark.parametrize("z_min, z_max, voxel", [(0.0, 1.0, 0.3), (1.0, 0.0, 0.5), (0.0, 1.0, 0.0)])
    def test_invalid_height_range(self, z_min, z_max, voxel):
        with pytest.raises(ConfigError):
            height_bins(z_min, z_max, voxel)


class TestDecode:

    def test_one_hot_logits(self):
        logits = np.zeros((3, 2, 2, 2))
        logits[2] = 1.0
        logits[0, 1, 0, 1] = 5.0
        logits[1, 0, 1, 1] = 5.0
        grid = decode_labels(logits)
        assert grid.shape == (2, 2, 2)
        assert grid.num_classes == 2
        assert grid.labels[0, 1, 1] == 0
        assert grid.labels[1, 1, 0] == 1
        assert grid.occupied().sum() == 2

    def test_ties_go_to_the_lowest_class(self):
        grid = decode_labels(np.ones((4, 1, 1, 1)))
        assert grid.labels[0, 0, 0] == 0

    def test_matches_naive_argmax(self, rng):
        logits = rng.integers(0, 3, size=(5, 3, 4, 6)).astype(np.float64)
        grid = decode_labels(logits)
        class_count, depth_bins, height, width = logits.shape
        for i in range(height):
            for j in range(width):
                for h in range(depth_bins):
                    scores = [logits[c, h, i, j] for c in range(class_count)]
                    best = max(range(class_count), key=lambda c: (scores[c], -c))
                    assert grid.labels[i, j, h] == best

    def test_invalid_logits(self):
        with pytest.raises(DataError):
            decode_labels(np.zeros((3, 2, 2)))
        with pytest.raises(DataError):
            decode_labels(np.zeros((1, 2, 2, 2)))
        bad = np.zeros((2, 1, 1, 1))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(DataError):
            decode_labels(bad)

    def test_empty_floor(self):
        logits = np.zeros((3, 1, 1, 2))
        logits[0, 0, 0, 0] = 0.05
        logits[1, 0, 0, 1] = 0.6
        floored = apply_empty_floor(logits, 0.1)
        assert not logits[2].any()
        grid = decode_labels(floored)
        assert grid.labels[0, 0, 0] == 2
        assert grid.labels[0, 1, 0] == 1


class TestSlices:

    def test_one_slice_per_height_bin(self, tmp_path):
        labels = np.full((3, 2, 2), 4, dtype=np.int64)
        labels[0, 0, 1] = 3
        labels[2, 1, 0] = 0
        paths = write_occupancy_slices(OccupancyGrid(labels, 4), tmp_path, prefix="occ")
        assert [p.name for p in paths] == ["occ_z00.pgm", "occ_z01.pgm"]
        with Image.open(paths[1]) as image:
            pixels = np.array(image)
        assert pixels.shape == (3, 2)
        assert pixels[0, 0] == 255
        assert pixels[1, 0] == 0
        with Image.open(paths[0]) as image:
            assert np.array(image)[2, 1] == round(255 / 4)
