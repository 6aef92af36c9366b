"""Tests for tensor, point cloud, camera and report files."""

import numpy as np
import pytest
from PIL import Image

from src.core.exceptions import DataError
from src.core.models import PointCloud
from src.utils.file_utils import (
    load_camera,
    load_point_cloud,
    load_point_cloud_csv,
    load_points,
    load_tensor,
    read_json,
    save_camera,
    save_pgm,
    save_point_cloud,
    save_tensor,
    write_csv,
    write_json,
)


class TestTensors:

    @pytest.mark.parametrize("dtype, values", [
        ("f64", np.linspace(-1.0, 1.0, 24).reshape(2, 3, 4)),
        ("u8", np.arange(12, dtype=np.uint8).reshape(3, 4)),
        ("u16", np.array([0, 1, 65535])),
    ])
    def test_save_and_load(self, tmp_path, dtype, values):
        path = save_tensor(tmp_path / "t", values, dtype)
        assert path.name == "t.bin"
        assert read_json(tmp_path / "t.json") == {"shape": list(values.shape), "dtype": dtype, "order": "C"}
        np.testing.assert_array_equal(load_tensor(tmp_path / "t"), values)

    def test_little_endian_layout(self, tmp_path):
        save_tensor(tmp_path / "t", np.array([1, 256]), "u16")
        assert (tmp_path / "t.bin").read_bytes() == b"\x01\x00\x00\x01"

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(DataError):
            save_tensor(tmp_path / "t", np.zeros(2), "f16")

    def test_missing_or_truncated(self, tmp_path):
        with pytest.raises(DataError):
            load_tensor(tmp_path / "nothing")
        save_tensor(tmp_path / "t", np.zeros(4), "f64")
        (tmp_path / "t.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(DataError):
            load_tensor(tmp_path / "t")


class TestPointClouds:

    def test_binary_container(self, tmp_path):
        cloud = PointCloud(np.array([[0.5, -1.25, 2.0], [3.0, 0.0, -0.5]]), np.array([2, 0]))
        path = save_point_cloud(tmp_path / "lidar.pts", cloud)
        raw = path.read_bytes()
        assert raw[:8] == b"OCCPTS01"
        assert len(raw) == 16 + 2 * 16
        restored = load_point_cloud(path)
        np.testing.assert_array_equal(restored.points, cloud.points)
        np.testing.assert_array_equal(restored.classes, cloud.classes)

    def test_empty_cloud(self, tmp_path):
        path = save_point_cloud(tmp_path / "empty.pts", PointCloud.empty())
        assert len(load_point_cloud(path)) == 0

    def test_corrupt_files(self, tmp_path):
        path = tmp_path / "bad.pts"
        path.write_bytes(b"NOTPOINTS" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_point_cloud(path)
        good = save_point_cloud(tmp_path / "good.pts", PointCloud(np.zeros((2, 3)), np.zeros(2, dtype=np.int64)))
        good.write_bytes(good.read_bytes()[:-4])
        with pytest.raises(DataError):
            load_point_cloud(good)

    def test_csv_fixture(self, tmp_path):
        path = tmp_path / "points.csv"
        path.write_text("x,y,z,class_id\n1.0,2.0,3.0,1\n-1.5,0.0,0.25,0\n")
        cloud = load_point_cloud_csv(path)
        np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0], [-1.5, 0.0, 0.25]])
        np.testing.assert_array_equal(cloud.classes, [1, 0])

    def test_csv_header_is_checked(self, tmp_path):
        path = tmp_path / "points.csv"
        path.write_text("x,y,z\n1,2,3\n")
        with pytest.raises(DataError):
            load_point_cloud_csv(path)

    def test_load_points_dispatches_on_suffix(self, tmp_path):
        csv_path = tmp_path / "points.csv"
        csv_path.write_text("x,y,z,class_id\n1.0,2.0,3.0,1\n")
        binary = save_point_cloud(tmp_path / "points.pts", load_points(csv_path))
        restored = load_points(binary)
        np.testing.assert_array_equal(restored.points, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(restored.classes, [1])


class TestReports:

    def test_camera_round_trip(self, tmp_path, forward_camera):
        restored = load_camera(save_camera(tmp_path / "front.json", forward_camera))
        assert restored.name == "front"
        assert restored.extrinsics.allclose(forward_camera.extrinsics)
        assert restored.intrinsics == forward_camera.intrinsics

    def test_json_is_deterministic(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": np.float64(0.5), "a": np.arange(2)})
        write_json(tmp_path / "b.json", {"a": [0, 1], "b": 0.5})
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(DataError):
            read_json(path)
        with pytest.raises(DataError):
            read_json(tmp_path / "missing.json")

    def test_csv_blanks_missing_values(self, tmp_path):
        path = write_csv(tmp_path / "rows.csv", [{"a": 1, "b": None}, {"a": 2}], ["a", "b"])
        assert path.read_text() == "a,b\n1,\n2,\n"

    def test_pgm_scaling(self, tmp_path):
        path = save_pgm(tmp_path / "img.pgm", np.array([[0.0, 1.0], [2.0, 4.0]]))
        assert path.read_bytes().startswith(b"P5")
        with Image.open(path) as image:
            np.testing.assert_array_equal(np.array(image), [[0, 64], [128, 255]])
        with pytest.raises(DataError):
            save_pgm(tmp_path / "bad.pgm", np.zeros(3))
