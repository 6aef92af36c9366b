"""Tests for the procedural scene: ray casting, rendering, ground truth and visibility."""

import numpy as np
import pytest

from src.core.exceptions import ConfigError, DataError
from src.core.geometry import back_project_pixels, extrinsics_from_pose
from src.core.models import CameraModel, VoxelGridSpec
from src.core.synthetic_scene import (
    TOY_ORIGIN,
    BoxPrimitive,
    GroundSpec,
    LidarSpec,
    SceneSpec,
    cast_rays,
    empty_scene,
    ground_truth_occupancy,
    lidar_visibility_mask,
    random_scene,
    raycast_lidar,
    render_semantics_and_depth,
    toy_lidar,
    toy_scene,
)

TOY_GRID = VoxelGridSpec(-4.0, 4.0, -4.0, 4.0, -1.0, 2.2, 0.4)


def on_some_surface(points, primitives, tol=1e-6):
    hit = np.zeros(len(points), dtype=bool)
    for p in primitives:
        inside = np.all((points >= p.lo - tol) & (points <= p.hi + tol), axis=1)
        face = np.min(np.minimum(np.abs(points - p.lo), np.abs(points - p.hi)), axis=1) < tol
        hit |= inside & face
    return hit


class TestRayCasting:

    def test_flat_ground_returns_lie_on_the_ground(self):
        scene = SceneSpec(
            seed=0, num_classes=1,
            lidar=LidarSpec(origin=(0.0, 0.0, 1.0), ring_count=4, elevation_min_deg=-30.0,
                            elevation_max_deg=-10.0, azimuth_step_deg=2.0),
            ground=GroundSpec(top_z=0.0, thickness=0.5, class_id=0, half_extent=100.0),
        )
        scan = raycast_lidar(scene)
        assert len(scan) == scene.lidar.ray_count == 720
        np.testing.assert_allclose(scan.points[:, 2], 0.0, atol=1e-9)
        assert not scan.classes.any()
        np.testing.assert_array_equal(scan.ray_ids, np.arange(720))

    def test_single_ring_against_a_unit_box(self):
        scene = SceneSpec(
            seed=0, num_classes=1,
            lidar=LidarSpec(origin=(0.0, 0.0, 0.0), ring_count=1, elevation_min_deg=0.0,
                            elevation_max_deg=0.0, azimuth_step_deg=1.0),
            boxes=(BoxPrimitive.from_bounds((2.0, -0.5, -0.5), (3.0, 0.5, 0.5), 0),),
        )
        scan = raycast_lidar(scene)
        # azimuths -14..14 degrees reach the x = 2 face
        assert len(scan) == 29
        np.testing.assert_allclose(scan.points[:, 0], 2.0, atol=1e-12)
        assert set(scan.ray_ids.tolist()) == set(range(15)) | set(range(346, 360))

    def test_no_rays(self):
        scene = SceneSpec(seed=0, num_classes=1, lidar=LidarSpec(ring_count=0),
                          ground=GroundSpec(0.0, 1.0, 0, 10.0))
        scan = raycast_lidar(scene)
        assert len(scan) == 0
        assert len(scan.cloud()) == 0

    def test_max_range_limits_returns(self):
        scene = SceneSpec(
            seed=0, num_classes=1,
            lidar=LidarSpec(ring_count=1, elevation_min_deg=0.0, elevation_max_deg=0.0, max_range=1.5),
            boxes=(BoxPrimitive.from_bounds((2.0, -0.5, -0.5), (3.0, 0.5, 0.5), 0),),
        )
        assert len(raycast_lidar(scene)) == 0

    def test_nearest_primitive_wins_and_misses_are_marked(self):
        primitives = [
            BoxPrimitive.from_bounds((4.0, -1.0, -1.0), (5.0, 1.0, 1.0), 0),
            BoxPrimitive.from_bounds((2.0, -1.0, -1.0), (3.0, 1.0, 1.0), 1),
        ]
        t, index = cast_rays(primitives, np.zeros((2, 3)), np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]))
        assert t[0] == pytest.approx(2.0)
        assert index[0] == 1
        assert t[1] == np.inf
        assert index[1] == -1

    def test_rays_starting_inside_ignore_the_box(self):
        box = BoxPrimitive.from_bounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 0)
        t, index = cast_rays([box], np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
        assert index[0] == -1

    def test_lidar_points_are_reachable_along_their_rays(self, scene):
        scan = raycast_lidar(scene)
        origin = np.asarray(scene.lidar.origin)
        primitives = scene.primitives()
        t, index = cast_rays(primitives, np.broadcast_to(origin, scan.points.shape), scan.points - origin)
        np.testing.assert_allclose(t, 1.0, atol=1e-9)
        classes = np.array([p.class_id for p in primitives])[index]
        np.testing.assert_array_equal(classes, scan.classes)

    def test_workers_and_seeds(self):
        noisy = SceneSpec(seed=3, num_classes=4, lidar=toy_lidar(noise_sigma=0.02),
                          ground=toy_scene().ground, boxes=toy_scene().boxes)
        serial = raycast_lidar(noisy, workers=1)
        threaded = raycast_lidar(noisy, workers=4)
        np.testing.assert_array_equal(serial.points, threaded.points)
        np.testing.assert_array_equal(serial.ray_ids, threaded.ray_ids)

        reseeded = raycast_lidar(SceneSpec(seed=4, num_classes=4, lidar=noisy.lidar,
                                           ground=noisy.ground, boxes=noisy.boxes))
        assert not np.array_equal(serial.ranges, reseeded.ranges)


class TestRendering:

    def test_empty_scene_renders_background(self):
        scene = empty_scene()
        mask, depth = render_semantics_and_depth(scene, scene.camera("front"))
        assert mask.shape == (48, 64)
        assert not mask.labels.any()
        assert not depth.values.any()

    def test_box_behind_the_camera_is_not_rendered(self, forward_camera):
        scene = SceneSpec(seed=0, num_classes=1, lidar=LidarSpec(),
                          boxes=(BoxPrimitive.from_bounds((-3.0, -1.0, -1.0), (-2.0, 1.0, 1.0), 0),),
                          cameras=(forward_camera,))
        mask, _ = render_semantics_and_depth(scene, forward_camera)
        assert not mask.labels.any()

    def test_box_in_front_fills_the_centre(self, forward_camera):
        scene = SceneSpec(seed=0, num_classes=2, lidar=LidarSpec(),
                          boxes=(BoxPrimitive.from_bounds((4.0, -1.0, -1.0), (5.0, 1.0, 1.0), 1),),
                          cameras=(forward_camera,))
        mask, depth = render_semantics_and_depth(scene, forward_camera)
        assert mask.labels[24, 32] == 2
        assert depth.values[24, 32] == pytest.approx(4.0)
        assert mask.labels[0, 0] == 0

    def test_rendered_depth_lies_on_a_surface(self, scene):
        for camera in scene.cameras:
            mask, depth = render_semantics_and_depth(scene, camera)
            rows, cols = np.nonzero(depth.values)
            assert len(rows) > 0
            assert np.array_equal(depth.values > 0, mask.labels > 0)
            points = back_project_pixels(cols + 0.5, rows + 0.5, depth.values[rows, cols],
                                         camera.extrinsics, camera.intrinsics)
            assert on_some_surface(points, scene.primitives()).all()

    def test_front_camera_sees_ground_and_a_box(self, scene):
        mask, _ = render_semantics_and_depth(scene, scene.camera("front"))
        labels = set(np.unique(mask.labels).tolist())
        assert {1, 2} <= labels

    def test_unknown_camera(self, scene):
        with pytest.raises(DataError):
            scene.camera("left")


class TestGroundTruth:

    def test_empty_scene_is_all_empty(self):
        truth = ground_truth_occupancy(empty_scene(), TOY_GRID)
        assert truth.shape == (20, 20, 8)
        assert not truth.occupied().any()

    def test_box_covers_the_voxel_centres_inside_it(self):
        scene = SceneSpec(seed=0, num_classes=2, lidar=LidarSpec(),
                          boxes=(BoxPrimitive.from_bounds((0.05, 0.05, -0.1), (0.75, 0.75, 0.3), 1),))
        truth = ground_truth_occupancy(scene, TOY_GRID)
        assert truth.occupied().sum() == 4
        assert (truth.labels[10:12, 10:12, 2] == 1).all()

    def test_toy_scene_counts(self, scene):
        truth = ground_truth_occupancy(scene, TOY_GRID)
        assert (truth.labels[:, :, 0] == 0).all()
        assert (truth.labels == 0).sum() == 400
        assert (truth.labels == 1).sum() == 27
        assert (truth.labels == 2).sum() == 27
        assert (truth.labels == 3).sum() == 18
        assert truth.labels[15, 13, 2] == 1

    def test_visibility(self, scene):
        scan = raycast_lidar(scene)
        visible = lidar_visibility_mask(scene, scan, TOY_GRID)
        truth = ground_truth_occupancy(scene, TOY_GRID)

        index, inside = TOY_GRID.voxel_index(scan.points)
        assert visible[tuple(index[inside].T)].all()
        origin_voxel, _ = TOY_GRID.voxel_index(np.array([TOY_ORIGIN]))
        assert visible[tuple(origin_voxel[0])]
        # box interior is hidden behind its own faces
        assert not visible[15, 13, 2]
        assert visible[truth.occupied()].sum() < truth.occupied().sum()

    def test_visibility_does_not_depend_on_workers(self, scene):
        scan = raycast_lidar(scene)
        np.testing.assert_array_equal(lidar_visibility_mask(scene, scan, TOY_GRID, workers=1),
                                      lidar_visibility_mask(scene, scan, TOY_GRID, workers=4))


class TestSceneSpec:

    def test_json_round_trip(self, scene, tmp_path):
        path = scene.save(tmp_path / "scene.json")
        restored = SceneSpec.load(path)
        assert restored.to_dict() == scene.to_dict()
        assert [c.name for c in restored.cameras] == ["front", "back"]

    def test_class_out_of_range(self):
        with pytest.raises(ConfigError):
            SceneSpec(seed=0, num_classes=4, lidar=LidarSpec(),
                      boxes=(BoxPrimitive.from_bounds((0, 0, 0), (1, 1, 1), 4),))

    def test_invalid_specs(self, forward_camera):
        with pytest.raises(ConfigError):
            BoxPrimitive((0.0, 0.0, 0.0), (1.0, 0.0, 1.0), 0)
        with pytest.raises(ConfigError):
            LidarSpec(azimuth_step_deg=0.0)
        with pytest.raises(ConfigError):
            SceneSpec(seed=0, num_classes=1, lidar=LidarSpec(), cameras=(forward_camera, forward_camera))
        with pytest.raises(ConfigError):
            SceneSpec(seed=0, num_classes=2, lidar=LidarSpec(), ground=GroundSpec(0.0, 1.0, 0, 2.0),
                      boxes=(BoxPrimitive.from_bounds((1.0, 1.0, 0.0), (3.0, 2.0, 1.0), 1),))
        with pytest.raises(ConfigError):
            SceneSpec.from_dict({"seed": 0, "lidar": {}})

    def test_random_scene_is_deterministic_and_clear_of_the_sensor(self):
        a, b = random_scene(5), random_scene(5)
        assert a.to_dict() == b.to_dict()
        assert len(a.boxes) == 3
        origin = np.array([TOY_ORIGIN])
        for box in a.boxes:
            assert not box.contains(origin)[0]
            assert 1 <= box.class_id < a.num_classes

    def test_default_rig_shares_the_lidar_origin(self, scene):
        for camera in scene.cameras:
            np.testing.assert_allclose(camera.extrinsics.camera_center, TOY_ORIGIN, atol=1e-12)
        back = scene.camera("back")
        expected = extrinsics_from_pose(np.array(TOY_ORIGIN), 180.0)
        assert back.extrinsics.allclose(expected)
        assert isinstance(back, CameraModel)
