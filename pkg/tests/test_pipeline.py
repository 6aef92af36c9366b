"""End-to-end tests: fusion run, distillation path and the perturbation sweep."""

import numpy as np
import pytest

from src.core.config import PipelineConfig
from src.core.exceptions import ConfigError, DataError
from src.core.models import BevFeatureMap
from src.core.pipeline import (
    ABLATION_FIELDS,
    SWEEP_FIELDS,
    OccupancyPipeline,
    StageRunner,
    ablation_settings,
    perturbation_seed,
    run_ablation,
    run_fusion_pipeline,
    run_kl_path,
    run_perturbation_sweep,
)
from src.core.synthetic_scene import empty_scene, random_scene, toy_scene
from src.utils.file_utils import load_tensor, read_json


def toy_config(**overrides):
    return PipelineConfig.from_app_config().with_overrides(overrides)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    work_dir = tmp_path_factory.mktemp("run")
    grid, report = run_fusion_pipeline(toy_config(workers=4), toy_scene(0), work_dir)
    return grid, report, work_dir


class TestFusionRun:

    def test_toy_scene_is_recovered(self, toy_run):
        grid, report, _ = toy_run
        assert grid.shape == (20, 20, 8)
        assert report["fused"]["binary_iou"] >= 0.9
        assert report["fused"]["miou"] >= 0.8
        assert report["scene"] == {"seed": 0, "num_classes": 4, "boxes": 3, "cameras": ["front", "back"]}
        assert set(report) == {"scene", "fused", "camera_only", "losses", "distill", "bev_utilization"}

    def test_outputs_reload(self, toy_run):
        grid, report, work_dir = toy_run
        np.testing.assert_array_equal(load_tensor(work_dir / "occupancy"), grid.labels)
        assert load_tensor(work_dir / "fused_bev").shape == (40, 20, 20)
        assert len(list((work_dir / "slices").glob("*.pgm"))) == 8
        saved = read_json(work_dir / "report.json")
        assert saved["fused"]["miou"] == pytest.approx(report["fused"]["miou"])
        for name in ("metrics.json", "metrics_classes.csv", "metrics_bins.csv"):
            assert (work_dir / name).exists()

    def test_bev_utilization(self, toy_run):
        _, report, _ = toy_run
        utilization = report["bev_utilization"]
        assert utilization["cells"] == 400
        assert 0.0 < utilization["single_hypothesis"] <= utilization["sdg"] <= 1.0

    def test_sdg_reaches_at_least_the_single_hypothesis_cells(self):
        scene = toy_scene(0)
        pipeline = OccupancyPipeline(toy_config(workers=1), scene)
        products = pipeline.generate()
        for camera in scene.cameras:
            cam = pipeline.camera_products(camera, products)
            sdg, single = pipeline.coverage(camera, cam, products.renders[camera.name][0])
            assert single.any(), camera.name
            assert sdg.sum() >= single.sum(), camera.name

    def test_report_does_not_depend_on_workers(self, toy_run):
        _, report, _ = toy_run
        _, serial = run_fusion_pipeline(toy_config(workers=1), toy_scene(0))
        assert serial == report

    def test_empty_scene_has_undefined_metrics(self):
        grid, report = run_fusion_pipeline(toy_config(), empty_scene())
        assert not grid.occupied().any()
        assert report["fused"]["binary_iou"] is None
        assert report["fused"]["miou"] is None
        assert report["distill"]["n_ar"] == 0

    def test_class_count_mismatch(self):
        with pytest.raises(ConfigError):
            OccupancyPipeline(toy_config(num_classes=3), toy_scene(0))


class TestDistillationPath:

    def test_zero_camera_map_gives_empty_regions(self, tmp_path):
        cfg = toy_config()
        zeros = BevFeatureMap(np.zeros(cfg.grid.bev(cfg.channels).shape))
        weights, report = run_kl_path(cfg, toy_scene(0), camera_bev=zeros, work_dir=tmp_path)
        assert report["direction"] == "lidar_source"
        assert report["n_ar"] == 0 and report["n_ir"] == 0
        assert report["rho"] == 0.0
        assert report["loss"] == 0.0
        assert not weights.weights.any()
        for name in ("distill_weights.bin", "distill_weights.pgm", "distill.json"):
            assert (tmp_path / name).exists()

    @pytest.mark.parametrize("scene", [toy_scene(0), random_scene(3)])
    def test_regions_balance(self, scene):
        _, report = run_kl_path(toy_config(), scene)
        assert report["n_ar"] > 0
        assert report["n_ir"] > 0
        assert report["balanced"] is True
        assert report["ar_total"] == pytest.approx(report["ir_total"])
        assert report["total_weight"] == pytest.approx(2 * report["n_ar"])


class TestPerturbationSweep:

    def test_seed_modes(self):
        per_frame = toy_config(seed=5)
        assert perturbation_seed(per_frame, 0, 1) == 5001
        assert perturbation_seed(per_frame, 2, 1) == 7001
        per_sequence = toy_config(seed=5, perturb_mode="per_sequence")
        assert perturbation_seed(per_sequence, 0, 1) == perturbation_seed(per_sequence, 2, 1) == 5001

    def test_sweep(self, tmp_path):
        cfg = toy_config(perturb_trials=1)
        report = run_perturbation_sweep(cfg, toy_scene(0), [(0.0, 0.0), (0.05, 0.5), (0.2, 2.0)],
                                        work_dir=tmp_path, show_progress=False)
        still, small, large = report["magnitudes"]
        assert set(still) == set(SWEEP_FIELDS)
        assert still["mean_displacement_px"] == 0.0
        assert still["mean_delta_iou"] == 0.0
        assert still["mean_delta_miou"] == 0.0
        assert still["camera_mean_delta_iou"] == 0.0
        assert 0.0 < small["mean_displacement_px"] < large["mean_displacement_px"]
        assert report["mode"] == "per_frame"
        assert (tmp_path / "perturbation.json").exists()
        assert (tmp_path / "perturbation.csv").read_text().splitlines()[0] == ",".join(SWEEP_FIELDS)

    def test_negative_magnitudes(self):
        with pytest.raises(ConfigError):
            run_perturbation_sweep(toy_config(), toy_scene(0), [(-0.1, 0.0)], show_progress=False)


class TestAblation:

    def test_settings_order(self):
        cfg = toy_config(ablation_depth=[(1.0, 4), (2.0, 8)], ablation_windows=[5])
        assert ablation_settings(cfg) == [
            ("depth", {"range_m": 1.0, "layers": 4}),
            ("depth", {"range_m": 2.0, "layers": 8}),
            ("window", {"window_k": 5}),
        ]

    def test_default_grids(self):
        cfg = toy_config()
        assert len(cfg.ablation_depth) == 6
        assert cfg.ablation_windows == [3, 5, 7, 9]

    def test_ablation(self, tmp_path):
        cfg = toy_config(ablation_depth=[(1.0, 2)], ablation_windows=[1, 3], workers=1)
        report = run_ablation(cfg, toy_scene(0), work_dir=tmp_path, show_progress=False)
        depth, narrow, wide = report["rows"]
        assert set(depth) == set(ABLATION_FIELDS)
        assert (depth["range_m"], depth["layers"], depth["window_k"]) == (1.0, 2, cfg.window_k)
        assert (narrow["range_m"], narrow["layers"], narrow["window_k"]) == (cfg.range_m, cfg.layers, 1)
        assert wide["window_k"] == 3
        assert all(0.0 <= row["miou"] <= 1.0 for row in report["rows"])
        # window size only touches fusion, so the camera-only decode is shared
        assert narrow["camera_miou"] == wide["camera_miou"]
        assert report["baseline"]["window_k"] == cfg.window_k
        assert read_json(tmp_path / "ablation.json")["rows"] == report["rows"]
        assert (tmp_path / "ablation.csv").read_text().splitlines()[0] == ",".join(ABLATION_FIELDS)

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            run_ablation(toy_config(ablation_depth=[], ablation_windows=[]), toy_scene(0), show_progress=False)


class TestStageRunner:

    def test_stages_need_their_inputs(self, tmp_path):
        with pytest.raises(DataError):
            StageRunner(toy_config(), tmp_path)
        runner = StageRunner(toy_config(), tmp_path, toy_scene(0))
        with pytest.raises(DataError, match="occ-forge generate"):
            runner.project()

    def test_stage_chain_matches_the_fusion_run(self, tmp_path, toy_run):
        grid, _, _ = toy_run
        runner = StageRunner(toy_config(), tmp_path, toy_scene(0))
        runner.generate()
        runner.project()
        runner.diffuse()
        runner.lift()
        runner.fuse()
        runner.predict()
        summary = runner.eval()
        # lidar.pts stores f32 coordinates, so allow a stray boundary voxel
        agreement = (load_tensor(tmp_path / "occupancy") == grid.labels).mean()
        assert agreement >= 0.995
        assert summary["miou"] >= 0.8
        losses = read_json(tmp_path / "losses.json")
        assert set(losses["components"]) == {"depth", "seg", "pts", "mask_occ", "distill"}
        assert summary["total_loss"] == pytest.approx(losses["total"])
        assert summary["loss_distill"] == pytest.approx(losses["components"]["distill"])

    def test_fuse_follows_the_configured_direction(self, tmp_path):
        runner = StageRunner(toy_config(direction="lidar_source"), tmp_path, toy_scene(0))
        for stage in (runner.generate, runner.project, runner.diffuse, runner.lift):
            stage()
        assert runner.fuse()["direction"] == "lidar_source"
