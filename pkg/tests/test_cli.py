"""Tests for the occ-forge command line."""

import json

import numpy as np
import pytest

from main import COMMANDS, build_config, create_parser, main
from src.core.pipeline import ArtifactStore
from src.utils.file_utils import read_json, save_camera


def cli(work_dir, *args):
    return main([*args, "--work-dir", str(work_dir), "--quiet", "--workers", "1"])


def quiet(*args):
    return main([*args, "--quiet", "--workers", "1"])


class TestCommands:

    def test_run(self, tmp_path):
        assert cli(tmp_path, "run") == 0
        report = read_json(tmp_path / "report.json")
        assert report["fused"]["miou"] >= 0.8
        assert (tmp_path / "performance.json").exists()
        assert (tmp_path / "logs" / "occ_forge.log").exists()

    def test_stage_by_stage(self, tmp_path):
        for stage in ["generate", "project", "diffuse", "lift", "fuse", "distill-weights", "predict", "eval"]:
            assert cli(tmp_path, stage) == 0, stage
        assert (tmp_path / "scene.json").exists()
        assert (tmp_path / "distill.json").exists()
        assert read_json(tmp_path / "metrics.json")["miou"] >= 0.8

    def test_kl(self, tmp_path):
        assert cli(tmp_path, "kl", "--alpha", "2", "--beta", "0.5") == 0
        report = read_json(tmp_path / "distill.json")
        assert report["alpha"] == 2.0
        assert report["beta"] == 0.5

    def test_scene_file(self, tmp_path, scene):
        path = scene.save(tmp_path / "custom.json")
        assert cli(tmp_path / "out", "generate", "--scene", str(path)) == 0
        assert read_json(tmp_path / "out" / "scene.json") == read_json(path)

    def test_documented_stage_syntax(self, tmp_path, scene):
        spec = scene.save(tmp_path / "scene.json")
        scene.save(tmp_path / "s.json")
        out = tmp_path / "dir"
        assert quiet("generate", "--spec", str(spec), "--out", str(out)) == 0
        assert quiet("project", "--out", str(out)) == 0
        assert quiet("diffuse", "--out", str(out), "--radius", "7") == 0
        assert quiet("lift", "--scene", str(tmp_path / "s.json"), "--radius", "7", "--range-m", "1.0",
                     "--layers", "8", "--out", str(out)) == 0
        assert quiet("fuse", "--k", "7", "--direction", "camera_source", "--out", str(out)) == 0
        assert quiet("distill-weights", "--alpha", "1", "--beta", "1", "--out", str(out)) == 0
        assert quiet("predict", "--out", str(out)) == 0
        assert quiet("eval", "--visible-mask", "--bins", "10,20,30,40", "--out", str(out)) == 0

        metrics = read_json(out / "metrics.json")
        assert metrics["visible_mask"] is True
        assert [b["upper"] for b in metrics["bins"]] == [10.0, 20.0, 30.0, 40.0]
        distill = read_json(out / "distill.json")
        assert distill["alpha"] == 1.0 and distill["beta"] == 1.0
        losses = read_json(out / "losses.json")
        assert set(losses["components"]) == {"depth", "seg", "pts", "mask_occ", "distill"}
        assert losses["total"] > 0

    def test_fuse_direction_selects_the_query_map(self, tmp_path):
        for stage in ["generate", "project", "diffuse", "lift"]:
            assert cli(tmp_path, stage) == 0, stage
        store = ArtifactStore(tmp_path)
        assert cli(tmp_path, "fuse", "--k", "7", "--direction", "camera_source") == 0
        camera_source = store.load("fused_bev", "fuse")
        assert cli(tmp_path, "fuse", "--k", "7", "--direction", "lidar_source") == 0
        lidar_source = store.load("fused_bev", "fuse")
        assert camera_source.shape == lidar_source.shape
        assert not np.array_equal(camera_source, lidar_source)

    def test_ablate(self, tmp_path):
        assert cli(tmp_path, "ablate", "--ablate-depth", "1:2,2:2", "--ablate-windows", "3") == 0
        report = read_json(tmp_path / "ablation.json")
        assert [row["parameter"] for row in report["rows"]] == ["depth", "depth", "window"]
        assert [row["range_m"] for row in report["rows"][:2]] == [1.0, 2.0]
        assert report["rows"][2]["window_k"] == 3
        header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
        assert header.startswith("parameter,range_m,layers,window_k,binary_iou,miou")

    def test_point_csv_replaces_the_sweep(self, tmp_path):
        points = tmp_path / "cloud.csv"
        points.write_text("x,y,z,class_id\n1.0,0.5,0.2,1\n-2.0,1.5,0.2,2\n")
        assert cli(tmp_path / "out", "generate", "--points", str(points)) == 0
        restored = ArtifactStore(tmp_path / "out").load_cloud()
        np.testing.assert_allclose(restored.points, [[1.0, 0.5, 0.2], [-2.0, 1.5, 0.2]], atol=1e-6)
        np.testing.assert_array_equal(restored.classes, [1, 2])

    def test_point_csv_with_unknown_class(self, tmp_path):
        points = tmp_path / "cloud.csv"
        points.write_text("x,y,z,class_id\n1.0,0.5,0.2,99\n")
        assert cli(tmp_path / "out", "generate", "--points", str(points)) == 3

    def test_camera_json_replaces_the_rig(self, tmp_path, scene):
        front = save_camera(tmp_path / "front.json", scene.cameras[0])
        assert cli(tmp_path / "out", "generate", "--camera", str(front)) == 0
        stored = read_json(tmp_path / "out" / "scene.json")
        assert [c["name"] for c in stored["cameras"]] == [scene.cameras[0].name]
        assert cli(tmp_path / "out", "project") == 0


class TestExitCodes:

    def test_missing_artifacts_are_data_errors(self, tmp_path):
        assert cli(tmp_path, "project") == 3
        assert cli(tmp_path, "generate") == 0
        assert cli(tmp_path, "fuse") == 3

    def test_even_window_is_a_config_error(self, tmp_path):
        assert cli(tmp_path, "run", "--window", "4") == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"window_size": 5}))
        assert cli(tmp_path, "run", "--config", str(path)) == 2

    def test_bad_command(self, tmp_path):
        assert cli(tmp_path, "train") == 2

    def test_bad_bins(self, tmp_path):
        assert cli(tmp_path, "eval", "--bins", "4,2") == 2

    def test_unexpected_error_is_logged_with_traceback(self, tmp_path, mocker):
        mocker.patch("main.run_command", side_effect=RuntimeError("boom"))
        assert cli(tmp_path, "run") == 1
        errors = (tmp_path / "logs" / "errors.log").read_text()
        assert "boom" in errors
        assert "command=run" in errors
        assert "RuntimeError" in errors

    def test_invalid_direction(self, tmp_path):
        assert cli(tmp_path, "fuse", "--direction", "both") == 2

    def test_even_ablation_window(self, tmp_path):
        assert cli(tmp_path, "ablate", "--ablate-windows", "3,4") == 2


class TestConfigPrecedence:

    def test_file_wins_over_flags(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"window_k": 5, "distance_bins": [1, 3]}))
        args = create_parser().parse_args(["run", "--window", "3", "--seed", "7", "--config", str(path)])
        cfg = build_config(args)
        assert cfg.window_k == 5
        assert cfg.seed == 7
        assert cfg.distance_bins == [1.0, 3.0]

    def test_sweep_flag(self):
        args = create_parser().parse_args(["perturb", "--sweep", "0.05:0.5,0.1:1"])
        assert build_config(args).sweep == [(0.05, 0.5), (0.1, 1.0)]

    def test_layer_and_scale_flags(self):
        args = create_parser().parse_args(["lift", "--layers", "8", "--layers-meaning", "total",
                                           "--range-m", "2", "--scale-by", "query"])
        cfg = build_config(args)
        assert cfg.hypotheses_per_side() == 4
        assert cfg.range_m == 2.0
        assert cfg.scale_by == "query"

    def test_every_command_parses(self):
        parser = create_parser()
        for command in COMMANDS:
            assert parser.parse_args([command]).command == command

    def test_aliases(self, tmp_path):
        args = create_parser().parse_args(["fuse", "--k", "5", "--out", str(tmp_path), "--direction", "lidar_source"])
        cfg = build_config(args)
        assert args.work_dir == tmp_path
        assert cfg.window_k == 5
        assert cfg.direction == "lidar_source"

    def test_ablation_flags(self):
        args = create_parser().parse_args(["ablate", "--ablate-depth", "1:4,2:8", "--ablate-windows", "3,5"])
        cfg = build_config(args)
        assert cfg.ablation_depth == [(1.0, 4), (2.0, 8)]
        assert cfg.ablation_windows == [3, 5]
