"""Tests for AppConfig, environment overrides and PipelineConfig."""

import json
import os

import pytest

from src.core.config import AppConfig, PipelineConfig, get_config, reload_config
from src.core.exceptions import ConfigError
from src.utils.parallel import resolve_workers


class TestAppConfig:

    def test_defaults(self):
        config = AppConfig()
        assert config.grid.toy_grid().shape == (20, 20, 8)
        assert config.grid.occ3d_grid().shape == (200, 200, 16)
        assert config.fusion.WINDOW_K == 7
        assert config.evaluation.DISTANCE_BINS == (2.0, 4.0, 6.0)
        assert config.fusion.DIRECTION == "camera_source"
        assert (1.0, 8) in config.ablation.DEPTH_GRID
        assert config.ablation.WINDOWS == (3, 5, 7, 9)
        assert config.logging.ERROR_LOG_NAME == "errors.log"

    def test_thread_cap_from_env(self, fresh_config, mocker):
        mocker.patch.dict(os.environ, {"OCC_FORGE_THREADS": "2"})
        config = reload_config()
        assert config.processing.THREAD_CAP == 2
        assert get_config() is config
        assert resolve_workers(8) <= 2

    def test_seed_and_log_level_from_env(self, fresh_config, mocker):
        mocker.patch.dict(os.environ, {"OCC_FORGE_SEED": "11", "OCC_FORGE_LOG_LEVEL": "debug"})
        config = reload_config()
        assert config.DEFAULT_SEED == 11
        assert config.logging.DEFAULT_LOG_LEVEL == "DEBUG"
        assert PipelineConfig.from_app_config(config).seed == 11

    @pytest.mark.parametrize("env", [
        {"OCC_FORGE_THREADS": "many"},
        {"OCC_FORGE_THREADS": "0"},
        {"OCC_FORGE_SEED": "1.5"},
        {"OCC_FORGE_LOG_LEVEL": "chatty"},
    ])
    def test_invalid_env(self, fresh_config, mocker, env):
        mocker.patch.dict(os.environ, env)
        with pytest.raises(ConfigError):
            reload_config()


class TestPipelineConfig:

    def test_derived_sizes(self, pipeline_config):
        assert pipeline_config.class_count == 5
        assert pipeline_config.depth_bins == 8
        assert pipeline_config.channels == 40
        assert pipeline_config.hypotheses_per_side() == 8
        total = pipeline_config.with_overrides({"layers_meaning": "total"})
        assert total.hypotheses_per_side() == 4

    def test_overrides(self, pipeline_config):
        cfg = pipeline_config.with_overrides({
            "window_k": 3,
            "seed": None,
            "grid": {"voxel": 0.8},
            "loss_weights": {"lambda_kl": 0.5},
        })
        assert cfg.window_k == 3
        assert cfg.seed == pipeline_config.seed
        assert cfg.grid.shape == (10, 10, 4)
        assert cfg.loss_weights.lambda_kl == 0.5
        assert cfg.loss_weights.lambda_seg == pipeline_config.loss_weights.lambda_seg
        assert pipeline_config.window_k == 7

    def test_unknown_key(self, pipeline_config):
        with pytest.raises(ConfigError):
            pipeline_config.with_overrides({"window": 3})

    def test_json_file(self, pipeline_config, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"alpha": 2.0, "sweep": [[0.1, 1]]}))
        cfg = pipeline_config.with_json_file(path)
        assert cfg.alpha == 2.0
        assert cfg.sweep == [(0.1, 1.0)]

    @pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
    def test_bad_json_file(self, pipeline_config, tmp_path, content):
        path = tmp_path / "cfg.json"
        path.write_text(content)
        with pytest.raises(ConfigError):
            pipeline_config.with_json_file(path)
        with pytest.raises(ConfigError):
            pipeline_config.with_json_file(tmp_path / "missing.json")

    @pytest.mark.parametrize("overrides", [
        {"window_k": 4},
        {"window_k": 0},
        {"layers": 1, "layers_meaning": "total"},
        {"range_m": 0.0},
        {"radius_px": -1},
        {"alpha": -1.0},
        {"eps": -0.1},
        {"direction": "both"},
        {"kl_direction": "both"},
        {"scale_by": "key"},
        {"distance_bins": [2.0, 2.0]},
        {"undefined_policy": "skip"},
        {"perturb_mode": "per_scene"},
        {"perturb_trials": 0},
        {"sweep": [[0.1, -1.0]]},
        {"ablation_depth": [[0.0, 8]]},
        {"ablation_depth": [[1.0, 0]]},
        {"ablation_windows": [3, 4]},
        {"workers": 0},
        {"num_classes": 0},
    ])
    def test_validate(self, pipeline_config, overrides):
        with pytest.raises(ConfigError):
            pipeline_config.with_overrides(overrides).validate()

    def test_to_dict_round_trips_through_overrides(self, pipeline_config):
        data = json.loads(json.dumps(pipeline_config.to_dict()))
        assert pipeline_config.with_overrides(data) == pipeline_config
