"""Shared fixtures for the occ-forge test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.core.config import PipelineConfig, reload_config
from src.core.geometry import extrinsics_from_pose
from src.core.models import CameraIntrinsics, CameraModel, Extrinsics
from src.core.synthetic_scene import toy_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=40.0, fy=40.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture
def forward_camera(intrinsics):
    """Camera at the origin looking along +x."""
    return CameraModel("front", intrinsics, extrinsics_from_pose(np.zeros(3), 0.0))


@pytest.fixture
def identity_camera():
    """Identity extrinsics: sensor frame is the camera frame."""
    return CameraModel("cam", CameraIntrinsics(10.0, 10.0, 4.0, 3.0, 8, 6), Extrinsics.identity())


@pytest.fixture
def pipeline_config():
    return PipelineConfig.from_app_config()


@pytest.fixture(scope="session")
def scene():
    return toy_scene(0)


@pytest.fixture
def fresh_config():
    """Reload the global configuration after a test changed the environment."""
    yield
    reload_config()
