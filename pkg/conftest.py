"""
测试公共夹具：小规模配置，保证单元测试在秒级完成
"""

import pytest

from experiment_config import load_config
from pat_core import Geometry, Grid
from wave_forward import ForwardConfig


TINY_OVERRIDES = [
    "grid.d=16",
    "geometry.time_samples=60",
    "forward.n_phi=64",
    "forward.n_r=120",
    "forward.radial_refine=2",
    "fbp.n_rho=120",
    "unet.channels=2",
    "unet.levels=2",
    "train.epochs=2",
    "dataset.train_count=4",
    "dataset.test_count=3",
    "dataset.supersample=2",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_config():
    return load_config(preset="desk", overrides=TINY_OVERRIDES)


@pytest.fixture
def small_geometry():
    return Geometry(radius=1.0, detectors=15, final_time=2.0, time_samples=100)


@pytest.fixture
def small_forward():
    return ForwardConfig(n_phi=128, n_r=200, radial_refine=1)


@pytest.fixture
def small_grid():
    return Grid(32)
