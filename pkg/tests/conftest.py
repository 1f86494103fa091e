# tests/conftest.py
import numpy as np
import pytest

from services.cscnet.network import init_params, make_config
from services.hsi_data.synthetic import simulate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pure_scene():
    """Cảnh không nhiễu 64×64, L=120, P=4, mỗi vật liệu có ít nhất một pixel thuần."""
    return simulate_scene(120, 64, 64, 4, "noiseless", seed=7, pure_pixels=True)


@pytest.fixture(scope="session")
def toy_scene():
    return simulate_scene(16, 8, 8, 3, 30.0, seed=3)


@pytest.fixture
def toy_net(toy_scene):
    cfg = make_config(16, 8, 8, 3, C=4, K=2)
    params = init_params(cfg, 0, toy_scene.gt_endmembers)
    return cfg, params
