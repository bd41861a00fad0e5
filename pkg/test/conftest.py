"""
Shared fixtures: tiny configs, a tiny denoiser and a generated toy dataset
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent / "src"))

from data.synthetic import generate_dataset, rig_homographies
from geometry.view_graph import build_view_graph
from utils.config import RunConfig, load_run_config


TINY_OVERRIDES = [
    "scene.num_views=3",
    "scene.image_size=32",
    "scene.defect.size_range=[2.0, 5.0]",
    "scene.defect.contrast_range=[0.2, 0.4]",
    "data.train_normal=4",
    "data.test_normal=2",
    "data.test_defective=2",
    "model.base_channels=8",
    "model.norm_groups=4",
    "align.radius=2",
    "diffusion.timesteps=50",
    "diffusion.inversion_steps=2",
    "diffusion.t_extract=10",
    "train.epochs=1",
    "train.batch_size=2",
    "runtime.deterministic=true",
]


@pytest.fixture(scope="session")
def tiny_overrides():
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_config() -> RunConfig:
    return load_run_config(None, TINY_OVERRIDES)


@pytest.fixture
def tiny_rig(tiny_config):
    return rig_homographies(tiny_config.scene)


@pytest.fixture
def tiny_graph(tiny_config):
    return build_view_graph(tiny_config.scene.num_views, tiny_config.model.topology)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    cfg = load_run_config(None, TINY_OVERRIDES)
    root = tmp_path_factory.mktemp("toy_data")
    graph = build_view_graph(cfg.scene.num_views, cfg.model.topology)
    generate_dataset(cfg.scene, cfg.data, root, graph)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full smoke-preset pipeline runs (deselect with -m 'not slow')")
