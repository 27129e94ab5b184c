"""Pytest configuration and shared fixtures."""
import os
import sys

import numpy as np
import pytest

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Fixed-seed generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    """6 x 12 direction grid with 3-cell tiles."""
    from rxsplat.sphraster import SphericalGrid
    return SphericalGrid(n_theta=6, n_phi=12, tile_size=3)


@pytest.fixture
def small_scene():
    """Six random Gaussians around the origin with l_max = 2 coefficients."""
    from rxsplat.experiments import tiny_instance
    scene, _, _, _, _, _ = tiny_instance(7, "rssi", num_gaussians=6, l_max=2)
    return scene


@pytest.fixture
def train_overrides():
    """Minimal desk-scale training config fields."""
    return {
        "preset": "desk",
        "modality": "rssi",
        "stage1_iters": 0,
        "stage2_iters": 0,
        "k_init": 8,
        "l_max": 1,
        "t_ramp": 10,
        "grid": {"n_theta": 4, "n_phi": 8, "tile_size": 4, "radius": 0.0},
        "conditioning": {"fourier_bands": 2, "hidden_dim": 8, "embed_dim": 4,
                         "probe_samples": 4, "grid_resolution": 8},
    }


@pytest.fixture
def toy_dataset():
    """rssi dataset: 3 scatterers, 12 transmitters, 4 receivers."""
    from rxsplat.channelsim import random_scene, synth_dataset
    scene = random_scene(3, 3, (0.0, 0.0, 0.0), (4.0, 4.0, 3.0))
    gen = np.random.default_rng(5)
    tx = gen.uniform([0.5, 0.5, 0.5], [3.5, 3.5, 2.5], size=(12, 3))
    rx = gen.uniform([0.5, 0.5, 0.5], [3.5, 3.5, 2.5], size=(4, 3))
    return scene, synth_dataset(scene, tx, rx, "rssi")
