"""End-to-end directional checks on synthetic scenes.

These train real models and take minutes; run them with ``--runslow``.
"""
import numpy as np
import pytest

from rxsplat.apps import localization_study
from rxsplat.channelsim import random_scene, synth_dataset
from rxsplat.config import SplitSpec, TrainConfig, parse_config
from rxsplat.experiments import (
    FOLD_METHODS,
    ablate,
    bench,
    fold_protocol,
    initial_scene,
    merge_folds,
    pipeline_gradcheck,
    random_bench_scene,
    tiny_instance,
    tx_split,
)
from rxsplat.seeding import make_rng
from rxsplat.sphraster import SphericalGrid
from rxsplat.trainer import make_conditioning, predict, train_stage1, train_stage2

pytestmark = pytest.mark.slow

ROOM_MIN = (0.0, 0.0, 0.0)
ROOM_MAX = (8.0, 6.0, 3.0)


def room_points(seed, name, count):
    return make_rng(seed, name).uniform([0.5, 0.5, 0.5], [7.5, 5.5, 2.5], size=(count, 3))


@pytest.fixture(scope="module")
def generalization_dataset():
    """20 scatterers, 200 transmitters, 8 receivers."""
    scene = random_scene(11, 20, ROOM_MIN, ROOM_MAX)
    return synth_dataset(scene, room_points(11, "tx", 200), room_points(11, "rx", 8), "rssi")


@pytest.fixture(scope="module")
def generalization_split(generalization_dataset):
    train_tx, test_tx = tx_split(generalization_dataset.num_tx)
    return SplitSpec(train_tx=train_tx, test_tx=test_tx, seen_rx=list(range(6)), unseen_rx=[6, 7])


def desk_config(**updates) -> TrainConfig:
    return parse_config({"preset": "desk", "modality": "rssi", "reference_rx": "avg", **updates}, TrainConfig)


def train_both(config, dataset, split):
    grid = SphericalGrid.from_config(config.grid)
    stage1 = train_stage1(dataset, initial_scene(dataset, config), config, split, grid)
    return train_stage2(dataset, stage1.scene, None, config, split, grid), grid


class TestGradients:
    """Test full-pipeline gradients on many random instances."""

    @pytest.mark.parametrize("seed", range(20))
    def test_instance(self, seed):
        """Test every parameter group against central differences."""
        modality = ("rssi", "csi", "spectrum")[seed % 3]
        scene, conditioning, tx, rx, target, grid = tiny_instance(
            seed, modality, num_gaussians=4 + seed % 5, l_max=1 + seed % 3, channels=2,
        )
        check = pipeline_gradcheck(scene, conditioning, tx, rx, target, grid)
        assert check.max_rel_error < 1e-3


class TestRenderSpeed:
    """Test that batching receivers pays off."""

    def test_speedup(self):
        """Test batched time below half the sequential time for 16 receivers."""
        scene = random_bench_scene(1000, 2, seed=0)
        rx = make_rng(0, "bench").uniform(-0.2, 0.2, size=(16, 3))
        result = bench(scene, np.zeros(3), rx, SphericalGrid(18, 36), repeats=2)
        assert result.batched_seconds < 0.5 * result.sequential_seconds


class TestIdentityAtInit:
    """Test that fresh conditioning renders like no conditioning."""

    def test_ten_receivers(self, generalization_dataset):
        """Test bitwise equality at ten random receivers."""
        config = desk_config(coeff_init_std=0.1, k_init=50)
        scene = initial_scene(generalization_dataset, config)
        conditioning = make_conditioning(config, scene, generalization_dataset)
        grid = SphericalGrid.from_config(config.grid)
        rx = room_points(3, "identity", 10)
        tx = generalization_dataset.tx_positions[0]
        np.testing.assert_array_equal(predict(scene, tx, rx, grid, conditioning), predict(scene, tx, rx, grid))


class TestGeneralization:
    """Test seen and unseen receiver accuracy under the held-out fold protocol."""

    def test_seen_and_unseen(self, generalization_dataset):
        """Test pooled seen MAE against the mean baseline and unseen MAE against the fallback."""
        runs = fold_protocol(desk_config(seed=0), generalization_dataset, folds=3)
        assert sorted(sum((run.split.unseen_rx for run in runs), [])) == list(range(8))
        model, fallback, baseline = (merge_folds(runs, method) for method in FOLD_METHODS)
        assert model.aggregate("seen", "mae")[0] < 0.5 * baseline.aggregate("seen", "mae")[0]
        assert model.aggregate("unseen", "mae")[0] < 0.9 * fallback.aggregate("unseen", "mae")[0]


class TestAblationOrdering:
    """Test that the full model beats its reduced variants."""

    def test_full_is_best(self, generalization_dataset, generalization_split):
        """Test median final loss over three seeds."""
        rows = ablate(desk_config(), generalization_dataset, generalization_split,
                      variants=("full", "additive_only", "global_only", "local_only"), seeds=(0, 1, 2))
        losses = {}
        for variant, _, loss in rows:
            losses.setdefault(variant, []).append(float(loss))
        median = {variant: float(np.median(values)) for variant, values in losses.items()}
        for variant in ("additive_only", "global_only", "local_only"):
            assert median["full"] < median[variant]


class TestLocalization:
    """Test that synthesized fingerprints help localization."""

    def test_augmented_beats_sparse(self, generalization_dataset):
        """Test a 10% lower median error with two synthesized receivers."""
        dataset = generalization_dataset
        config = desk_config()
        gains = []
        for seed in range(3):
            order = make_rng(seed, "localization").permutation(dataset.num_tx)
            db_tx, query_tx = sorted(order[:40].tolist()), sorted(order[40:80].tolist())
            split = SplitSpec(train_tx=db_tx, test_tx=query_tx, seen_rx=list(range(6)), unseen_rx=[6, 7])
            result, grid = train_both(config.model_copy(update={"seed": seed}), dataset, split)
            synthesized = np.stack([
                predict(result.scene, dataset.tx_positions[i], dataset.rx_positions[[6, 7]], grid, result.conditioning)
                for i in db_tx
            ])
            m = dataset.measurements
            study = localization_study(
                dataset.tx_positions[db_tx], m[np.ix_(db_tx, range(6))], synthesized, m[db_tx],
                dataset.tx_positions[query_tx], m[query_tx],
            )
            summary = study.summary()
            gains.append(summary["augmented"]["median"] / summary["sparse"]["median"])
        assert all(g <= 0.9 for g in gains)
