"""Tests for splits, runs, evaluation, studies and the pipeline gradient check."""
import numpy as np
import pytest

from rxsplat.config import SplitSpec, TrainConfig, parse_config
from rxsplat.errors import ConfigError, DataIOError
from rxsplat.experiments import (
    FOLD_METHODS,
    STAGE1_CHECKPOINT,
    STAGE2_CHECKPOINT,
    Evaluation,
    ablate,
    baseline_evaluation,
    bench,
    evaluate,
    fold_protocol,
    fold_rows,
    fold_splits,
    initial_scene,
    load_model,
    make_split,
    merge_folds,
    nearest_seen,
    pipeline_gradcheck,
    random_bench_scene,
    receiver_folds,
    run_training,
    save_model,
    sweep_receivers,
    sweep_reference,
    tiny_instance,
    tx_split,
    write_evaluation,
    write_gradcheck,
)
from rxsplat.fileio import read_csv
from rxsplat.scene import PER_GAUSSIAN_FIELDS
from rxsplat.sphraster import SphericalGrid
from rxsplat.trainer import make_conditioning


def make_config(overrides, **updates) -> TrainConfig:
    return parse_config({**overrides, **updates}, TrainConfig)


class TestSplits:
    """Test transmitter splits and receiver folds."""

    def test_tx_split(self):
        """Test a disjoint, sorted, repeatable 80/20 split."""
        train, test = tx_split(20)
        assert len(test) == 4
        assert sorted(train + test) == list(range(20))
        assert train == sorted(train)
        assert tx_split(20) == (train, test)

    def test_tx_split_keeps_training(self):
        """Test that tiny sets keep at least one training transmitter."""
        train, test = tx_split(2, test_fraction=0.9)
        assert len(train) == 1 and len(test) == 1

    def test_receiver_folds(self):
        """Test a partition into near-equal groups."""
        folds = receiver_folds(7, 3)
        assert sorted(sum(folds, [])) == list(range(7))
        assert sorted(len(f) for f in folds) == [2, 2, 3]

    def test_fold_range(self):
        """Test that more folds than receivers is rejected."""
        with pytest.raises(ValueError, match="folds"):
            receiver_folds(2, 3)

    def test_make_split(self, toy_dataset):
        """Test that unseen receivers are removed from the seen set."""
        _, dataset = toy_dataset
        split = make_split(dataset, unseen_rx=[3, 1])
        assert split.seen_rx == [0, 2]
        assert split.unseen_rx == [1, 3]

    def test_fold_splits(self, toy_dataset):
        """Test that every receiver is held out exactly once."""
        _, dataset = toy_dataset
        held_out = sum((s.unseen_rx for s in fold_splits(dataset, folds=2)), [])
        assert sorted(held_out) == [0, 1, 2, 3]


class TestModelFiles:
    """Test training runs and model persistence."""

    def test_stage1_outputs(self, toy_dataset, train_overrides, tmp_path):
        """Test the stage-1 checkpoint, loss table and config copy."""
        _, dataset = toy_dataset
        config = make_config(train_overrides, stage1_iters=2)
        run_training(config, dataset, make_split(dataset), 1, tmp_path)
        assert (tmp_path / STAGE1_CHECKPOINT).exists()
        assert len(read_csv(tmp_path / "stage1_loss.csv")) == 2
        assert (tmp_path / "train_config_stage1.json").exists()

    def test_stage2_needs_stage1(self, toy_dataset, train_overrides, tmp_path):
        """Test that stage 2 without a checkpoint is an I/O error."""
        _, dataset = toy_dataset
        with pytest.raises(DataIOError, match="stage-1 checkpoint"):
            run_training(make_config(train_overrides), dataset, make_split(dataset), 2, tmp_path)

    def test_stage2_after_stage1(self, toy_dataset, train_overrides, tmp_path):
        """Test that stage 2 loads stage 1 and saves conditioning."""
        _, dataset = toy_dataset
        config = make_config(train_overrides, stage1_iters=1, stage2_iters=1, ablation="additive_only")
        split = make_split(dataset)
        stage1 = run_training(config, dataset, split, 1, tmp_path)
        run_training(config, dataset, split, 2, tmp_path)
        scene, conditioning, meta = load_model(tmp_path / STAGE2_CHECKPOINT)
        np.testing.assert_array_equal(scene.positions, stage1.scene.positions)
        assert conditioning.ablation == "additive_only"
        assert meta["stage"] == "stage2"

    def test_save_load_model(self, toy_dataset, train_overrides, tmp_path):
        """Test that conditioning survives a checkpoint."""
        _, dataset = toy_dataset
        config = make_config(train_overrides)
        scene = initial_scene(dataset, config)
        conditioning = make_conditioning(config, scene, dataset)
        save_model(tmp_path / "m.rxgs", scene, conditioning, config, "stage2")
        scene2, conditioning2, meta = load_model(tmp_path / "m.rxgs")
        for name in PER_GAUSSIAN_FIELDS:
            np.testing.assert_array_equal(getattr(scene2, name), getattr(scene, name))
        for name, arr in conditioning.parameters().items():
            np.testing.assert_array_equal(conditioning2.parameters()[name], arr)
        np.testing.assert_array_equal(conditioning2.occupancy.densities, conditioning.occupancy.densities)
        assert meta["grid"]["n_theta"] == 4


class TestEvaluation:
    """Test seen/unseen scoring."""

    def test_nearest_seen(self):
        """Test the closest seen receiver."""
        positions = np.array([[0, 0, 0], [5, 0, 0], [1, 0, 0], [4, 0, 0]], dtype=float)
        assert nearest_seen(positions, [0, 1], 2) == 0
        assert nearest_seen(positions, [0, 1], 3) == 1

    def test_evaluate_records(self, toy_dataset, train_overrides):
        """Test one record per test transmitter and receiver."""
        _, dataset = toy_dataset
        config = make_config(train_overrides, coeff_init_std=0.1)
        split = make_split(dataset, unseen_rx=[3])
        scene = initial_scene(dataset, config)
        result = evaluate(scene, None, dataset, split, SphericalGrid.from_config(config.grid))
        assert len(result.records["seen"]["mae"]) == 3 * len(split.test_tx)
        assert len(result.records["unseen"]["mae"]) == len(split.test_tx)
        _, _, table = result.aggregate("seen", "mae")
        assert sorted(table) == [0, 1, 2]

    def test_baseline(self, toy_dataset):
        """Test the receiver-mean baseline by hand."""
        _, dataset = toy_dataset
        split = SplitSpec(train_tx=[0, 1], test_tx=[2], seen_rx=[0])
        result = baseline_evaluation(dataset, split)
        expected = abs(dataset.measurements[[0, 1], 0].mean() - dataset.measurements[2, 0])
        assert result.records["seen"]["mae"] == [(0, pytest.approx(expected))]

    def test_write(self, tmp_path):
        """Test per-receiver and summary tables."""
        evaluation = Evaluation()
        evaluation.add("seen", "mae", 0, 1.0)
        evaluation.add("seen", "mae", 1, 3.0)
        evaluation.add("unseen", "mae", 2, 5.0)
        write_evaluation(evaluation, tmp_path)
        summary = read_csv(tmp_path / "eval_summary.csv")
        assert [(r["tag"], float(r["mean"]), float(r["std"])) for r in summary] == [("seen", 2.0, 1.0), ("unseen", 5.0, 0.0)]
        assert len(read_csv(tmp_path / "eval_unseen_mae.csv")) == 3


class TestStudies:
    """Test sweeps and ablations on tiny budgets."""

    def test_sweep_reference(self, toy_dataset, train_overrides):
        """Test one block of rows per reference choice."""
        _, dataset = toy_dataset
        split = make_split(dataset, unseen_rx=[3])
        rows = sweep_reference(make_config(train_overrides), dataset, split)
        references = [row[0] for row in rows]
        assert sorted(set(references), key=str) == sorted([0, 1, 2, "avg"], key=str)
        assert len(rows) == 4 * 4 * len(split.test_tx)

    def test_sweep_receivers(self, toy_dataset, train_overrides):
        """Test one seen and one unseen row per count and subset."""
        _, dataset = toy_dataset
        config = make_config(train_overrides)
        rows = sweep_receivers(config, dataset, [1, 3], subsets=2)
        assert len(rows) == 2 * 2 * 2
        for count, subset, receivers, tag, metric, _ in rows:
            ids = [int(j) for j in receivers.split()]
            assert len(ids) == count == len(set(ids))
            assert all(0 <= j < dataset.num_rx for j in ids)
            assert tag in ("seen", "unseen") and metric == "mae"
        assert [(r[0], r[1]) for r in rows[::2]] == [(1, 0), (1, 1), (3, 0), (3, 1)]

    def test_sweep_receivers_repeatable(self, toy_dataset, train_overrides):
        """Test identical rows for a fixed seed."""
        _, dataset = toy_dataset
        config = make_config(train_overrides)
        assert sweep_receivers(config, dataset, [2], subsets=2) == sweep_receivers(config, dataset, [2], subsets=2)

    def test_sweep_receivers_count_range(self, toy_dataset, train_overrides):
        """Test that more training receivers than exist is rejected."""
        _, dataset = toy_dataset
        with pytest.raises(ConfigError, match="counts"):
            sweep_receivers(make_config(train_overrides), dataset, [5])

    def test_ablate(self, toy_dataset, train_overrides):
        """Test one row per variant and seed."""
        _, dataset = toy_dataset
        config = make_config(train_overrides, stage1_iters=1, stage2_iters=1)
        rows = ablate(config, dataset, make_split(dataset), variants=("full", "joint", "global_only"), seeds=(0,))
        assert [(v, s) for v, s, _ in rows] == [("full", 0), ("joint", 0), ("global_only", 0)]
        assert all(np.isfinite(float(loss)) for _, _, loss in rows)


class TestFoldProtocol:
    """Test held-out receiver folds end to end."""

    def test_every_receiver_unseen_once(self, toy_dataset, train_overrides):
        """Test that pooled unseen scores cover each receiver from its own fold."""
        _, dataset = toy_dataset
        runs = fold_protocol(make_config(train_overrides), dataset, folds=2)
        assert [run.fold for run in runs] == [0, 1]
        for run in runs:
            assert set(run.evaluations) == set(FOLD_METHODS)
            assert not set(run.split.seen_rx) & set(run.split.unseen_rx)
            _, _, table = run.evaluations["model"].aggregate("unseen", "mae")
            assert sorted(table) == run.split.unseen_rx
        _, _, pooled = merge_folds(runs, "model").aggregate("unseen", "mae")
        assert sorted(pooled) == [0, 1, 2, 3]

    def test_rows_tagged_with_fold(self, toy_dataset, train_overrides):
        """Test one row per fold, method, receiver and test transmitter."""
        _, dataset = toy_dataset
        runs = fold_protocol(make_config(train_overrides), dataset, folds=2)
        rows = list(fold_rows(runs))
        assert {row[0] for row in rows} == {0, 1}
        assert {row[1] for row in rows} == set(FOLD_METHODS)
        assert len(rows) == len(runs) * len(FOLD_METHODS) * dataset.num_rx * len(runs[0].split.test_tx)

    def test_numeric_reference_held_out(self, toy_dataset, train_overrides):
        """Test that a held-out reference receiver falls back to a seen one."""
        _, dataset = toy_dataset
        runs = fold_protocol(make_config(train_overrides, reference_rx=0), dataset, folds=2)
        assert len(runs) == 2


class TestBench:
    """Test the batched-render benchmark."""

    def test_bench(self, small_grid):
        """Test timings for a small batch."""
        scene = random_bench_scene(10, 1, seed=2)
        result = bench(scene, np.zeros(3), np.ones((3, 3)), small_grid)
        assert result.receivers == 3
        assert result.batched_seconds > 0 and result.sequential_seconds > 0
        assert result.speedup > 0

    def test_bench_scene(self):
        """Test Gaussians in the requested shell."""
        scene = random_bench_scene(20, 2, seed=0, radius=3.0)
        r = np.linalg.norm(scene.positions, axis=1)
        assert np.all(r >= 1.5 - 1e-12) and np.all(r <= 3.0 + 1e-12)
        assert scene.fle_coeffs.shape == (20, 9, 1, 2)


class TestPipelineGradcheck:
    """Test the full render, aggregation and loss gradient."""

    @pytest.mark.parametrize("seed,modality", [(0, "rssi"), (1, "rssi"), (2, "csi")])
    def test_passes(self, seed, modality):
        """Test analytic against numeric gradients on tiny instances."""
        scene, conditioning, tx, rx, target, grid = tiny_instance(seed, modality, channels=2)
        check = pipeline_gradcheck(scene, conditioning, tx, rx, target, grid)
        assert check.passed, (check.geometry.failures, check.conditioning.failures)
        assert check.max_rel_error < 1e-3

    def test_restores_parameters(self):
        """Test that the check leaves the model as it found it."""
        scene, conditioning, tx, rx, target, grid = tiny_instance(3)
        positions = scene.positions.copy()
        weights = conditioning.global_mlp.weights[0].copy()
        pipeline_gradcheck(scene, conditioning, tx, rx, target, grid)
        np.testing.assert_array_equal(scene.positions, positions)
        np.testing.assert_array_equal(conditioning.global_mlp.weights[0], weights)

    def test_report(self, tmp_path):
        """Test one report row per part."""
        scene, conditioning, tx, rx, target, grid = tiny_instance(4, num_gaussians=3, l_max=1)
        write_gradcheck(pipeline_gradcheck(scene, conditioning, tx, rx, target, grid), tmp_path / "g.csv")
        rows = read_csv(tmp_path / "g.csv")
        assert [r["part"] for r in rows] == ["geometry", "conditioning"]
        assert int(rows[0]["coordinates"]) == 3 * (3 + 3 + 4 + 1 + 4 * 2)
