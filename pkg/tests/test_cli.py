"""Tests for the command-line surface."""
import json

import numpy as np
import pytest

from rxsplat.checkpoint import save_checkpoint
from rxsplat.cli import load_receivers, main, parse_vector
from rxsplat.config import TrainConfig, parse_config
from rxsplat.errors import EXIT_OK, DataIOError
from rxsplat.experiments import initial_scene, load_model
from rxsplat.fileio import RECORDS_FILE, read_csv, read_dataset
from rxsplat.scene import PER_GAUSSIAN_FIELDS, GaussianScene


def run_cli(*argv) -> int:
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in argv])
    return exc.value.code


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def simulate_config(**updates):
    config = {
        "seed": 3,
        "modality": "rssi",
        "scene": {"random_scatterers": 2},
        "tx": {"count": 4},
        "rx": {"count": 2},
    }
    config.update(updates)
    return config


@pytest.fixture
def dataset_dir(tmp_path):
    """Simulated 4 x 2 rssi dataset."""
    config = write_json(tmp_path / "sim.json", simulate_config())
    assert run_cli("simulate", config, "-o", tmp_path / "data") == 0
    return tmp_path / "data"


@pytest.fixture
def train_config(tmp_path, dataset_dir, train_overrides):
    """Training config pointing at the simulated dataset."""
    data = {**train_overrides, "dataset": str(dataset_dir), "output_dir": str(tmp_path / "run")}
    return write_json(tmp_path / "train.json", data)


class TestVectorParsing:
    """Tests for position arguments."""

    def test_parse_vector(self):
        """Test x,y,z with spaces."""
        assert parse_vector("1, 2.5,-3") == [1.0, 2.5, -3.0]

    def test_parse_vector_wrong_count(self):
        """Test that two components are rejected."""
        with pytest.raises(ValueError, match="Expected x,y,z"):
            parse_vector("1,2")

    def test_parse_vector_not_numbers(self):
        """Test that text components are rejected."""
        with pytest.raises(ValueError, match="Expected x,y,z"):
            parse_vector("a,b,c")

    def test_receivers_from_text(self):
        """Test ';'-separated receivers."""
        np.testing.assert_array_equal(load_receivers("1,2,3;4,5,6"), [[1, 2, 3], [4, 5, 6]])

    def test_receivers_from_file(self, tmp_path):
        """Test one receiver per line, blank lines skipped."""
        path = tmp_path / "rx.txt"
        path.write_text("1,2,3\n\n4,5,6\n")
        assert load_receivers(rx_file=str(path)).shape == (2, 3)

    def test_receivers_file_missing(self, tmp_path):
        """Test that a missing file is an I/O error."""
        with pytest.raises(DataIOError, match="not found"):
            load_receivers(rx_file=str(tmp_path / "none.txt"))

    def test_receivers_both(self, tmp_path):
        """Test that both sources at once are rejected."""
        with pytest.raises(ValueError, match="Cannot specify both"):
            load_receivers("1,2,3", str(tmp_path / "rx.txt"))

    def test_receivers_required(self):
        """Test that some source is required."""
        with pytest.raises(ValueError, match="Must provide either --rx or --rx-file"):
            load_receivers()


class TestSimulate:
    """Tests for dataset synthesis."""

    def test_record_count(self, dataset_dir):
        """Test M x N records for a minimal config."""
        lines = (dataset_dir / RECORDS_FILE).read_text().splitlines()
        assert len(lines) == 8
        assert (dataset_dir / "scene.json").exists()
        assert (dataset_dir / "split.json").exists()

    def test_byte_identical(self, tmp_path, dataset_dir):
        """Test that a rerun with the same seed writes the same bytes."""
        config = write_json(tmp_path / "sim2.json", simulate_config())
        assert run_cli("simulate", config, "-o", tmp_path / "again") == 0
        for name in (RECORDS_FILE, "scene.json", "split.json"):
            assert (tmp_path / "again" / name).read_bytes() == (dataset_dir / name).read_bytes()

    def test_threads_match_serial(self, tmp_path, dataset_dir):
        """Test that worker threads do not change the output."""
        config = write_json(tmp_path / "sim2.json", simulate_config())
        assert run_cli("simulate", config, "-o", tmp_path / "par", "--threads", 3) == 0
        assert (tmp_path / "par" / RECORDS_FILE).read_bytes() == (dataset_dir / RECORDS_FILE).read_bytes()

    def test_modality_typo(self, tmp_path, capsys):
        """Test that a bad modality exits 2 naming the field."""
        config = write_json(tmp_path / "sim.json", simulate_config(modality="rsi"))
        assert run_cli("simulate", config) == 2
        assert "modality" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        """Test that a missing config file is a config error."""
        assert run_cli("simulate", tmp_path / "none.json") == 2

    def test_bad_threads(self, tmp_path):
        """Test that zero threads is rejected."""
        config = write_json(tmp_path / "sim.json", simulate_config())
        assert run_cli("simulate", config, "--threads", 0) == 2


class TestTrain:
    """Tests for the training command."""

    def test_stage2_without_stage1(self, train_config, capsys):
        """Test that stage 2 needs a stage-1 checkpoint."""
        assert run_cli("train", train_config, "--stage", 2) == 4
        assert "stage-1 checkpoint" in capsys.readouterr().err

    def test_stage1_zero_iterations(self, tmp_path, train_config, dataset_dir):
        """Test that a zero-iteration checkpoint equals the initialization."""
        assert run_cli("train", train_config, "--stage", 1) == 0
        scene, conditioning, _ = load_model(tmp_path / "run" / "stage1.rxgs")
        config = parse_config(json.loads(train_config.read_text()), TrainConfig)
        expected = initial_scene(read_dataset(dataset_dir), config)
        assert conditioning is None
        for name in PER_GAUSSIAN_FIELDS:
            np.testing.assert_array_equal(getattr(scene, name), getattr(expected, name))

    def test_modality_mismatch(self, tmp_path, dataset_dir, train_overrides):
        """Test that the config modality must match the dataset."""
        config = write_json(tmp_path / "t.json", {**train_overrides, "modality": "csi", "dataset": str(dataset_dir)})
        assert run_cli("train", config, "--stage", 1, "-o", tmp_path / "run") == 2

    def test_missing_dataset(self, tmp_path, train_overrides):
        """Test that training without a dataset is a config error."""
        config = write_json(tmp_path / "t.json", train_overrides)
        assert run_cli("train", config, "--stage", 1) == 2


class TestRenderAndEvaluate:
    """Tests for commands that read checkpoints."""

    @pytest.fixture
    def stage2(self, tmp_path, train_config):
        assert run_cli("train", train_config, "--stage", 1) == 0
        assert run_cli("train", train_config, "--stage", 2) == 0
        return tmp_path / "run" / "stage2.rxgs"

    def test_sequential_identical(self, tmp_path, stage2):
        """Test that --sequential writes the same file as the batched path."""
        rx = "1,1,1;2,2,1.5;3,1,2"
        assert run_cli("render", stage2, "--tx", "4,3,1", "--rx", rx, "-o", tmp_path / "batched") == 0
        assert run_cli("render", stage2, "--tx", "4,3,1", "--rx", rx, "--sequential", "-o", tmp_path / "seq") == 0
        batched = (tmp_path / "batched" / "render.csv").read_bytes()
        assert batched == (tmp_path / "seq" / "render.csv").read_bytes()
        assert len(read_csv(tmp_path / "batched" / "render.csv")) == 3

    def test_receiver_on_gaussian(self, tmp_path, stage2, capsys):
        """Test that a receiver at a Gaussian centre names the Gaussian."""
        scene, _, _ = load_model(stage2)
        rx = ",".join(repr(float(v)) for v in scene.positions[0])
        assert run_cli("render", stage2, "--tx", "4,3,1", "--rx", rx, "-o", tmp_path / "r") == 1
        assert "coincides with Gaussian 0" in capsys.readouterr().err

    def test_empty_checkpoint(self, tmp_path):
        """Test that a scene without Gaussians renders a zero field."""
        path = tmp_path / "empty.rxgs"
        save_checkpoint(path, GaussianScene.empty(1, 1), meta={"grid": {"n_theta": 4, "n_phi": 8, "tile_size": 4}})
        assert run_cli("render", path, "--tx", "0,0,0", "--rx", "1,1,1", "-o", tmp_path / "r") == 0
        rows = read_csv(tmp_path / "r" / "render.csv")
        assert float(rows[0]["rssi_db"]) == pytest.approx(-120.0)

    def test_evaluate_all_seen(self, tmp_path, stage2, dataset_dir):
        """Test that a split without unseen receivers writes no unseen table."""
        out = tmp_path / "eval"
        assert run_cli("evaluate", stage2, "--dataset", dataset_dir, "--split", dataset_dir / "split.json",
                       "--fallback", "--baseline", "-o", out) == 0
        assert (out / "eval_seen_mae.csv").exists()
        assert (out / "baseline_summary.csv").exists()
        assert not list(out.glob("eval_unseen_*"))

    def test_evaluate_overlapping_split(self, tmp_path, stage2, dataset_dir):
        """Test that a split with overlapping receivers exits 2."""
        split = write_json(tmp_path / "bad.json", {"train_tx": [0, 1], "test_tx": [2], "seen_rx": [0], "unseen_rx": [0]})
        assert run_cli("evaluate", stage2, "--dataset", dataset_dir, "--split", split, "-o", tmp_path / "e") == 2


def csv_header(path) -> list[str]:
    return path.read_text().splitlines()[0].split(",")


class TestStudies:
    """Tests for the sweep and ablation commands."""

    def test_sweep_receivers(self, tmp_path, train_config):
        """Test the receiver-count table."""
        assert run_cli("sweep", train_config, "--kind", "receivers", "--counts", 1, "--subsets", 1) == 0
        path = tmp_path / "run" / "sweep_receivers.csv"
        assert csv_header(path) == ["train_rx", "subset", "receivers", "tag", "metric", "mean"]
        assert [r["tag"] for r in read_csv(path)] == ["seen", "unseen"]

    def test_sweep_receivers_bad_count(self, train_config):
        """Test that a count above the receiver total exits 2."""
        assert run_cli("sweep", train_config, "--kind", "receivers", "--counts", 3) == 2

    def test_sweep_reference(self, tmp_path, train_config):
        """Test the reference-receiver table."""
        assert run_cli("sweep", train_config, "--kind", "reference") == 0
        path = tmp_path / "run" / "sweep_reference.csv"
        assert csv_header(path) == ["reference", "tag", "rx_id", "metric", "value"]
        assert {r["reference"] for r in read_csv(path)} == {"0", "1", "avg"}

    def test_sweep_folds(self, tmp_path, train_config):
        """Test per-fold rows and the pooled summary."""
        assert run_cli("sweep", train_config, "--kind", "folds", "--folds", 2) == 0
        rows = read_csv(tmp_path / "run" / "sweep_folds.csv")
        assert csv_header(tmp_path / "run" / "sweep_folds.csv") == ["fold", "method", "tag", "rx_id", "metric", "value"]
        assert {r["fold"] for r in rows} == {"0", "1"}
        unseen = {(r["fold"], r["rx_id"]) for r in rows if r["tag"] == "unseen" and r["method"] == "model"}
        assert sorted(rx for _, rx in unseen) == ["0", "1"]
        summary = read_csv(tmp_path / "run" / "sweep_folds_summary.csv")
        assert {(r["method"], r["tag"]) for r in summary} == {
            (m, t) for m in ("model", "fallback", "baseline") for t in ("seen", "unseen")
        }

    def test_sweep_too_many_folds(self, train_config):
        """Test that more folds than receivers exits 2."""
        assert run_cli("sweep", train_config, "--kind", "folds", "--folds", 3) == 2

    def test_ablate(self, tmp_path, train_config):
        """Test one row per variant and seed."""
        assert run_cli("ablate", train_config, "--variants", "full,additive_only", "--seeds", 0) == 0
        path = tmp_path / "run" / "ablation.csv"
        assert csv_header(path) == ["variant", "seed", "final_loss"]
        assert [(r["variant"], r["seed"]) for r in read_csv(path)] == [("full", "0"), ("additive_only", "0")]

    def test_ablate_unknown_variant(self, train_config):
        """Test that a misspelled variant exits 2."""
        assert run_cli("ablate", train_config, "--variants", "fulll") == 2


class TestPlan:
    """Tests for access-point planning."""

    def test_toy_table(self, tmp_path, capsys):
        """Test the A, B, C coverage example."""
        table = tmp_path / "candidates.csv"
        table.write_text("A,B,C\n-50,-100,-100\n-50,-100,-100\n-50,-50,-100\n-100,-50,-50\n-100,-100,-50\n")
        assert run_cli("plan", "--table", table, "-k", 2, "-o", tmp_path / "plan") == 0
        assert "Selected: A, C" in capsys.readouterr().out
        rows = read_csv(tmp_path / "plan" / "plan.csv")
        assert [r["candidate"] for r in rows] == ["A", "C"]

    def test_non_numeric_table(self, tmp_path):
        """Test that a broken table is an I/O error."""
        table = tmp_path / "candidates.csv"
        table.write_text("A,B\n-50,x\n")
        assert run_cli("plan", "--table", table, "-k", 1, "-o", tmp_path / "plan") == 4

    def test_nothing_to_plan(self, tmp_path):
        """Test that plan needs a table or a checkpoint."""
        assert run_cli("plan", "-o", tmp_path / "plan") == 2


class TestHarnesses:
    """Tests for the gradient check and benchmark commands."""

    def test_gradcheck(self, tmp_path, capsys):
        """Test that the tiny instance passes."""
        assert run_cli("gradcheck", "-o", tmp_path / "g") == 0
        assert "Gradient check passed" in capsys.readouterr().out
        rows = read_csv(tmp_path / "g" / "gradcheck_0.csv")
        assert all(float(r["max_rel_error"]) < 1e-3 for r in rows)

    def test_bench(self, tmp_path):
        """Test a small timing run."""
        assert run_cli("bench", "--gaussians", 20, "--receivers", 2, "--grid", "4x8", "-o", tmp_path / "b") == EXIT_OK
        rows = read_csv(tmp_path / "b" / "bench.csv")
        assert rows[0]["receivers"] == "2"

    def test_version(self, capsys):
        """Test the version flag."""
        assert run_cli("--version") == 0
        assert capsys.readouterr().out.startswith("rxsplat ")
