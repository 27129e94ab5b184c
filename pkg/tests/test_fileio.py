"""Tests for dataset, sidecar, image and table files."""
import json

import numpy as np
import pytest

from rxsplat.channelsim import SyntheticDataset
from rxsplat.errors import DataIOError
from rxsplat.fileio import (
    RECORDS_FILE,
    SCENE_FILE,
    read_csv,
    read_dataset,
    read_pgm,
    read_sidecar,
    write_csv,
    write_dataset,
    write_pgm,
    write_sidecar,
)


def csi_dataset(rng):
    values = rng.normal(size=(2, 3, 4)) + 1j * rng.normal(size=(2, 3, 4))
    return SyntheticDataset(rng.uniform(size=(2, 3)), rng.uniform(size=(3, 3)), values, "csi")


class TestDatasetFiles:
    """Test JSON-lines datasets."""

    def test_rssi_roundtrip(self, toy_dataset, tmp_path):
        """Test that an rssi table reads back exactly."""
        scene, dataset = toy_dataset
        write_dataset(dataset, tmp_path, scene)
        back = read_dataset(tmp_path)
        assert back.modality == "rssi"
        np.testing.assert_array_equal(back.measurements, dataset.measurements)
        np.testing.assert_array_equal(back.rx_positions, dataset.rx_positions)
        assert (tmp_path / SCENE_FILE).exists()

    def test_record_order(self, toy_dataset, tmp_path):
        """Test one record per pair, transmitter-major."""
        _, dataset = toy_dataset
        path = write_dataset(dataset, tmp_path)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 48
        assert [(r["tx_id"], r["rx_id"]) for r in records[:5]] == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]

    def test_csi_roundtrip(self, rng, tmp_path):
        """Test complex vectors as [re, im] pairs."""
        dataset = csi_dataset(rng)
        write_dataset(dataset, tmp_path)
        np.testing.assert_array_equal(read_dataset(tmp_path).measurements, dataset.measurements)

    def test_spectrum_sidecars(self, rng, tmp_path):
        """Test that spectra go to f32 sidecars."""
        spectra = rng.uniform(size=(1, 2, 4, 8))
        dataset = SyntheticDataset(np.zeros((1, 3)), np.ones((2, 3)), spectra, "spectrum")
        write_dataset(dataset, tmp_path)
        back = read_dataset(tmp_path)
        np.testing.assert_allclose(back.measurements, spectra, rtol=1e-6)
        assert len(list((tmp_path / "spectra").iterdir())) == 2

    def test_missing(self, tmp_path):
        """Test that a missing dataset is an I/O error."""
        with pytest.raises(DataIOError, match="not found"):
            read_dataset(tmp_path / "nothing")

    def test_malformed_line(self, toy_dataset, tmp_path):
        """Test that a broken record names its line."""
        _, dataset = toy_dataset
        path = write_dataset(dataset, tmp_path)
        lines = path.read_text().splitlines()
        lines[2] = "{broken"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataIOError, match=f"{RECORDS_FILE}:3"):
            read_dataset(tmp_path)

    def test_incomplete_table(self, toy_dataset, tmp_path):
        """Test that a missing pair is reported."""
        _, dataset = toy_dataset
        path = write_dataset(dataset, tmp_path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[1:]) + "\n")
        with pytest.raises(DataIOError, match=r"first \(tx 0, rx 0\)"):
            read_dataset(tmp_path)

    def test_mixed_modalities(self, toy_dataset, tmp_path):
        """Test that records must share a modality."""
        _, dataset = toy_dataset
        path = write_dataset(dataset, tmp_path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[0])
        record["modality"] = "csi"
        lines[0] = json.dumps(record)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataIOError, match="Mixed modalities"):
            read_dataset(tmp_path)


class TestSidecar:
    """Test the RXSP spectrum sidecar."""

    def test_layout(self, tmp_path):
        """Test magic, header and f32 body."""
        path = tmp_path / "a.rxsp"
        write_sidecar(path, np.arange(6.0).reshape(2, 3))
        raw = path.read_bytes()
        assert raw[:4] == b"RXSP"
        assert len(raw) == 12 + 4 * 6
        np.testing.assert_array_equal(read_sidecar(path), np.arange(6.0).reshape(2, 3))

    def test_truncated(self, tmp_path):
        """Test that a short body is rejected."""
        path = tmp_path / "a.rxsp"
        write_sidecar(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataIOError, match="Truncated"):
            read_sidecar(path)

    def test_wrong_magic(self, tmp_path):
        """Test that foreign files are rejected."""
        path = tmp_path / "a.rxsp"
        path.write_bytes(b"JUNK" + bytes(20))
        with pytest.raises(DataIOError, match="Not an RXSP"):
            read_sidecar(path)


class TestImagesAndTables:
    """Test PGM images and CSV tables."""

    def test_pgm_scaling(self, tmp_path):
        """Test max scaling with NaN drawn black."""
        path = tmp_path / "map.pgm"
        write_pgm(path, np.array([[0.0, 0.5], [1.0, np.nan]]))
        np.testing.assert_array_equal(read_pgm(path), [[0, 128], [255, 0]])
        assert path.read_bytes()[:2] == b"P5"

    def test_pgm_keeps_floor(self, tmp_path):
        """Test that a non-zero floor is not stretched to black."""
        path = tmp_path / "floor.pgm"
        write_pgm(path, np.array([[2.0, 4.0], [8.0, np.nan]]))
        np.testing.assert_array_equal(read_pgm(path), [[64, 128], [255, 0]])

    def test_pgm_explicit_range(self, tmp_path):
        """Test that vmin and vmax override the default range."""
        path = tmp_path / "range.pgm"
        write_pgm(path, np.array([[2.0, 4.0], [6.0, 8.0]]), 2.0, 6.0)
        np.testing.assert_array_equal(read_pgm(path), [[0, 128], [255, 255]])

    def test_pgm_missing(self, tmp_path):
        """Test that a missing image is an I/O error."""
        with pytest.raises(DataIOError):
            read_pgm(tmp_path / "none.pgm")

    def test_csv(self, tmp_path):
        """Test that rows read back as dicts."""
        write_csv(tmp_path / "t.csv", ["a", "b"], [(1, "x"), (2, "y")])
        assert read_csv(tmp_path / "t.csv") == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]
