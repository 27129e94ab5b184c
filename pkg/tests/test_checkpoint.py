"""Tests for the RXGS checkpoint container."""
import struct

import numpy as np
import pytest

from rxsplat.checkpoint import MAGIC, load_checkpoint, read_container, save_checkpoint, write_container
from rxsplat.errors import DataIOError
from rxsplat.scene import PER_GAUSSIAN_FIELDS
from rxsplat.version import CHECKPOINT_VERSION


class TestCheckpoint:
    """Test scene and conditioning persistence."""

    def test_scene_roundtrip(self, small_scene, tmp_path):
        """Test that every per-Gaussian array reads back bitwise."""
        path = tmp_path / "model.rxgs"
        save_checkpoint(path, small_scene, meta={"stage": "stage1"})
        ckpt = load_checkpoint(path)
        for name in PER_GAUSSIAN_FIELDS:
            np.testing.assert_array_equal(getattr(ckpt.scene, name), getattr(small_scene, name))
        assert ckpt.scene.l_max == 2
        assert ckpt.meta == {"stage": "stage1"}
        assert ckpt.conditioning is None

    def test_conditioning_group(self, small_scene, tmp_path):
        """Test that a second array group is kept by name."""
        path = tmp_path / "model.rxgs"
        save_checkpoint(path, small_scene, {"global.W0": np.arange(6.0).reshape(2, 3)})
        np.testing.assert_array_equal(load_checkpoint(path).conditioning["global.W0"], np.arange(6.0).reshape(2, 3))

    def test_header_layout(self, tmp_path):
        """Test magic, version and header length."""
        path = tmp_path / "c.rxgs"
        write_container(path, {"a": 1}, {"g": {"x": np.ones(2)}})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, header_len = struct.unpack("<II", raw[4:12])
        assert version == CHECKPOINT_VERSION
        assert len(raw) == 12 + header_len + 16
        meta, groups = read_container(path)
        assert meta == {"a": 1}
        np.testing.assert_array_equal(groups["g"]["x"], [1.0, 1.0])

    def test_missing(self, tmp_path):
        """Test that a missing checkpoint is an I/O error."""
        with pytest.raises(DataIOError, match="not found"):
            load_checkpoint(tmp_path / "none.rxgs")

    def test_wrong_version(self, tmp_path):
        """Test that other format versions are rejected."""
        path = tmp_path / "c.rxgs"
        write_container(path, {}, {})
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", CHECKPOINT_VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataIOError, match="Unsupported checkpoint version"):
            read_container(path)

    def test_truncated(self, small_scene, tmp_path):
        """Test that a cut-off body names the array."""
        path = tmp_path / "model.rxgs"
        save_checkpoint(path, small_scene)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataIOError, match="scene.fle_coeffs"):
            load_checkpoint(path)
