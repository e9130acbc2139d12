"""
Tests for binary array, image and checkpoint files and the run-directory store
"""

import io
import struct

import numpy as np
import pandas as pd
import pytest

from src.backend.core.exceptions import ArtifactFormatError, ArtifactNotFoundError
from src.backend.utils.array_io import (
    load_array,
    load_checkpoint,
    load_pgm,
    read_vtn,
    save_array,
    save_checkpoint,
    save_pgm,
    write_vtn,
)
from src.backend.utils.artifact_store import ArtifactStore


class TestVtn:
    """VTN1 array records"""

    def test_byte_layout(self):
        """Test magic, rank, extents and payload are little-endian"""
        buffer = io.BytesIO()
        write_vtn(buffer, np.array([[1.0, 2.0, 3.0]]))
        data = buffer.getvalue()
        assert data[:4] == b"VTN1"
        assert struct.unpack("<3I", data[4:16]) == (2, 1, 3)
        assert struct.unpack("<3d", data[16:]) == (1.0, 2.0, 3.0)

    def test_file_round_trip(self, tmp_path):
        """Test a rank-3 array survives exactly"""
        array = np.random.default_rng(0).standard_normal((2, 3, 4))
        np.testing.assert_array_equal(load_array(save_array(tmp_path / "a.vtn", array)), array)

    def test_bad_magic(self):
        """Test foreign files are rejected"""
        with pytest.raises(ArtifactFormatError):
            read_vtn(io.BytesIO(b"NOPE\x00\x00\x00\x00"))

    def test_truncated_payload(self, tmp_path):
        """Test short payloads are rejected"""
        path = save_array(tmp_path / "a.vtn", np.ones(4))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ArtifactFormatError):
            load_array(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file is reported as such"""
        with pytest.raises(ArtifactNotFoundError):
            load_array(tmp_path / "missing.vtn")


class TestPgm:
    """Binary grayscale images"""

    def test_eight_bit_quantization(self, tmp_path):
        """Test values round to the nearest of 256 levels"""
        image = np.random.default_rng(1).uniform(size=(5, 7))
        loaded = load_pgm(save_pgm(tmp_path / "x.pgm", image))
        assert loaded.shape == (5, 7)
        assert np.max(np.abs(loaded - image)) <= 0.5 / 255 + 1e-12

    def test_sixteen_bit(self, tmp_path):
        """Test maxval above 255 stores two big-endian bytes per pixel"""
        image = np.random.default_rng(2).uniform(size=(3, 3))
        path = save_pgm(tmp_path / "x.pgm", image, maxval=65535)
        assert len(path.read_bytes()) == len(b"P5\n3 3\n65535\n") + 18
        assert np.max(np.abs(load_pgm(path) - image)) <= 0.5 / 65535 + 1e-12

    def test_header_comments(self, tmp_path):
        """Test comments inside the header are skipped"""
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n# levels\n255\n" + bytes([0, 255]))
        np.testing.assert_allclose(load_pgm(path), [[0.0, 1.0]])

    def test_clips_out_of_range(self, tmp_path):
        """Test values outside [0, 1] are clipped"""
        loaded = load_pgm(save_pgm(tmp_path / "x.pgm", np.array([[-0.5, 1.5]])))
        np.testing.assert_allclose(loaded, [[0.0, 1.0]])

    def test_not_pgm(self, tmp_path):
        """Test other formats are rejected"""
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ArtifactFormatError):
            load_pgm(path)


class TestCheckpoint:
    """JSON header plus VTN1 records"""

    def test_round_trip_keeps_order_and_meta(self, tmp_path):
        """Test names, order, values and metadata survive"""
        arrays = {"theta/b": np.ones(2), "theta/a": np.arange(6.0).reshape(2, 3), "mu/0": np.zeros(4)}
        path = save_checkpoint(tmp_path / "c.ckpt", arrays, {"iteration": 7, "generator": "deep_decoder"})
        meta, loaded = load_checkpoint(path)
        assert list(loaded) == list(arrays)
        assert meta == {"iteration": 7, "generator": "deep_decoder"}
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])

    def test_rejects_other_json(self, tmp_path):
        """Test the header must carry the checkpoint format tag"""
        path = tmp_path / "c.ckpt"
        path.write_bytes(b'{"format": "other", "version": 1}\n')
        with pytest.raises(ArtifactFormatError):
            load_checkpoint(path)


class TestArtifactStore:
    """Run-directory helper"""

    @pytest.fixture
    def store(self, tmp_path):
        """Store rooted in a temporary directory"""
        return ArtifactStore(tmp_path / "run").ensure()

    def test_csv_is_byte_stable(self, store):
        """Test the fixed float format gives identical files"""
        frame = pd.DataFrame({"a": [0.1 + 0.2, 1.0 / 3.0], "b": [1, 2]})
        first = store.write_csv("x.csv", frame).read_bytes()
        second = store.write_csv("y.csv", frame).read_bytes()
        assert first == second
        assert first.decode() == "a,b\n0.3,1\n0.3333333333,2\n"

    def test_require_reports_missing(self, store):
        """Test missing artifacts raise a not-found error"""
        with pytest.raises(ArtifactNotFoundError):
            store.require("observations.vtn")

    def test_image_writes_both_formats(self, store):
        """Test images are stored losslessly and as PGM"""
        vtn, pgm = store.write_image("truth", "0000", np.full((2, 2), 0.25))
        assert vtn.exists() and pgm.exists()
        assert store.listing() == ["truth/0000.pgm", "truth/0000.vtn"]

    def test_latest_checkpoint(self, store):
        """Test the highest iteration wins"""
        store.write_checkpoint(10, {"x": np.ones(1)}, {})
        store.write_checkpoint(200, {"x": np.zeros(1)}, {})
        meta, arrays = store.read_checkpoint()
        assert meta["iteration"] == 200
        np.testing.assert_array_equal(arrays["x"], [0.0])

    def test_no_checkpoint(self, store):
        """Test reading without any checkpoint fails clearly"""
        with pytest.raises(ArtifactNotFoundError):
            store.read_checkpoint()
