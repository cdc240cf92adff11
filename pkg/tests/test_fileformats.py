"""Round-trip and error-path tests for the binary artifact codecs."""

import struct

import numpy as np
import pytest
import scipy.sparse as sp

from mmgraphrec import fileformats as ff
from mmgraphrec.errors import FormatError, NumericsError, ShapeError


class TestFeatures:
    def test_round_trip(self, tmp_path):
        mat = np.arange(6, dtype=np.float64).reshape(3, 2)
        path = tmp_path / "f.mmf"
        ff.write_features(path, mat)
        out = ff.read_features(path, expected_rows=3)
        np.testing.assert_array_equal(out, mat)

    def test_payload_is_little_endian_f32(self, tmp_path):
        path = tmp_path / "f.mmf"
        ff.write_features(path, np.array([[1.5, -2.0]]))
        raw = path.read_bytes()
        assert raw[:4] == b"MMF1"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)
        assert np.frombuffer(raw[12:], dtype="<f4").tolist() == [1.5, -2.0]

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "f.mmf"
        path.write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(FormatError):
            ff.read_features(path)

    def test_row_mismatch(self, tmp_path):
        path = tmp_path / "f.mmf"
        ff.write_features(path, np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            ff.read_features(path, expected_rows=4)

    def test_nan_payload_rejected(self, tmp_path):
        path = tmp_path / "f.mmf"
        payload = struct.pack("<f", float("nan")) * 2
        path.write_bytes(b"MMF1" + struct.pack("<II", 1, 2) + payload)
        with pytest.raises(NumericsError):
            ff.read_features(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "f.mmf"
        ff.write_features(path, np.zeros((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            ff.read_features(path)


class TestGraph:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        dense = rng.normal(size=(6, 6)) * (rng.random((6, 6)) < 0.4)
        mat = sp.csr_matrix(dense.astype(np.float32))
        path = tmp_path / "g.mgr"
        ff.write_graph(path, mat)
        out = ff.read_graph(path)
        assert (out != mat).nnz == 0

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "g.mgr"
        path.write_bytes(b"NOPE" + b"\0" * 24)
        with pytest.raises(FormatError) as err:
            ff.read_graph(path)
        assert err.value.artifact

    def test_writer_is_deterministic(self, tmp_path):
        mat = sp.csr_matrix(np.eye(4))
        ff.write_graph(tmp_path / "a.mgr", mat)
        ff.write_graph(tmp_path / "b.mgr", mat)
        assert (tmp_path / "a.mgr").read_bytes() == (tmp_path / "b.mgr").read_bytes()


class TestNamedTensorFiles:
    def test_checkpoint_round_trip(self, tmp_path):
        tensors = {
            "w": np.arange(12, dtype=np.float64).reshape(3, 4),
            "b": np.array([0.5, -0.5]),
        }
        path = tmp_path / "c.mck"
        ff.write_checkpoint(path, tensors)
        out = ff.read_checkpoint(path)
        assert set(out) == {"w", "b"}
        np.testing.assert_array_equal(out["w"], tensors["w"])
        np.testing.assert_array_equal(out["b"], tensors["b"])

    def test_embedding_round_trip(self, tmp_path):
        path = tmp_path / "e.mem"
        ff.write_embeddings(path, {"final_items": np.ones((2, 3))})
        out = ff.read_embeddings(path)
        np.testing.assert_array_equal(out["final_items"], np.ones((2, 3)))

    def test_checkpoint_magic_is_not_embedding_magic(self, tmp_path):
        path = tmp_path / "c.mck"
        ff.write_checkpoint(path, {"w": np.ones(2)})
        with pytest.raises(FormatError):
            ff.read_embeddings(path)

    def test_float32_quantization_is_stable(self, tmp_path):
        value = np.array([[1.0 / 3.0]])
        path = tmp_path / "c.mck"
        ff.write_checkpoint(path, {"w": value})
        first = ff.read_checkpoint(path)["w"]
        ff.write_checkpoint(path, {"w": first})
        second = ff.read_checkpoint(path)["w"]
        np.testing.assert_array_equal(first, second)
