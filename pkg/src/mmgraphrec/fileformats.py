"""Binary artifact codecs.

Four little-endian formats move data between pipeline stages:

* ``MMF1`` feature matrices: magic, u32 rows, u32 dim, then rows*dim f32.
* ``MGR1`` sparse graphs: magic, u64 rows/cols/nnz, u64 row offsets
  (rows+1), u64 column indices, f32 values.
* ``MCK1`` checkpoints: magic, u32 tensor count, then per tensor
  u32 name length, name bytes, u32 rank, u64 extents, f32 values.
* ``MEM1`` embedding exports: same per-tensor layout as ``MCK1``.

Writers are deterministic byte-for-byte given the same inputs.
"""

from __future__ import annotations

import logging
import struct
import zlib

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, NumericsError, ShapeError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MMF1"
GRAPH_MAGIC = b"MGR1"
CHECKPOINT_MAGIC = b"MCK1"
EMBEDDING_MAGIC = b"MEM1"


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", artifact=True)
    return buf


def write_features(path, values: np.ndarray) -> None:
    mat = np.ascontiguousarray(values, dtype=np.float32)
    if mat.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def read_features(path, expected_rows: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad feature magic {magic!r}", artifact=True)
        rows, dim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if expected_rows is not None and rows != expected_rows:
            raise ShapeError(f"{path}: declares {rows} rows, expected {expected_rows}",
                             artifact=True)
        payload = _read_exact(fh, rows * dim * 4, "payload")
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(mat)):
        raise NumericsError(f"{path}: non-finite feature values", artifact=True)
    log.info("loaded features %s: %d x %d, crc32=%08x", path, rows, dim,
             zlib.crc32(payload))
    return mat


def write_graph(path, mat: sp.csr_matrix) -> None:
    mat = mat.tocsr()
    mat.sort_indices()
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<QQQ", mat.shape[0], mat.shape[1], mat.nnz))
        fh.write(np.asarray(mat.indptr, dtype="<u8").tobytes())
        fh.write(np.asarray(mat.indices, dtype="<u8").tobytes())
        fh.write(np.asarray(mat.data, dtype="<f4").tobytes())


def read_graph(path) -> sp.csr_matrix:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != GRAPH_MAGIC:
            raise FormatError(f"{path}: bad graph magic {magic!r}", artifact=True)
        rows, cols, nnz = struct.unpack("<QQQ", _read_exact(fh, 24, "header"))
        indptr = np.frombuffer(_read_exact(fh, (rows + 1) * 8, "row offsets"), dtype="<u8")
        indices = np.frombuffer(_read_exact(fh, nnz * 8, "columns"), dtype="<u8")
        values = np.frombuffer(_read_exact(fh, nnz * 4, "values"), dtype="<f4")
    if indptr[-1] != nnz:
        raise FormatError(f"{path}: row offsets inconsistent with nnz", artifact=True)
    return sp.csr_matrix(
        (values.astype(np.float64), indices.astype(np.int64), indptr.astype(np.int64)),
        shape=(rows, cols))


def _write_named_tensors(path, magic: bytes, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            mat = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", mat.ndim))
            fh.write(struct.pack(f"<{mat.ndim}Q", *mat.shape))
            fh.write(mat.tobytes())


def _read_named_tensors(path, magic: bytes, kind: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4, "magic")
        if got != magic:
            raise FormatError(f"{path}: bad {kind} magic {got!r}", artifact=True)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, size * 4, f"values of {name}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return out


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    _write_named_tensors(path, CHECKPOINT_MAGIC, tensors)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return _read_named_tensors(path, CHECKPOINT_MAGIC, "checkpoint")


def write_embeddings(path, tensors: dict[str, np.ndarray]) -> None:
    _write_named_tensors(path, EMBEDDING_MAGIC, tensors)


def read_embeddings(path) -> dict[str, np.ndarray]:
    return _read_named_tensors(path, EMBEDDING_MAGIC, "embedding export")
