"""Per-encoder embedding matrices: EMB1 I/O, row normalisation and fusion.

EMB1 layout (little-endian)::

    b"EMB1" | version u32 | N u64 | d u64 | name_len u16 | name utf-8 | N*d float32

Norms and dot products accumulate in float64; matrices are stored as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
ZEROED_SUFFIX = "+zeroed"
_HEADER = struct.Struct("<4sIQQH")
_ZERO_NORM = 1e-12


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    model_name: str
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise EmbeddingError(f"embedding data must be 2-d, got shape {self.data.shape}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def base_model(self) -> str:
        return self.model_name.split("+", 1)[0]

    @property
    def background_zeroed(self) -> bool:
        return self.model_name.endswith(ZEROED_SUFFIX)


@dataclass(frozen=True)
class FusedDescriptorMatrix:
    source_models: tuple[str, ...]
    data: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    data = np.ascontiguousarray(matrix.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise EmbeddingError("refusing to write NaN/Inf embedding values")
    name = matrix.model_name.encode("utf-8")
    if len(name) > 0xFFFF:
        raise EmbeddingError("model name too long")
    n, d = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, len(name)))
        fh.write(name)
        fh.write(data.tobytes(order="C"))


def read_embeddings(buf: bytes) -> EmbeddingMatrix:
    """Decode an EMB1 byte string. Errors name the byte offset at fault."""
    if len(buf) < _HEADER.size:
        raise EmbeddingError(f"truncated header at offset {len(buf)}: need {_HEADER.size} bytes")
    magic, version, n, d, name_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EmbeddingError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise EmbeddingError(f"unsupported format version {version} at offset 4")
    offset = _HEADER.size
    if len(buf) < offset + name_len:
        raise EmbeddingError(f"truncated model name at offset {len(buf)}")
    try:
        model_name = buf[offset : offset + name_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise EmbeddingError(f"model name is not valid utf-8 at offset {offset + e.start}") from None
    offset += name_len
    expected = n * d * 4
    payload = len(buf) - offset
    if payload < expected:
        raise EmbeddingError(
            f"truncated payload at offset {len(buf)}: header says N={n} d={d} "
            f"({expected} bytes), found {payload}"
        )
    if payload > expected:
        raise EmbeddingError(
            f"payload size mismatch at offset {offset + expected}: header says N={n} d={d} "
            f"({expected} bytes), found {payload}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        i = int(bad[0])
        raise EmbeddingError(
            f"non-finite value at offset {offset + 4 * i} (row {i // d}, col {i % d})"
        )
    return EmbeddingMatrix(model_name, data.astype(np.float32))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    try:
        return read_embeddings(Path(path).read_bytes())
    except EmbeddingError as e:
        raise EmbeddingError(f"{path}: {e}") from None


def _normalized(data: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(norms < _ZERO_NORM)
    if zero.size:
        raise EmbeddingError(f"{what}: zero-norm embedding for crop_id {int(zero[0])}")
    return x / norms[:, None]


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm; zero rows are an error."""
    return EmbeddingMatrix(m.model_name, _normalized(m.data, m.model_name).astype(np.float32))


def fuse(parts: Sequence[EmbeddingMatrix]) -> FusedDescriptorMatrix:
    """Normalise each part, concatenate in order, and re-normalise.

    For unit-norm parts the cosine of two fused rows is the mean of the
    per-model cosines.
    """
    if not parts:
        raise EmbeddingError("fuse needs at least one embedding matrix")
    counts = {p.model_name: p.rows for p in parts}
    if len(set(counts.values())) != 1:
        raise EmbeddingError(f"row count mismatch across parts: {counts}")
    blocks = [_normalized(p.data, p.model_name) for p in parts]
    fused = _normalized(np.concatenate(blocks, axis=1), "fused")
    return FusedDescriptorMatrix(tuple(p.model_name for p in parts), fused.astype(np.float32))


def as_descriptors(m: EmbeddingMatrix) -> FusedDescriptorMatrix:
    """Treat a single normalised model as a one-part fusion."""
    return fuse([m])
