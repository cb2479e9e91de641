"""Query x gallery score matrices: cosine, mask-IoU blend, query expansion."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("similarity", "distance")
SIM_MAGIC = b"SIM1"
_SIM_HEADER = struct.Struct("<4sIQQB")


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    """Scores between ordered query ids (rows) and gallery ids (cols)."""

    rows: tuple[int, ...]
    cols: tuple[int, ...]
    data: np.ndarray
    kind: str = "similarity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SimilarityError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.data.shape != (len(self.rows), len(self.cols)):
            raise SimilarityError(
                f"data shape {self.data.shape} does not match {len(self.rows)} rows x {len(self.cols)} cols"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def rankings(self) -> list[list[int]]:
        """Per-row gallery ids, best first; ties go to the smaller crop id."""
        cols = np.asarray(self.cols)
        keys = self.data if self.kind == "distance" else -self.data
        out = []
        for row in keys:
            order = np.lexsort((cols, row))
            out.append(cols[order].tolist())
        return out

    def sub(self, rows: Sequence[int], cols: Sequence[int]) -> "SimilarityMatrix":
        r = {c: i for i, c in enumerate(self.rows)}
        c = {g: j for j, g in enumerate(self.cols)}
        data = self.data[np.ix_([r[i] for i in rows], [c[j] for j in cols])]
        return SimilarityMatrix(tuple(rows), tuple(cols), data, self.kind)


_TILE_ROWS = 32
AQE_WEIGHTINGS = ("uniform", "similarity")


def cosine_matrix(
    queries: np.ndarray,
    gallery: np.ndarray,
    query_ids: Sequence[int] | None = None,
    gallery_ids: Sequence[int] | None = None,
    block_size: int = 64,
) -> SimilarityMatrix:
    """Dot products of unit-norm descriptor rows, computed in float64.

    Rows go through the matrix product in fixed-shape tiles (a short last
    tile is zero-padded), so every BLAS call has the same shape and a row's
    scores do not depend on ``block_size`` or on which other rows are present.
    ``block_size`` only bounds how many rows are materialised per chunk.
    """
    q = np.asarray(getattr(queries, "data", queries), dtype=np.float64)
    g = np.asarray(getattr(gallery, "data", gallery), dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise SimilarityError(f"descriptor dim mismatch: {q.shape} vs {g.shape}")
    if block_size < 1:
        raise SimilarityError("block_size must be positive")
    n = q.shape[0]
    out = np.empty((n, g.shape[0]), dtype=np.float64)
    gt = np.ascontiguousarray(g.T)
    tile = np.zeros((_TILE_ROWS, q.shape[1]), dtype=np.float64)
    chunk = -(-block_size // _TILE_ROWS) * _TILE_ROWS
    for chunk_start in range(0, n, chunk):
        for start in range(chunk_start, min(chunk_start + chunk, n), _TILE_ROWS):
            stop = min(start + _TILE_ROWS, n)
            tile[: stop - start] = q[start:stop]
            tile[stop - start :] = 0.0
            out[start:stop] = (tile @ gt)[: stop - start]
    rows = tuple(range(q.shape[0])) if query_ids is None else tuple(query_ids)
    cols = tuple(range(g.shape[0])) if gallery_ids is None else tuple(gallery_ids)
    return SimilarityMatrix(rows, cols, out, "similarity")


def combined_similarity(
    cos: SimilarityMatrix, iou: SimilarityMatrix, alpha: float = 0.7, beta: float = 0.3
) -> SimilarityMatrix:
    """Blend appearance and silhouette agreement: ``alpha*cos + beta*iou``."""
    if cos.rows != iou.rows or cos.cols != iou.cols:
        raise SimilarityError("cosine and IoU matrices must share row/col ordering")
    if cos.kind != "similarity" or iou.kind != "similarity":
        raise SimilarityError("combined_similarity expects similarity matrices")
    if beta == 0:
        return SimilarityMatrix(cos.rows, cos.cols, alpha * cos.data, "similarity")
    return SimilarityMatrix(cos.rows, cos.cols, alpha * cos.data + beta * iou.data, "similarity")


def top_k_indices(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores, ties broken by ascending id."""
    return np.lexsort((ids, -scores))[:k]


def aqe_expand(
    query_descs: np.ndarray,
    gallery_descs: np.ndarray,
    k: int = 10,
    gallery_ids: Sequence[int] | None = None,
    weighting: str = "uniform",
    weight_power: float = 3.0,
) -> np.ndarray:
    """Average query expansion.

    Each query is replaced by the re-normalised mean of itself and its ``k``
    nearest gallery descriptors. ``weighting="similarity"`` weights neighbours
    by ``max(cos, 0) ** weight_power`` (query weight 1) instead.
    """
    q = np.asarray(getattr(query_descs, "data", query_descs), dtype=np.float64)
    g = np.asarray(getattr(gallery_descs, "data", gallery_descs), dtype=np.float64)
    if k < 1:
        raise SimilarityError("AQE k must be >= 1")
    if k > g.shape[0]:
        raise SimilarityError(f"AQE k={k} exceeds gallery size {g.shape[0]}")
    if weighting not in AQE_WEIGHTINGS:
        raise SimilarityError(f"unknown AQE weighting {weighting!r}")
    ids = np.arange(g.shape[0]) if gallery_ids is None else np.asarray(gallery_ids)
    sims = cosine_matrix(q, g).data
    out = np.empty_like(q)
    for i in range(q.shape[0]):
        nn = top_k_indices(sims[i], ids, k)
        if weighting == "uniform":
            acc = q[i] + g[nn].sum(axis=0)
        else:
            w = np.maximum(sims[i, nn], 0.0) ** weight_power
            acc = q[i] + (w[:, None] * g[nn]).sum(axis=0)
        norm = np.linalg.norm(acc)
        out[i] = acc / norm if norm > 0 else q[i]
    return out


def save_similarity_csv(path: str | Path, sim: SimilarityMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([sim.kind] + [str(c) for c in sim.cols])
        for rid, row in zip(sim.rows, sim.data):
            writer.writerow([str(rid)] + [repr(float(v)) for v in row])


def load_similarity_csv(path: str | Path) -> SimilarityMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows, data = [], []
        for line in reader:
            rows.append(int(line[0]))
            data.append([float(v) for v in line[1:]])
    cols = tuple(int(c) for c in header[1:])
    arr = np.asarray(data, dtype=np.float64).reshape(len(rows), len(cols))
    return SimilarityMatrix(tuple(rows), cols, arr, header[0])


def save_similarity_bin(path: str | Path, sim: SimilarityMatrix) -> None:
    """SIM1: magic | version u32 | Q u64 | G u64 | kind u8 | Q row ids i64 | G col ids i64 | Q*G float64."""
    q, g = sim.shape
    with open(path, "wb") as fh:
        fh.write(_SIM_HEADER.pack(SIM_MAGIC, 1, q, g, KINDS.index(sim.kind)))
        fh.write(np.asarray(sim.rows, dtype="<i8").tobytes())
        fh.write(np.asarray(sim.cols, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(sim.data, dtype="<f8").tobytes())


def load_similarity_bin(path: str | Path) -> SimilarityMatrix:
    buf = Path(path).read_bytes()
    if len(buf) < _SIM_HEADER.size:
        raise SimilarityError(f"{path}: truncated header")
    magic, version, q, g, kind = _SIM_HEADER.unpack_from(buf, 0)
    if magic != SIM_MAGIC:
        raise SimilarityError(f"{path}: bad magic {magic!r}")
    if version != 1 or kind >= len(KINDS):
        raise SimilarityError(f"{path}: unsupported version {version} / kind {kind}")
    off = _SIM_HEADER.size
    need = off + 8 * (q + g) + 8 * q * g
    if len(buf) != need:
        raise SimilarityError(f"{path}: truncated payload ({len(buf)} bytes, expected {need})")
    rows = np.frombuffer(buf, "<i8", q, off)
    cols = np.frombuffer(buf, "<i8", g, off + 8 * q)
    data = np.frombuffer(buf, "<f8", q * g, off + 8 * (q + g)).reshape(q, g).copy()
    return SimilarityMatrix(tuple(rows.tolist()), tuple(cols.tolist()), data, KINDS[kind])
