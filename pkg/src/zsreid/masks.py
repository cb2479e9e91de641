"""Foreground masks: uncompressed RLE decoding, canonical grid sampling, IoU.

RLE runs alternate 0s and 1s over the column-major flattening of a
``height x width`` bitmap, starting with a (possibly empty) run of 0s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskRecord:
    crop_id: int
    width: int
    height: int
    rle: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"crop_id": self.crop_id, "width": self.width, "height": self.height, "rle": list(self.rle)}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskRecord":
        return cls(int(d["crop_id"]), int(d["width"]), int(d["height"]), tuple(int(r) for r in d["rle"]))


def encode_rle(bitmap: np.ndarray) -> list[int]:
    flat = np.asarray(bitmap, dtype=bool).flatten(order="F")
    # run boundaries where the value changes, with a leading 0-run
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def decode_rle(rec: MaskRecord) -> np.ndarray:
    """Expand a mask record into a ``height x width`` uint8 bitmap."""
    runs = np.asarray(rec.rle, dtype=np.int64)
    if rec.width <= 0 or rec.height <= 0:
        raise MaskError(f"crop {rec.crop_id}: mask dimensions must be positive")
    if (runs < 0).any():
        raise MaskError(f"crop {rec.crop_id}: negative run length")
    total = int(runs.sum())
    if total != rec.width * rec.height:
        raise MaskError(
            f"crop {rec.crop_id}: runs sum to {total}, expected {rec.width}x{rec.height}={rec.width * rec.height}"
        )
    if int(runs[1::2].sum()) == 0:
        raise MaskError(f"crop {rec.crop_id}: empty mask")
    values = np.arange(runs.size) % 2
    flat = np.repeat(values.astype(np.uint8), runs)
    return flat.reshape((rec.height, rec.width), order="F")


def _sample_index(n_src: int, n_dst: int) -> np.ndarray:
    # round half up, matching the split rounding rule
    pos = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
    return np.clip(np.floor(pos + 0.5).astype(np.int64), 0, n_src - 1)


def rasterize_to_grid(bitmap: np.ndarray, grid_size: int = 64) -> np.ndarray:
    """Nearest-neighbour resample of ``bitmap`` onto a square grid."""
    bitmap = np.asarray(bitmap)
    h, w = bitmap.shape
    rows = _sample_index(h, grid_size)
    cols = _sample_index(w, grid_size)
    return bitmap[np.ix_(rows, cols)].astype(bool)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MaskError(f"grid size mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two stacks of equally sized grids.

    ``rows`` is ``(Q, g, g)`` and ``cols`` is ``(G, g, g)``; counts are exact
    integers, so each entry equals ``mask_iou`` on the same pair.
    """
    if rows.shape[1:] != cols.shape[1:]:
        raise MaskError(f"grid size mismatch: {rows.shape[1:]} vs {cols.shape[1:]}")
    a = rows.reshape(len(rows), -1).astype(np.float64)
    b = cols.reshape(len(cols), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def load_masks(path: str | Path) -> dict[int, MaskRecord]:
    """Read a JSON-lines masks file keyed by crop id."""
    masks: dict[int, MaskRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = MaskRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise MaskError(f"{path}: line {line_no}: {e}") from None
            if rec.crop_id in masks:
                raise MaskError(f"{path}: line {line_no}: duplicate crop_id {rec.crop_id}")
            masks[rec.crop_id] = rec
    return masks


def save_masks(path: str | Path, records: Iterable[MaskRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")


def grids_for(masks: dict[int, MaskRecord], crop_ids: Sequence[int], grid_size: int = 64) -> np.ndarray:
    missing = [c for c in crop_ids if c not in masks]
    if missing:
        raise MaskError(f"no mask for crop_id(s) {missing[:10]}{'...' if len(missing) > 10 else ''}")
    out = np.empty((len(crop_ids), grid_size, grid_size), dtype=bool)
    for i, c in enumerate(crop_ids):
        out[i] = rasterize_to_grid(decode_rle(masks[c]), grid_size)
    return out


def ellipse_bitmap(
    height: int, width: int, center: tuple[float, float], radii: tuple[float, float]
) -> np.ndarray:
    """Filled axis-aligned ellipse; center and radii are fractions of the crop."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    cy, cx = center
    ry, rx = radii
    inside = ((ys[:, None] - cy) / ry) ** 2 + ((xs[None, :] - cx) / rx) ** 2 <= 1.0
    if not inside.any():
        inside[min(height - 1, max(0, math.floor(cy * height))), min(width - 1, max(0, math.floor(cx * width)))] = True
    return inside.astype(np.uint8)
