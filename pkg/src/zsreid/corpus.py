"""MOT annotation ingestion, crop preprocessing and the gallery/query split.

Crops are kept as plain records; no pixels are touched here. The preprocessing
order is pad -> filter by default (``filter_stage="post_pad"``), so the size
filter sees the extent that actually gets encoded.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PRNG_NAME = "numpy.PCG64"
FILTER_STAGES = ("pre_pad", "post_pad")
SPLIT_SCOPES = ("per_sequence", "global")

BBox = tuple[float, float, float, float]


class CorpusError(ValueError):
    pass


class MOTParseError(CorpusError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.detail = message


@dataclass(frozen=True)
class CropRecord:
    """One annotated bounding-box crop.

    Attributes:
        crop_id: Dense 0-based index within the corpus.
        sequence_id: Video sequence the crop comes from.
        frame: 1-based frame number.
        identity: Ground-truth track id (per sequence).
        bbox: ``(x, y, w, h)`` in pixels, real-valued.
        frame_dims: ``(width, height)`` of the source frame.
    """

    crop_id: int
    sequence_id: str
    frame: int
    identity: int
    bbox: BBox
    frame_dims: tuple[int, int]

    @property
    def identity_key(self) -> tuple[str, int]:
        # track ids are only unique within a sequence
        return (self.sequence_id, self.identity)

    def to_dict(self) -> dict:
        return {
            "crop_id": self.crop_id,
            "sequence_id": self.sequence_id,
            "frame": self.frame,
            "identity": self.identity,
            "bbox": list(self.bbox),
            "frame_dims": list(self.frame_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CropRecord":
        return cls(
            crop_id=int(d["crop_id"]),
            sequence_id=str(d["sequence_id"]),
            frame=int(d["frame"]),
            identity=int(d["identity"]),
            bbox=tuple(float(v) for v in d["bbox"]),  # type: ignore[arg-type]
            frame_dims=(int(d["frame_dims"][0]), int(d["frame_dims"][1])),
        )


@dataclass(frozen=True)
class SplitAssignment:
    gallery: frozenset[int]
    query: frozenset[int]
    seed: int
    ratio: float = 0.75
    scope: str = "per_sequence"
    prng: str = PRNG_NAME

    def to_dict(self) -> dict:
        return {
            "gallery": sorted(self.gallery),
            "query": sorted(self.query),
            "seed": self.seed,
            "ratio": self.ratio,
            "scope": self.scope,
            "prng": self.prng,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(
            gallery=frozenset(int(i) for i in d["gallery"]),
            query=frozenset(int(i) for i in d["query"]),
            seed=int(d["seed"]),
            ratio=float(d["ratio"]),
            scope=d.get("scope", "per_sequence"),
            prng=d.get("prng", PRNG_NAME),
        )


def _parse_positive_int(token: str, what: str, line_no: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise MOTParseError(line_no, f"non-numeric {what} {token.strip()!r}") from None
    if not value.is_integer() or value < 1:
        raise MOTParseError(line_no, f"{what} must be a positive integer, got {token.strip()!r}")
    return int(value)


def parse_mot(text: str, sequence_id: str, frame_dims: tuple[int, int]) -> list[CropRecord]:
    """Parse MOT ``frame,track_id,x,y,w,h,...`` lines into crop records.

    Blank lines are skipped; fields past the sixth are ignored. Crop ids are
    assigned in line order starting at 0. Bounding boxes are kept as given.
    """
    records: list[CropRecord] = []
    dims = (int(frame_dims[0]), int(frame_dims[1]))
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < 6:
            raise MOTParseError(line_no, f"expected at least 6 fields, got {len(fields)}")
        frame = _parse_positive_int(fields[0], "frame", line_no)
        track = _parse_positive_int(fields[1], "track_id", line_no)
        try:
            x, y, w, h = (float(v) for v in fields[2:6])
        except ValueError:
            raise MOTParseError(line_no, "non-numeric bbox field") from None
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            raise MOTParseError(line_no, "non-finite bbox field")
        if w <= 0 or h <= 0:
            raise MOTParseError(line_no, f"bbox width/height must be positive, got w={w:g} h={h:g}")
        records.append(CropRecord(len(records), sequence_id, frame, track, (x, y, w, h), dims))
    return records


def clamp_bbox(bbox: BBox, frame_dims: tuple[int, int]) -> BBox:
    x, y, w, h = bbox
    fw, fh = frame_dims
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(fw), x + w), min(float(fh), y + h)
    return (x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0))


def pad_bbox(
    bbox: BBox, pad_frac: float = 0.05, frame_dims: tuple[int, int] | None = None
) -> BBox:
    """Grow ``bbox`` by ``pad_frac`` of its size on every side, then clamp.

    The center is preserved before clamping, so boxes touching the frame edge
    come out smaller than ``w * (1 + 2 * pad_frac)``. Without ``frame_dims``
    no clamping is done.
    """
    x, y, w, h = bbox
    if pad_frac != 0:
        cx, cy = x + w / 2.0, y + h / 2.0
        w, h = w * (1.0 + 2.0 * pad_frac), h * (1.0 + 2.0 * pad_frac)
        x, y = cx - w / 2.0, cy - h / 2.0
    if frame_dims is None:
        return (x, y, w, h)
    return clamp_bbox((x, y, w, h), frame_dims)


def filter_crops(
    records: Sequence[CropRecord], min_side: int = 32
) -> tuple[list[CropRecord], dict[int, int]]:
    """Drop crops with either side below ``min_side`` and re-densify ids.

    Returns the retained records (input order) and the old -> new crop id map.
    """
    kept: list[CropRecord] = []
    id_map: dict[int, int] = {}
    for rec in records:
        _, _, w, h = rec.bbox
        if w >= min_side and h >= min_side:
            id_map[rec.crop_id] = len(kept)
            kept.append(replace(rec, crop_id=len(kept)))
    return kept, id_map


def preprocess(
    records: Sequence[CropRecord],
    pad_frac: float = 0.05,
    min_side: int = 32,
    filter_stage: str = "post_pad",
) -> tuple[list[CropRecord], dict[int, int]]:
    """Apply padding and the size filter in the configured order."""
    if filter_stage not in FILTER_STAGES:
        raise CorpusError(f"filter_stage must be one of {FILTER_STAGES}, got {filter_stage!r}")
    if filter_stage == "post_pad":
        padded = [replace(r, bbox=pad_bbox(r.bbox, pad_frac, r.frame_dims)) for r in records]
        return filter_crops(padded, min_side)
    kept, id_map = filter_crops(records, min_side)
    return [replace(r, bbox=pad_bbox(r.bbox, pad_frac, r.frame_dims)) for r in kept], id_map


def stratified_count(n: int, ratio: float) -> int:
    """Gallery share of an identity with ``n`` crops."""
    if n == 1:
        return 1
    n_gallery = math.floor(ratio * n + 0.5)
    return min(max(n_gallery, 1), n - 1)


def _sequence_seed(seed: int, sequence_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(sequence_id.encode("utf-8"))])


def stratified_split(
    records: Sequence[CropRecord],
    ratio: float = 0.75,
    seed: int = 0,
    scope: str = "per_sequence",
) -> SplitAssignment:
    """Split crops into gallery/query per identity.

    Each identity's crops (sorted by crop id) are permuted with a seeded
    PCG64 stream; the first ``stratified_count(n, ratio)`` go to the gallery.
    With ``scope="per_sequence"`` every sequence gets its own stream, so adding
    a sequence never changes the split of another.
    """
    if not records:
        raise CorpusError("cannot split an empty corpus")
    if not 0.0 < ratio < 1.0:
        raise CorpusError(f"ratio must lie in (0, 1), got {ratio}")
    if scope not in SPLIT_SCOPES:
        raise CorpusError(f"scope must be one of {SPLIT_SCOPES}, got {scope!r}")
    if not 0 <= seed < 2**64:
        raise CorpusError("seed must be an unsigned 64-bit integer")

    groups: dict[tuple[str, int], list[int]] = defaultdict(list)
    for rec in records:
        groups[rec.identity_key].append(rec.crop_id)

    rngs: dict[str, np.random.Generator] = {}
    global_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    gallery: set[int] = set()
    query: set[int] = set()
    for key in sorted(groups):
        if scope == "global":
            rng = global_rng
        else:
            seq = key[0]
            if seq not in rngs:
                rngs[seq] = np.random.Generator(np.random.PCG64(_sequence_seed(seed, seq)))
            rng = rngs[seq]
        ids = sorted(groups[key])
        order = rng.permutation(len(ids))
        n_gallery = stratified_count(len(ids), ratio)
        shuffled = [ids[i] for i in order]
        gallery.update(shuffled[:n_gallery])
        query.update(shuffled[n_gallery:])
    return SplitAssignment(frozenset(gallery), frozenset(query), seed, ratio, scope)


@dataclass
class SequenceSource:
    sequence_id: str
    annotation_path: str
    frame_dims: tuple[int, int]


@dataclass
class Corpus:
    """A preprocessed crop corpus; serialises to the JSON manifest."""

    crops: list[CropRecord]
    sequences: list[SequenceSource] = field(default_factory=list)
    id_map: dict[int, int] = field(default_factory=dict)
    pad_frac: float = 0.05
    min_side: int = 32
    filter_stage: str = "post_pad"

    def __len__(self) -> int:
        return len(self.crops)

    def to_dict(self) -> dict:
        return {
            "format": "zsreid-manifest/1",
            "preprocessing": {
                "pad_frac": self.pad_frac,
                "min_side": self.min_side,
                "filter_stage": self.filter_stage,
            },
            "sequences": [
                {
                    "sequence_id": s.sequence_id,
                    "annotation_path": s.annotation_path,
                    "frame_dims": list(s.frame_dims),
                }
                for s in self.sequences
            ],
            "id_map": {str(k): v for k, v in sorted(self.id_map.items())},
            "crops": [c.to_dict() for c in self.crops],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Corpus":
        pre = d.get("preprocessing", {})
        crops = [CropRecord.from_dict(c) for c in d["crops"]]
        for i, c in enumerate(crops):
            if c.crop_id != i:
                raise CorpusError(f"manifest crop ids must be dense and ordered; entry {i} has id {c.crop_id}")
        return cls(
            crops=crops,
            sequences=[
                SequenceSource(s["sequence_id"], s["annotation_path"], tuple(s["frame_dims"]))
                for s in d.get("sequences", [])
            ],
            id_map={int(k): int(v) for k, v in d.get("id_map", {}).items()},
            pad_frac=float(pre.get("pad_frac", 0.05)),
            min_side=int(pre.get("min_side", 32)),
            filter_stage=pre.get("filter_stage", "post_pad"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def ingest(
    sources: Iterable[SequenceSource],
    pad_frac: float = 0.05,
    min_side: int = 32,
    filter_stage: str = "post_pad",
    base_dir: str | Path | None = None,
) -> Corpus:
    """Parse every sequence's annotation file and build a preprocessed corpus.

    Raw crop ids are numbered across sequences in source order before
    filtering; ``Corpus.id_map`` maps those raw ids to the final dense ids.
    """
    sources = list(sources)
    raw: list[CropRecord] = []
    for src in sources:
        path = Path(src.annotation_path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            parsed = parse_mot(path.read_text(encoding="utf-8"), src.sequence_id, src.frame_dims)
        except MOTParseError as e:
            raise MOTParseError(e.line_no, f"{e.detail} ({path})") from None
        offset = len(raw)
        raw.extend(replace(r, crop_id=r.crop_id + offset) for r in parsed)
    crops, id_map = preprocess(raw, pad_frac, min_side, filter_stage)
    return Corpus(crops, sources, id_map, pad_frac, min_side, filter_stage)
