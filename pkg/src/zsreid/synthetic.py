"""Deterministic synthetic corpora for end-to-end checks without model weights.

Crops are laid out as a MOT annotation file and ingested like real data.
Embeddings come from a hash-seeded stub encoder: every vector is a seeded
Gaussian keyed by (sequence, crop, model), plus, in identity-signal mode,
shared per-category and per-identity directions so that retrieval is
solvable but not trivial. The natural variant carries extra per-crop
"background" noise which the zeroed variant mostly lacks. Masks are jittered
per-identity ellipses, rendered at each crop's own size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zsreid.corpus import SequenceSource, ingest
from zsreid.embeddings import ZEROED_SUFFIX, EmbeddingMatrix, write_embeddings
from zsreid.masks import MaskRecord, ellipse_bitmap, encode_rle, save_masks

MODEL_DIMS = {"sam3": 256, "dinov2": 768, "clip": 768, "dreamsim": 1792, "ijepa": 1280, "dinov3": 768}


def stub_rng(*key: object) -> np.random.Generator:
    """PCG64 stream seeded from a SHA-256 of the key; stable across platforms."""
    digest = hashlib.sha256("\x1f".join(map(str, key)).encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype="<u4").tolist()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def stub_vector(dim: int, *key: object) -> np.ndarray:
    v = stub_rng(*key).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int = 50
    crops_per_identity: int = 12
    n_categories: int = 10
    models: tuple[str, ...] = ("sam3", "dinov2", "clip")
    category_weight: float = 1.0
    identity_weight: float = 0.25
    view_noise: float = 1.5
    background_noise: float = 1.5
    zeroed_background_scale: float = 0.25
    mask_jitter: float = 0.03
    shape_center_range: tuple[float, float] = (0.45, 0.55)
    shape_radius_range: tuple[float, float] = (0.3, 0.45)
    sequence_id: str = "synthetic"
    frame_dims: tuple[int, int] = (1920, 1080)
    informative_masks: bool = True
    n_sequences: int = 1


def _identity_shape(seed: int, spec: SyntheticSpec, sequence_id: str, identity: int) -> tuple[float, float, float, float]:
    rng = stub_rng("shape", seed, sequence_id, identity)
    cy, cx = rng.uniform(*spec.shape_center_range, size=2)
    ry, rx = rng.uniform(*spec.shape_radius_range, size=2)
    return float(cy), float(cx), float(ry), float(rx)


def _annotation_text(seed: int, spec: SyntheticSpec, sequence_id: str) -> str:
    rng = stub_rng("layout", seed, sequence_id)
    lines = []
    for identity in range(1, spec.n_identities + 1):
        frames = np.sort(rng.choice(np.arange(1, 10 * spec.crops_per_identity + 1), spec.crops_per_identity, replace=False))
        for frame in frames:
            w, h = rng.uniform(48, 200, size=2)
            x = rng.uniform(0, spec.frame_dims[0] - w)
            y = rng.uniform(0, spec.frame_dims[1] - h)
            lines.append((int(frame), identity, round(x, 2), round(y, 2), round(w, 2), round(h, 2)))
    lines.sort()
    return "".join(f"{f},{i},{x},{y},{w},{h},1,-1,-1,-1\n" for f, i, x, y, w, h in lines)


def write_synthetic_dataset(out_dir: str | Path, seed: int = 0, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    """Write annotations, manifest, embeddings, masks and a config; return the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = []
    for k in range(spec.n_sequences):
        seq_id = spec.sequence_id if spec.n_sequences == 1 else f"{spec.sequence_id}-{k + 1}"
        gt_name = "gt.txt" if spec.n_sequences == 1 else f"{seq_id}.gt.txt"
        (out / gt_name).write_text(_annotation_text(seed, spec, seq_id), encoding="utf-8")
        sources.append(SequenceSource(seq_id, gt_name, spec.frame_dims))

    corpus = ingest(sources, base_dir=out)
    corpus.save(out / "manifest.json")

    category_of = {i: (i - 1) % spec.n_categories for i in range(1, spec.n_identities + 1)}
    emb_paths: dict[str, dict[str, str]] = {"natural": {}, "zeroed": {}}
    for model in spec.models:
        dim = MODEL_DIMS.get(model, 512)
        nat = np.empty((len(corpus), dim), dtype=np.float64)
        zer = np.empty_like(nat)
        for c in corpus.crops:
            cat = stub_vector(dim, "category", seed, model, c.sequence_id, category_of[c.identity])
            ident = stub_vector(dim, "identity", seed, model, c.sequence_id, c.identity)
            view = stub_vector(dim, "view", seed, model, c.sequence_id, c.crop_id)
            bg = stub_vector(dim, "background", seed, model, c.sequence_id, c.crop_id)
            core = spec.category_weight * cat + spec.identity_weight * ident + spec.view_noise * view
            nat[c.crop_id] = core + spec.background_noise * bg
            zer[c.crop_id] = core + spec.zeroed_background_scale * spec.background_noise * bg
        for variant, data, name in (("natural", nat, model), ("zeroed", zer, model + ZEROED_SUFFIX)):
            rel = f"{model}.{variant}.emb"
            write_embeddings(out / rel, EmbeddingMatrix(name, data.astype(np.float32)))
            emb_paths[variant][model] = rel

    records = []
    for c in corpus.crops:
        width = max(1, int(round(c.bbox[2])))
        height = max(1, int(round(c.bbox[3])))
        if spec.informative_masks:
            cy, cx, ry, rx = _identity_shape(seed, spec, c.sequence_id, c.identity)
            j = stub_rng("mask", seed, c.sequence_id, c.crop_id).uniform(-1, 1, size=4) * spec.mask_jitter
            bitmap = ellipse_bitmap(height, width, (cy + j[0], cx + j[1]), (ry * (1 + j[2]), rx * (1 + j[3])))
        else:
            bitmap = np.ones((height, width), dtype=np.uint8)
        records.append(MaskRecord(c.crop_id, width, height, tuple(encode_rle(bitmap))))
    save_masks(out / "masks.jsonl", records)

    config = {
        "manifest": "manifest.json",
        "masks": "masks.jsonl",
        "embeddings": emb_paths,
        "fusion_models": [m for m in ("sam3", "dinov2", "clip") if m in spec.models] or list(spec.models),
        "single_model": "sam3" if "sam3" in spec.models else spec.models[0],
        "split": {"seed": seed},
        "fuse_table": {"models": [m for m in ("dinov2", "dreamsim", "clip") if m in spec.models] or list(spec.models)},
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return cfg_path
