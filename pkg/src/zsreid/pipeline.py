"""End-to-end evaluation: corpus -> split -> descriptors -> scores -> metrics.

One code path serves every configuration. The single-encoder cosine baseline
is simply the run with all four stages off; the ablation grid and the fusion
table are loops over modified copies of one config.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from zsreid.corpus import SPLIT_SCOPES, Corpus, SplitAssignment, stratified_split
from zsreid.embeddings import EmbeddingMatrix, FusedDescriptorMatrix, fuse, load_embeddings
from zsreid.masks import grids_for, iou_matrix, load_masks
from zsreid.metrics import POOLING_MODES, EvalReport, pool_results, score_queries
from zsreid.rerank import RerankParams, k_reciprocal_rerank
from zsreid.similarity import (
    AQE_WEIGHTINGS,
    SimilarityMatrix,
    aqe_expand,
    combined_similarity,
    cosine_matrix,
)

log = logging.getLogger(__name__)

STAGE_NAMES = ("background_removed_features", "fusion", "mask_iou", "rerank")
REPORT_FORMATS = ("json", "csv")
GALLERY_SCOPES = ("global", "per_sequence")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Stages:
    background_removed_features: bool = True
    fusion: bool = True
    mask_iou: bool = True
    rerank: bool = True

    @property
    def enhanced(self) -> bool:
        """Any stage beyond plain fusion is switched on."""
        return self.background_removed_features or self.mask_iou or self.rerank


ALL_ON = Stages()
ALL_OFF = Stages(False, False, False, False)


@dataclass(frozen=True)
class PipelineConfig:
    """Full description of one evaluation run.

    Paths are resolved against ``base_dir`` (the config file's directory when
    loaded from disk). ``base_dir`` is not part of the fingerprint.
    """

    manifest: str
    embeddings: dict[str, dict[str, str]] = field(default_factory=dict)
    masks: str | None = None
    stages: Stages = ALL_ON
    fusion_models: tuple[str, ...] = ("sam3", "dinov2", "clip")
    single_model: str = "sam3"
    alpha: float = 0.7
    beta: float = 0.3
    rerank: RerankParams = RerankParams()
    aqe_k: int | None = None
    aqe_weighting: str = "uniform"
    split_ratio: float = 0.75
    seed: int = 0
    split_scope: str = "per_sequence"
    pooling: str = "per_sequence_macro"
    gallery_scope: str = "global"
    mask_grid_size: int = 64
    block_size: int = 64
    table_models: tuple[str, ...] = ("dinov2", "dreamsim", "clip")
    table_aqe_k: int = 10
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "embeddings": {v: dict(sorted(m.items())) for v, m in sorted(self.embeddings.items())},
            "masks": self.masks,
            "stages": asdict(self.stages),
            "fusion_models": list(self.fusion_models),
            "single_model": self.single_model,
            "alpha": self.alpha,
            "beta": self.beta,
            "rerank": {"k1": self.rerank.k1, "k2": self.rerank.k2, "lambda": self.rerank.lambda_value},
            "aqe": {"k": self.aqe_k, "weighting": self.aqe_weighting},
            "split": {"ratio": self.split_ratio, "seed": self.seed, "scope": self.split_scope},
            "metrics": {"pooling": self.pooling, "gallery_scope": self.gallery_scope},
            "mask_grid_size": self.mask_grid_size,
            "block_size": self.block_size,
            "fuse_table": {"models": list(self.table_models), "aqe_k": self.table_aqe_k},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        known = {
            "manifest", "embeddings", "masks", "stages", "fusion_models", "single_model", "alpha",
            "beta", "rerank", "aqe", "split", "metrics", "mask_grid_size", "block_size", "fuse_table",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "manifest" not in d:
            raise ConfigError("config needs a 'manifest' path")
        stages = d.get("stages", {})
        bad = set(stages) - set(STAGE_NAMES)
        if bad:
            raise ConfigError(f"unknown stage flags: {sorted(bad)}")
        rr = d.get("rerank", {})
        aqe = d.get("aqe", {})
        split = d.get("split", {})
        table = d.get("fuse_table", {})
        try:
            cfg = cls(
                manifest=d["manifest"],
                embeddings={v: dict(m) for v, m in d.get("embeddings", {}).items()},
                masks=d.get("masks"),
                stages=Stages(**{k: bool(v) for k, v in stages.items()}),
                fusion_models=tuple(d.get("fusion_models", ("sam3", "dinov2", "clip"))),
                single_model=d.get("single_model", "sam3"),
                alpha=float(d.get("alpha", 0.7)),
                beta=float(d.get("beta", 0.3)),
                rerank=RerankParams(
                    int(rr.get("k1", 20)), int(rr.get("k2", 6)), float(rr.get("lambda", 0.3))
                ),
                aqe_k=None if aqe.get("k") is None else int(aqe["k"]),
                aqe_weighting=aqe.get("weighting", "uniform"),
                split_ratio=float(split.get("ratio", 0.75)),
                seed=int(split.get("seed", 0)),
                split_scope=split.get("scope", "per_sequence"),
                pooling=d.get("metrics", {}).get("pooling", "per_sequence_macro"),
                gallery_scope=d.get("metrics", {}).get("gallery_scope", "global"),
                mask_grid_size=int(d.get("mask_grid_size", 64)),
                block_size=int(d.get("block_size", 64)),
                table_models=tuple(table.get("models", ("dinov2", "dreamsim", "clip"))),
                table_aqe_k=int(table.get("aqe_k", 10)),
                base_dir=str(base_dir),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(d, base_dir=path.parent)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        if self.stages.mask_iou and not self.masks:
            raise ConfigError("mask_iou stage is on but no masks file is configured")
        if self.stages.fusion and not self.fusion_models:
            raise ConfigError("fusion stage is on but fusion_models is empty")
        if self.aqe_k is not None and self.stages.enhanced:
            raise ConfigError(
                "AQE runs only on the natural-crop fusion path; switch off "
                "background_removed_features, mask_iou and rerank"
            )
        if self.aqe_k is not None and self.aqe_k < 1:
            raise ConfigError("aqe.k must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("split seed must be an unsigned 64-bit integer")
        choices = (
            ("metrics.pooling", self.pooling, POOLING_MODES),
            ("metrics.gallery_scope", self.gallery_scope, GALLERY_SCOPES),
            ("split.scope", self.split_scope, SPLIT_SCOPES),
            ("aqe.weighting", self.aqe_weighting, AQE_WEIGHTINGS),
        )
        for key, value, allowed in choices:
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        if self.mask_grid_size < 1 or self.block_size < 1:
            raise ConfigError("mask_grid_size and block_size must be positive")

    def with_stages(self, stages: Stages) -> "PipelineConfig":
        return replace(self, stages=stages)


class InputCache:
    """Loaded embeddings and mask grids, shared across runs of one grid."""

    def __init__(self):
        self._embeddings: dict[Path, EmbeddingMatrix] = {}
        self._grids: dict[tuple[Path, int], tuple[int, np.ndarray]] = {}

    def embeddings(self, path: Path) -> EmbeddingMatrix:
        if path not in self._embeddings:
            self._embeddings[path] = load_embeddings(path)
        return self._embeddings[path]

    def grids(self, path: Path, n_crops: int, grid_size: int) -> np.ndarray:
        key = (path, grid_size)
        if key not in self._grids:
            masks = load_masks(path)
            if len(masks) != n_crops:
                raise ConfigError(f"inconsistent crop counts: manifest {n_crops}, masks {len(masks)}")
            self._grids[key] = (n_crops, grids_for(masks, range(n_crops), grid_size))
        n, grids = self._grids[key]
        if n != n_crops:
            raise ConfigError(f"inconsistent crop counts: manifest {n_crops}, masks {n}")
        return grids


def _load_descriptors(
    cfg: PipelineConfig, n_crops: int, cache: InputCache
) -> tuple[FusedDescriptorMatrix, list[str]]:
    variant = "zeroed" if cfg.stages.background_removed_features else "natural"
    models = list(cfg.fusion_models) if cfg.stages.fusion else [cfg.single_model]
    table = cfg.embeddings.get(variant, {})
    missing = [m for m in models if m not in table]
    if missing:
        raise ConfigError(f"no {variant} embedding file configured for model(s) {missing}")
    parts: list[EmbeddingMatrix] = [cache.embeddings(cfg.resolve(table[m])) for m in models]
    counts = {"manifest": n_crops, **{f"{variant}/{m}": p.rows for m, p in zip(models, parts)}}
    if len(set(counts.values())) != 1:
        raise ConfigError(f"inconsistent crop counts across inputs: {counts}")
    for m, p in zip(models, parts):
        if p.background_zeroed != (variant == "zeroed"):
            want = "carry" if variant == "zeroed" else "not carry"
            raise ConfigError(
                f"{variant} embeddings for {m!r} must {want} the '+zeroed' background flag "
                f"(file model name {p.model_name!r})"
            )
    notes = []
    if not cfg.stages.fusion:
        notes.append(f"fusion disabled: single encoder {cfg.single_model!r}")
    return fuse(parts), notes


def _groups(corpus: Corpus, split: SplitAssignment, gallery_scope: str) -> list[tuple[list[int], list[int]]]:
    """(queries, gallery) groups: one over everything, or one per sequence."""
    if gallery_scope == "global":
        return [(sorted(split.query), sorted(split.gallery))]
    seqs: dict[str, tuple[list[int], list[int]]] = {}
    for c in corpus.crops:
        q, g = seqs.setdefault(c.sequence_id, ([], []))
        (q if c.crop_id in split.query else g).append(c.crop_id)
    return [seqs[s] for s in sorted(seqs)]


def score_group(
    cfg: PipelineConfig,
    desc: np.ndarray,
    grids: np.ndarray | None,
    q_ids: Sequence[int],
    g_ids: Sequence[int],
) -> SimilarityMatrix:
    """Scores (or re-ranked distances) of one group's queries against its gallery."""
    beta = cfg.beta if cfg.stages.mask_iou else 0.0

    def blended(rows: Sequence[int], cols: Sequence[int], row_desc: np.ndarray) -> SimilarityMatrix:
        cos = cosine_matrix(row_desc, desc[list(cols)], rows, cols, cfg.block_size)
        if grids is not None and cfg.stages.mask_iou:
            iou_data = iou_matrix(grids[list(rows)], grids[list(cols)])
        else:
            iou_data = np.zeros_like(cos.data)
        return combined_similarity(cos, SimilarityMatrix(cos.rows, cos.cols, iou_data), cfg.alpha, beta)

    if cfg.stages.rerank:
        joint = list(q_ids) + list(g_ids)
        sim = blended(joint, joint, desc[joint])
        return k_reciprocal_rerank(sim, len(q_ids), cfg.rerank)
    q_desc = desc[list(q_ids)]
    if cfg.aqe_k is not None:
        q_desc = aqe_expand(q_desc, desc[list(g_ids)], cfg.aqe_k, g_ids, cfg.aqe_weighting)
    return blended(q_ids, g_ids, q_desc)


def run_evaluation(
    cfg: PipelineConfig, split: SplitAssignment | None = None, cache: InputCache | None = None
) -> EvalReport:
    cfg.validate()
    cache = cache or InputCache()
    corpus = Corpus.load(cfg.resolve(cfg.manifest))
    if split is None:
        split = stratified_split(corpus.crops, cfg.split_ratio, cfg.seed, cfg.split_scope)
    fused, notes = _load_descriptors(cfg, len(corpus), cache)
    desc = fused.data.astype(np.float64)

    grids = None
    if cfg.stages.mask_iou:
        grids = cache.grids(cfg.resolve(cfg.masks), len(corpus), cfg.mask_grid_size)

    identity_of = {c.crop_id: c.identity_key for c in corpus.crops}
    results, skipped = [], []
    for q_ids, g_ids in _groups(corpus, split, cfg.gallery_scope):
        if not q_ids or not g_ids:
            skipped.extend(q_ids)
            continue
        scores = score_group(cfg, desc, grids, q_ids, g_ids)
        r, s = score_queries(scores, identity_of)
        results.extend(r)
        skipped.extend(s)
    results.sort(key=lambda r: r.crop_id)
    m, cmc, per_seq = pool_results(results, cfg.pooling)
    log.info("mAP %.4f top1 %.4f over %d queries (%d skipped)", m, cmc[1], len(results), len(skipped))
    config_dict = cfg.to_dict()
    config_dict["prng"] = split.prng
    return EvalReport(
        map=m,
        cmc=cmc,
        per_query=results,
        n_queries_evaluated=len(results),
        n_queries_skipped=len(skipped),
        config_fingerprint=cfg.fingerprint(),
        pooling=cfg.pooling,
        per_sequence=per_seq,
        config=config_dict,
        notes=notes,
    )


ABLATION_ROWS: tuple[tuple[str, Stages], ...] = (
    ("full", ALL_ON),
    ("no_background_removal", replace(ALL_ON, background_removed_features=False)),
    ("no_fusion", replace(ALL_ON, fusion=False)),
    ("no_mask_iou", replace(ALL_ON, mask_iou=False)),
    ("no_rerank", replace(ALL_ON, rerank=False)),
)


def ablate(cfg: PipelineConfig) -> list[tuple[dict, EvalReport]]:
    """All stages on, then each stage switched off in turn, on one shared split."""
    corpus = Corpus.load(cfg.resolve(cfg.manifest))
    split = stratified_split(corpus.crops, cfg.split_ratio, cfg.seed, cfg.split_scope)
    cache = InputCache()
    rows = []
    for name, stages in ABLATION_ROWS:
        report = run_evaluation(cfg.with_stages(stages), split, cache)
        rows.append(({"row": name, **asdict(stages)}, report))
    return rows


def fuse_table(cfg: PipelineConfig) -> list[dict]:
    """Every non-empty subset of ``table_models``, with and without AQE."""
    corpus = Corpus.load(cfg.resolve(cfg.manifest))
    split = stratified_split(corpus.crops, cfg.split_ratio, cfg.seed, cfg.split_scope)
    cache = InputCache()
    rows = []
    for qe in (None, cfg.table_aqe_k):
        for size in range(1, len(cfg.table_models) + 1):
            for subset in itertools.combinations(cfg.table_models, size):
                row_cfg = replace(
                    cfg,
                    stages=replace(ALL_OFF, fusion=True),
                    fusion_models=subset,
                    aqe_k=qe,
                )
                report = run_evaluation(row_cfg, split, cache)
                rows.append(
                    {
                        "models": list(subset),
                        "qe": qe,
                        "map": report.map,
                        "cmc": {str(k): v for k, v in report.cmc.items()},
                        "n_queries": report.n_queries_evaluated,
                        "config_fingerprint": report.config_fingerprint,
                    }
                )
    return rows


def emit_report(report: EvalReport, fmt: str, path: str | Path) -> None:
    """Write ``report`` as JSON (lossless) or as a per-query CSV."""
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    path = Path(path)
    if fmt == "json":
        path.write_text(report.to_json(), encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["crop_id", "sequence_id", "identity", "ap", "first_match_rank"])
        for q in report.per_query:
            writer.writerow([q.crop_id, q.sequence_id, q.identity, repr(q.ap), q.first_match_rank])


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
