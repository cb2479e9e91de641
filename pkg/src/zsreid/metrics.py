"""Retrieval metrics: full-ranking AP, mAP and CMC top-k."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from zsreid.similarity import SimilarityMatrix

CMC_KS = (1, 3, 5)
POOLING_MODES = ("per_sequence_macro", "global")


class MetricError(ValueError):
    pass


def average_precision(ranking: Sequence[int], relevant: Iterable[int]) -> float:
    """Mean of precision@k over the ranks k that hold a relevant item.

    ``ranking`` is the full gallery order; every relevant id must occur in it.
    """
    relevant = set(relevant)
    if not relevant:
        raise MetricError("average precision is undefined with no relevant items")
    hits = 0
    total = 0.0
    for k, item in enumerate(ranking, start=1):
        if item in relevant:
            hits += 1
            total += hits / k
    if hits != len(relevant):
        raise MetricError(f"{len(relevant) - hits} relevant id(s) missing from the ranking")
    return total / len(relevant)


def mean_ap(per_query_ap: Sequence[float]) -> float:
    if len(per_query_ap) == 0:
        raise MetricError("mean AP of zero queries")
    return float(np.mean(np.asarray(per_query_ap, dtype=np.float64)))


def cmc_at_k(rankings: Sequence[Sequence[int]], relevants: Sequence[Iterable[int]], k: int) -> float:
    """Fraction of queries with at least one relevant id in the top ``k``."""
    if k < 1:
        raise MetricError("CMC cut-off must be >= 1")
    if len(rankings) != len(relevants):
        raise MetricError("rankings and relevant sets differ in length")
    if not rankings:
        raise MetricError("CMC of zero queries")
    hit = 0
    for ranking, rel in zip(rankings, relevants):
        rel = set(rel)
        if any(item in rel for item in ranking[:k]):
            hit += 1
    return hit / len(rankings)


def first_match_rank(ranking: Sequence[int], relevant: Iterable[int]) -> int:
    relevant = set(relevant)
    for k, item in enumerate(ranking, start=1):
        if item in relevant:
            return k
    raise MetricError("no relevant item in ranking")


@dataclass(frozen=True)
class QueryResult:
    crop_id: int
    sequence_id: str
    identity: int
    ap: float
    first_match_rank: int
    n_relevant: int


@dataclass
class EvalReport:
    map: float
    cmc: dict[int, float]
    per_query: list[QueryResult]
    n_queries_evaluated: int
    n_queries_skipped: int
    config_fingerprint: str = ""
    pooling: str = "per_sequence_macro"
    per_sequence: dict[str, dict] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def per_query_ap(self) -> list[tuple[int, float]]:
        return [(q.crop_id, q.ap) for q in self.per_query]

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "n_queries_evaluated": self.n_queries_evaluated,
            "n_queries_skipped": self.n_queries_skipped,
            "config_fingerprint": self.config_fingerprint,
            "pooling": self.pooling,
            "per_sequence": {
                s: {**v, "cmc": {str(k): c for k, c in sorted(v["cmc"].items())}}
                for s, v in sorted(self.per_sequence.items())
            },
            "per_query": [asdict(q) for q in self.per_query],
            "config": self.config,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            map=float(d["map"]),
            cmc={int(k): float(v) for k, v in d["cmc"].items()},
            per_query=[QueryResult(**q) for q in d["per_query"]],
            n_queries_evaluated=int(d["n_queries_evaluated"]),
            n_queries_skipped=int(d["n_queries_skipped"]),
            config_fingerprint=d.get("config_fingerprint", ""),
            pooling=d.get("pooling", "per_sequence_macro"),
            per_sequence={
                s: {**v, "cmc": {int(k): float(c) for k, c in v["cmc"].items()}}
                for s, v in d.get("per_sequence", {}).items()
            },
            config=dict(d.get("config", {})),
            notes=list(d.get("notes", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def score_queries(
    scores: SimilarityMatrix,
    identity_of: Mapping[int, Hashable],
    sequence_of: Mapping[int, str] | None = None,
) -> tuple[list[QueryResult], list[int]]:
    """Rank every query row and compute its AP and first-match rank.

    Queries with no same-identity gallery item are returned as skipped ids.
    ``identity_of`` values may be any hashable key; the report stores the
    track id (second element for ``(sequence, track)`` keys).
    """
    results: list[QueryResult] = []
    skipped: list[int] = []
    for qid, ranking in zip(scores.rows, scores.rankings()):
        key = identity_of[qid]
        relevant = {g for g in scores.cols if identity_of[g] == key}
        if not relevant:
            skipped.append(qid)
            continue
        track = key[1] if isinstance(key, tuple) else key
        seq = sequence_of[qid] if sequence_of is not None else (key[0] if isinstance(key, tuple) else "")
        results.append(
            QueryResult(
                crop_id=int(qid),
                sequence_id=str(seq),
                identity=int(track),
                ap=average_precision(ranking, relevant),
                first_match_rank=first_match_rank(ranking, relevant),
                n_relevant=len(relevant),
            )
        )
    return results, skipped


def summarize(results: Sequence[QueryResult], ks: Sequence[int] = CMC_KS) -> dict:
    if not results:
        raise MetricError("no evaluable queries")
    return {
        "map": mean_ap([r.ap for r in results]),
        "cmc": {k: sum(r.first_match_rank <= k for r in results) / len(results) for k in ks},
        "n_queries": len(results),
    }


def pool_results(
    results: Sequence[QueryResult], pooling: str = "per_sequence_macro", ks: Sequence[int] = CMC_KS
) -> tuple[float, dict[int, float], dict[str, dict]]:
    """Aggregate per-query results into mAP/CMC.

    ``per_sequence_macro`` averages each sequence's mAP/CMC with equal weight;
    ``global`` pools every query.
    """
    if pooling not in POOLING_MODES:
        raise MetricError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    by_seq: dict[str, list[QueryResult]] = {}
    for r in results:
        by_seq.setdefault(r.sequence_id, []).append(r)
    per_sequence = {s: summarize(rs, ks) for s, rs in sorted(by_seq.items())}
    if pooling == "global":
        overall = summarize(results, ks)
        return overall["map"], overall["cmc"], per_sequence
    seqs = list(per_sequence.values())
    m = mean_ap([s["map"] for s in seqs])
    cmc = {k: float(np.mean([s["cmc"][k] for s in seqs])) for k in ks}
    return m, cmc, per_sequence
