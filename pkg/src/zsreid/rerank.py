"""k-reciprocal re-ranking over the joint query + gallery set.

Input is the full pairwise similarity of queries followed by gallery items.
Similarities become distances ``d = 1 - s``; neighbour lists exclude the item
itself and break distance ties by ascending crop id. Only the query x gallery
block of the final distance is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zsreid.similarity import SimilarityError, SimilarityMatrix


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def __post_init__(self):
        if not (self.k1 > self.k2 >= 1):
            raise ValueError(f"need k1 > k2 >= 1, got k1={self.k1} k2={self.k2}")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_value}")


@dataclass
class RerankTrace:
    """Intermediate state, indexed by position in the joint set."""

    distance: np.ndarray
    neighbors: np.ndarray
    reciprocal: list[list[int]]
    expanded: list[list[int]]
    v: np.ndarray
    v_qe: np.ndarray
    jaccard: np.ndarray
    final: np.ndarray


def _neighbor_order(dist: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Row p lists every other item by ascending distance, ties by id."""
    n = dist.shape[0]
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    order = np.lexsort((np.broadcast_to(ids, masked.shape), masked), axis=-1)
    # self sorts last (infinite distance)
    return order[:, : n - 1]


def _reciprocal_sets(order: np.ndarray, k: int) -> list[list[int]]:
    n = order.shape[0]
    member = np.zeros((n, n), dtype=bool)
    member[np.arange(n)[:, None], order[:, :k]] = True
    recip = member & member.T
    return [np.flatnonzero(row).tolist() for row in recip]


def k_reciprocal_rerank(
    sim: SimilarityMatrix,
    n_query: int,
    params: RerankParams = RerankParams(),
    return_trace: bool = False,
) -> SimilarityMatrix | tuple[SimilarityMatrix, RerankTrace]:
    """Re-rank with k-reciprocal encoding and return the Q x G distance block."""
    s = np.asarray(sim.data, dtype=np.float64)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[0] != s.shape[1] or sim.rows != sim.cols:
        raise SimilarityError("re-ranking needs a square joint similarity matrix with rows == cols")
    if sim.kind != "similarity":
        raise SimilarityError("re-ranking expects a similarity matrix")
    if not 0 < n_query < n:
        raise SimilarityError(f"n_query must lie in (0, {n}), got {n_query}")
    if params.k1 >= n:
        raise SimilarityError(f"k1={params.k1} must be smaller than the joint set size {n}")

    ids = np.asarray(sim.rows)
    # tiny negatives come from cosines a hair above 1
    dist = np.maximum(1.0 - s, 0.0)
    order = _neighbor_order(dist, ids)

    recip = _reciprocal_sets(order, params.k1)
    recip_half = _reciprocal_sets(order, params.k1 // 2)

    v = np.zeros((n, n), dtype=np.float64)
    expanded: list[list[int]] = []
    for p in range(n):
        base = set(recip[p])
        grown = set(base)
        for q in recip[p]:
            cand = recip_half[q]
            # overlap >= 2/3 of the candidate set, in integers
            if 3 * len(base.intersection(cand)) >= 2 * len(cand):
                grown.update(cand)
        members = sorted(grown)
        expanded.append(members)
        if members:
            w = np.exp(-dist[p, members])
            v[p, members] = w / w.sum()

    if params.k2 > 1:
        # p itself plus its k2 - 1 nearest neighbours
        qe_sets = np.concatenate([np.arange(n)[:, None], order[:, : params.k2 - 1]], axis=1)
        v_qe = v[qe_sets].mean(axis=1)
    else:
        v_qe = v.copy()

    gallery = np.arange(n_query, n)
    jaccard = np.empty((n_query, n - n_query), dtype=np.float64)
    vg = v_qe[gallery]
    vg_sums = vg.sum(axis=1)
    for i in range(n_query):
        vi = v_qe[i]
        # min is zero off the query's support; max = a + b - min
        support = np.flatnonzero(vi)
        mins = np.minimum(vi[support], vg[:, support]).sum(axis=1)
        maxs = vi.sum() + vg_sums - mins
        # two empty encodings share nothing: distance 1
        overlap = np.divide(mins, maxs, out=np.zeros_like(mins), where=maxs > 0)
        jaccard[i] = 1.0 - overlap

    original = dist[:n_query, n_query:]
    lam = params.lambda_value
    final = (1.0 - lam) * jaccard + lam * original
    out = SimilarityMatrix(tuple(sim.rows[:n_query]), tuple(sim.cols[n_query:]), final, "distance")
    if not return_trace:
        return out
    trace = RerankTrace(dist, order, recip, expanded, v, v_qe, jaccard, final)
    return out, trace
