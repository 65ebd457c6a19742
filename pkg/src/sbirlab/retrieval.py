"""Exact Euclidean retrieval of photos by sketch, recall@k and error diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np


class MirrorMapMissing(ValueError):
    """Flip confusion needs to know which photo mirrors which."""


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: np.ndarray
    vectors: np.ndarray
    categories: np.ndarray
    mirror: Optional[Mapping[int, int]] = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        vecs = np.asarray(self.vectors, dtype=np.float64)
        cats = np.asarray(self.categories, dtype=np.int64)
        if vecs.ndim != 2 or len(vecs) != len(ids) or len(cats) != len(ids):
            raise ValueError("ids, vectors and categories must be aligned (N, N×D, N)")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("photo ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "categories", cats)
        if self.mirror is not None:
            present = set(ids.tolist())
            mirror = {int(a): int(b) for a, b in self.mirror.items()
                      if int(a) in present and int(b) in present}
            for a, b in mirror.items():
                if mirror.get(b) != a:
                    raise ValueError(f"mirror map is not symmetric for ids {a} and {b}")
            object.__setattr__(self, "mirror", mirror)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def category_of(self, photo_id: int) -> int:
        return int(self.categories[np.flatnonzero(self.ids == photo_id)[0]])


@dataclass
class RetrievalResult:
    query_id: int
    ranked_ids: np.ndarray
    distances: np.ndarray
    ground_truth: int
    query_category: int
    ranked_categories: np.ndarray

    def rank_of_truth(self) -> Optional[int]:
        """1-based rank of the ground-truth photo, or None if it was not retrieved."""
        hit = np.flatnonzero(self.ranked_ids == self.ground_truth)
        return int(hit[0]) + 1 if hit.size else None


def _distances(index: EmbeddingIndex, queries: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - index.vectors[None, :, :]
    return np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))


def knn_batch(index: EmbeddingIndex, queries: np.ndarray, k: int,
              chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(ids, distances), each Q×k, ascending by distance then by photo id."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ValueError(f"queries must be Q×{index.dim}, got {queries.shape}")
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    out_ids, out_d = [], []
    for lo in range(0, len(queries), chunk):
        dist = _distances(index, queries[lo:lo + chunk])
        order = np.lexsort((np.broadcast_to(index.ids, dist.shape), dist), axis=1)[:, :k]
        out_ids.append(index.ids[order])
        out_d.append(np.take_along_axis(dist, order, axis=1))
    if not out_ids:
        return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
    return np.concatenate(out_ids), np.concatenate(out_d)


def knn(index: EmbeddingIndex, query, k: int) -> list[tuple[int, float]]:
    """Exact k nearest photos to one query; equal distances rank by ascending id."""
    ids, dist = knn_batch(index, np.asarray(query, dtype=np.float64)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(ids[0], dist[0])]


def retrieve(index: EmbeddingIndex, query_ids: Sequence[int], queries: np.ndarray,
             ground_truth: Sequence[int], query_categories: Sequence[int],
             depth: Optional[int] = None) -> list[RetrievalResult]:
    depth = len(index) if depth is None else depth
    ids, dist = knn_batch(index, queries, depth)
    lookup = dict(zip(index.ids.tolist(), index.categories.tolist()))
    results = []
    for q, row, d, gt, cat in zip(query_ids, ids, dist, ground_truth, query_categories):
        cats = np.array([lookup[i] for i in row.tolist()], dtype=np.int64)
        results.append(RetrievalResult(int(q), row, d, int(gt), int(cat), cats))
    return results


# -- metrics -------------------------------------------------------------------


def recall_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    """Fraction of queries whose own ground-truth photo is among the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("recall@k of an empty result set is undefined")
    hits = [gt_rank is not None and gt_rank <= k for gt_rank in (r.rank_of_truth() for r in results)]
    return float(np.mean(hits))


def flip_confusion_count(results: Sequence[RetrievalResult], index: EmbeddingIndex) -> int:
    if not index.mirror:
        raise MirrorMapMissing("index has no mirror map; flip confusion is unavailable")
    n = 0
    for r in results:
        if len(r.ranked_ids) >= 2 and r.ranked_ids[1] == r.ground_truth:
            if index.mirror.get(r.ground_truth) == int(r.ranked_ids[0]):
                n += 1
    return n


def flip_confusion_rate(results: Sequence[RetrievalResult], index: EmbeddingIndex) -> float:
    """Share of queries whose ground truth is second, behind its own mirror image."""
    if not results:
        return 0.0
    return flip_confusion_count(results, index) / len(results)


def _rank2_queries(results: Iterable[RetrievalResult]) -> list[RetrievalResult]:
    return [r for r in results if len(r.ranked_ids) >= 2 and r.ranked_ids[1] == r.ground_truth]


def category_mismatch_count(results: Sequence[RetrievalResult]) -> int:
    """Queries answered second-best where the top photo is from another category."""
    return sum(int(r.ranked_categories[0] != r.query_category) for r in _rank2_queries(results))


def category_mismatch_rate(results: Sequence[RetrievalResult]) -> float:
    """:func:`category_mismatch_count` over the number of ground-truth-at-rank-2 queries."""
    second = _rank2_queries(results)
    if not second:
        return 0.0
    return category_mismatch_count(results) / len(second)


def improvement_percentage(baseline_error_count: int, new_error_count: int) -> float:
    """Relative drop in an error count, in percent (negative when errors grew)."""
    if baseline_error_count <= 0:
        raise ValueError("baseline error count must be positive")
    return 100.0 * (baseline_error_count - new_error_count) / baseline_error_count


# -- reports -------------------------------------------------------------------


@dataclass
class RetrievalReport:
    recall: dict[int, float]
    flip_confusion_rate: Optional[float]
    flip_confusion_count: Optional[int]
    category_mismatch_rate: float
    category_mismatch_count: int
    num_queries: int
    num_photos: int
    results: list[RetrievalResult] = field(default_factory=list, repr=False)
    provenance: dict = field(default_factory=dict)

    def to_dict(self, per_query: bool = True, top: int = 5) -> dict:
        """Plain-data view with a fixed key order."""
        d = {
            "format": "sbirlab-report",
            "version": 1,
            "num_queries": self.num_queries,
            "num_photos": self.num_photos,
            "recall": {f"@{k}": self.recall[k] for k in sorted(self.recall)},
            "flip_confusion_rate": self.flip_confusion_rate,
            "flip_confusion_count": self.flip_confusion_count,
            "flip_confusion_available": self.flip_confusion_rate is not None,
            "category_mismatch_rate": self.category_mismatch_rate,
            "category_mismatch_count": self.category_mismatch_count,
            "provenance": self.provenance,
        }
        if per_query:
            d["queries"] = [
                {"query_id": r.query_id, "ground_truth": r.ground_truth,
                 "query_category": r.query_category, "rank_of_truth": r.rank_of_truth(),
                 "ranked_ids": r.ranked_ids[:top].tolist(),
                 "distances": r.distances[:top].tolist()}
                for r in self.results
            ]
        return d


def evaluate(index: EmbeddingIndex, query_ids: Sequence[int], queries: np.ndarray,
             ground_truth: Sequence[int], query_categories: Sequence[int],
             ks: Sequence[int] = (1, 2), provenance: Optional[dict] = None) -> RetrievalReport:
    """Rank every photo for every query and collect recall and error diagnostics.

    Flip confusion is reported as ``None`` when the index carries no mirror map.
    """
    results = retrieve(index, query_ids, queries, ground_truth, query_categories)
    if index.mirror:
        fc_count = flip_confusion_count(results, index)
        fc_rate = fc_count / len(results) if results else 0.0
    else:
        fc_count, fc_rate = None, None
    return RetrievalReport(
        recall={int(k): recall_at_k(results, int(k)) for k in ks},
        flip_confusion_rate=fc_rate,
        flip_confusion_count=fc_count,
        category_mismatch_rate=category_mismatch_rate(results),
        category_mismatch_count=category_mismatch_count(results),
        num_queries=len(results),
        num_photos=len(index),
        results=results,
        provenance=dict(provenance or {}),
    )
