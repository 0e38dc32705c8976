"""
Embedding retrieval, reciprocal rank fusion and lesion-centred ROI crops.

Rankings are 1-based; equal scores are broken by ascending gallery id so every
ranking is deterministic.
"""

from dataclasses import dataclass
import logging
import math
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ValidationError
from ..evaluation.metrics import RECALL_KS, mean_average_precision, recall_at_k

logger = logging.getLogger(__name__)

RRF_K = 60
ROI_SIZES = (32, 64)


def _unit_rows(embs: np.ndarray, what: str) -> np.ndarray:
    embs = np.asarray(embs, dtype=np.float64)
    if embs.ndim != 2:
        raise ValidationError(f"{what} embeddings must be (N, D), got {embs.shape}")
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError(f"{what} embeddings contain a zero vector")
    return embs / norms


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = _unit_rows(queries, "Query")
    g = _unit_rows(gallery, "Gallery")
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"Query width {q.shape[1]} != gallery width {g.shape[1]}")
    return q @ g.T


def retrieve(queries: np.ndarray, gallery: np.ndarray, k: Optional[int] = None,
             query_ids: Optional[Sequence[Hashable]] = None,
             gallery_ids: Optional[Sequence[Hashable]] = None,
             exclude_self: bool = True) -> List[List[Hashable]]:
    """Top-k gallery ids per query by cosine similarity.

    A gallery item sharing its id with the query is skipped when
    ``exclude_self`` is set.

    Raises:
        ValidationError: For an empty gallery
    """
    gallery = np.asarray(gallery)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValidationError("Gallery is empty")
    sim = similarity_matrix(queries, gallery)
    gallery_ids = list(range(sim.shape[1])) if gallery_ids is None else list(gallery_ids)
    query_ids = list(range(sim.shape[0])) if query_ids is None else list(query_ids)
    if len(gallery_ids) != sim.shape[1] or len(query_ids) != sim.shape[0]:
        raise ValidationError("Id lists do not match the embedding counts")
    order_key = np.argsort(np.argsort(np.array(gallery_ids, dtype=object), kind="stable"), kind="stable")
    rankings = []
    for qi, row in enumerate(sim):
        order = np.lexsort((order_key, -row))
        ranked = [gallery_ids[j] for j in order
                  if not (exclude_self and gallery_ids[j] == query_ids[qi])]
        rankings.append(ranked[:k] if k is not None else ranked)
    return rankings


def rrf_scores(rank_lists: Sequence[Sequence[Hashable]], k: int = RRF_K) -> Dict[Hashable, float]:
    """Sum over systems of 1 / (k + rank); items missing from a list contribute nothing."""
    terms: Dict[Hashable, List[float]] = {}
    for ranking in rank_lists:
        if len(set(ranking)) != len(ranking):
            raise ValidationError("A rank list repeats an item")
        for rank, item in enumerate(ranking, start=1):
            terms.setdefault(item, []).append(1.0 / (k + rank))
    # fsum is exactly rounded, so scores do not depend on system order
    return {item: math.fsum(t) for item, t in terms.items()}


def rrf_fuse(rank_lists: Sequence[Sequence[Hashable]], k: int = RRF_K) -> List[Tuple[Hashable, float]]:
    """Fused (id, score) list, highest score first, ties by ascending id."""
    scores = rrf_scores(rank_lists, k)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def multi_scale_retrieve(queries_by_scale: Sequence[np.ndarray], gallery_by_scale: Sequence[np.ndarray],
                         query_ids: Optional[Sequence[Hashable]] = None,
                         gallery_ids: Optional[Sequence[Hashable]] = None,
                         k: int = RRF_K) -> List[List[Hashable]]:
    """Rank the gallery at every ROI scale, then fuse the per-scale rankings with RRF."""
    if len(queries_by_scale) != len(gallery_by_scale) or not queries_by_scale:
        raise ValidationError("Need the same non-zero number of query and gallery scales")
    per_scale = [retrieve(q, g, None, query_ids, gallery_ids)
                 for q, g in zip(queries_by_scale, gallery_by_scale)]
    return [[item for item, _ in rrf_fuse([scale[i] for scale in per_scale], k)]
            for i in range(len(per_scale[0]))]


def extract_roi(volume: np.ndarray, center: Sequence[float], size: int) -> np.ndarray:
    """size^3 cube centred on ``center``; outside voxels take the volume minimum."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or len(center) != 3:
        raise ValidationError("extract_roi works on 3D volumes with a 3D centre")
    if size < 1:
        raise ValidationError(f"ROI size must be >= 1, got {size}")
    out = np.full((size,) * 3, volume.min(), dtype=volume.dtype)
    src, dst = [], []
    for c, n in zip(center, volume.shape):
        start = int(round(c)) - size // 2
        lo, hi = max(start, 0), min(start + size, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = volume[tuple(src)]
    return out


@dataclass(frozen=True)
class RetrievalReport:
    recall: Dict[int, float]
    mean_ap: float

    def to_dict(self) -> dict:
        return {"recall": {f"R@{k}": v for k, v in self.recall.items()}, "mAP": self.mean_ap}


def label_relevance(query_labels: Sequence, gallery_labels: Sequence) -> np.ndarray:
    return np.asarray(query_labels)[:, None] == np.asarray(gallery_labels)[None, :]


def evaluate_rankings(rankings: Sequence[Sequence[Hashable]], query_labels: Sequence,
                      gallery_labels: Dict[Hashable, object],
                      ks: Sequence[int] = RECALL_KS) -> RetrievalReport:
    """Recall@K and mAP of rankings where a hit shares the query's label."""
    if not rankings:
        raise ValidationError("No rankings to evaluate")
    width = max(len(r) for r in rankings)
    if width == 0:
        raise ValidationError("Rankings are empty")
    # rank-derived scores let the shared metrics rank items in list order
    sim = np.full((len(rankings), width), -np.inf)
    rel = np.zeros((len(rankings), width), dtype=bool)
    for i, (ranking, lab) in enumerate(zip(rankings, query_labels)):
        sim[i, :len(ranking)] = -np.arange(len(ranking), dtype=np.float64)
        rel[i, :len(ranking)] = [gallery_labels[g] == lab for g in ranking]
    recall = {int(k): recall_at_k(sim, rel, k) for k in ks}
    return RetrievalReport(recall, mean_average_precision(sim, rel))
