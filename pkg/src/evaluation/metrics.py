"""
Overlap, surface-distance, ranking and retrieval metrics.

Surface points are the centres of the voxel faces separating a mask from its
complement (grid borders count as complement), scaled by the voxel spacing.
"""

from dataclasses import dataclass
import logging
import math
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from ..core.errors import ValidationError

logger = logging.getLogger(__name__)

SDC_TOLERANCE_MM = 2.0
RECALL_KS = (1, 3, 5, 10)
POOL_SIZES = (32, 64, 128)
POOL_KS = (1, 8)


def _pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValidationError(f"Mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _spacing(spacing: Optional[Sequence[float]], ndim: int) -> np.ndarray:
    if spacing is None:
        return np.ones(ndim)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (ndim,) or np.any(spacing <= 0):
        raise ValidationError(f"Spacing must be {ndim} positive values, got {spacing.tolist()}")
    return spacing


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_points(mask: np.ndarray, spacing: Optional[Sequence[float]] = None) -> np.ndarray:
    """Physical coordinates (n, ndim) of the boundary faces of ``mask``."""
    mask = np.asarray(mask).astype(bool)
    scale = _spacing(spacing, mask.ndim)
    padded = np.pad(mask, 1)
    points = []
    for axis in range(mask.ndim):
        n = padded.shape[axis]
        lo = np.take(padded, np.arange(n - 1), axis=axis)
        hi = np.take(padded, np.arange(1, n), axis=axis)
        idx = np.argwhere(lo ^ hi).astype(np.float64)
        idx[:, axis] += 0.5
        points.append(idx - 1.0)
    return np.concatenate(points, axis=0) * scale


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def surface_dice(a: np.ndarray, b: np.ndarray, spacing: Optional[Sequence[float]] = None,
                 tolerance_mm: float = SDC_TOLERANCE_MM) -> float:
    """Share of both boundaries lying within ``tolerance_mm`` of the other one."""
    a, b = _pair(a, b)
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    pa, pb = surface_points(a, spacing), surface_points(b, spacing)
    d_ab = _directed_distances(pa, pb)
    d_ba = _directed_distances(pb, pa)
    hits = int((d_ab <= tolerance_mm).sum()) + int((d_ba <= tolerance_mm).sum())
    return hits / (len(pa) + len(pb))


def hd95(a: np.ndarray, b: np.ndarray, spacing: Optional[Sequence[float]] = None) -> float:
    """Symmetric 95th-percentile Hausdorff distance.

    Returns 0.0 when both masks are empty and ``inf`` when exactly one is.
    """
    a, b = _pair(a, b)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return math.inf
    pa, pb = surface_points(a, spacing), surface_points(b, spacing)
    return float(max(np.percentile(_directed_distances(pa, pb), 95),
                     np.percentile(_directed_distances(pb, pa), 95)))


def finite_mean(values: Iterable[float]) -> Tuple[float, int]:
    """Mean over finite values and the number of infinite sentinels left out."""
    values = np.asarray(list(values), dtype=np.float64)
    finite = np.isfinite(values)
    n_inf = int((~finite).sum())
    if n_inf:
        logger.warning("Excluded %d infinite HD95 values from the mean", n_inf)
    return (float(values[finite].mean()) if finite.any() else math.nan), n_inf


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC through the Mann-Whitney rank statistic with midrank ties.

    Raises:
        ValidationError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _ranking(similarity: np.ndarray) -> np.ndarray:
    # stable: equal scores keep gallery order
    return np.argsort(-similarity, axis=1, kind="stable")


def _check_retrieval(similarity: np.ndarray, relevance: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    similarity = np.asarray(similarity, dtype=np.float64)
    relevance = np.asarray(relevance).astype(bool)
    if similarity.ndim != 2 or similarity.shape != relevance.shape:
        raise ValidationError(f"Similarity {similarity.shape} and relevance {relevance.shape} must match")
    if similarity.shape[1] == 0:
        raise ValidationError("Gallery is empty")
    return similarity, relevance


def recall_at_k(similarity: np.ndarray, relevance: np.ndarray, k: int) -> float:
    """Share of queries with at least one relevant item in their top ``k``."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    similarity, relevance = _check_retrieval(similarity, relevance)
    if similarity.shape[0] == 0:
        raise ValidationError("No queries")
    top = _ranking(similarity)[:, :k]
    hits = np.take_along_axis(relevance, top, axis=1).any(axis=1)
    return float(hits.mean())


def mean_average_precision(similarity: np.ndarray, relevance: np.ndarray) -> float:
    """Mean AP over the queries that have at least one relevant item."""
    similarity, relevance = _check_retrieval(similarity, relevance)
    ranked = np.take_along_axis(relevance, _ranking(similarity), axis=1)
    aps = []
    for row in ranked:
        n_rel = int(row.sum())
        if n_rel == 0:
            continue
        hits = np.cumsum(row)
        positions = np.arange(1, row.size + 1)
        aps.append(float((hits[row] / positions[row]).sum() / n_rel))
    if not aps:
        raise ValidationError("No query has a relevant gallery item")
    return float(np.mean(aps))


@dataclass(frozen=True)
class PooledRecall:
    pool_size: int
    k: int
    direction: str
    macro: float
    micro: float
    n_pools: int


def pool_partition(n: int, pool_size: int) -> list:
    """Consecutive non-overlapping pools; a shorter remainder pool is kept."""
    if pool_size < 1:
        raise ValidationError(f"Pool size must be >= 1, got {pool_size}")
    return [np.arange(s, min(s + pool_size, n)) for s in range(0, n, pool_size)]


def pooled_recall(image_embs: np.ndarray, text_embs: np.ndarray,
                  pool_sizes: Sequence[int] = POOL_SIZES,
                  ks: Sequence[int] = POOL_KS) -> Dict[str, PooledRecall]:
    """Paired image/text recall inside non-overlapping pools, both directions.

    Row i of ``image_embs`` matches row i of ``text_embs``. Keys look like
    ``"i2t@32/R1"``.
    """
    image_embs = np.asarray(image_embs, dtype=np.float64)
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if image_embs.shape != text_embs.shape or image_embs.ndim != 2:
        raise ValidationError(f"Embedding shapes differ: {image_embs.shape} vs {text_embs.shape}")
    if image_embs.shape[0] == 0:
        raise ValidationError("No samples to pool")
    results: Dict[str, PooledRecall] = {}
    for n in pool_sizes:
        pools = pool_partition(image_embs.shape[0], n)
        for direction in ("i2t", "t2i"):
            for k in ks:
                per_pool, hits = [], 0
                for idx in pools:
                    sim = image_embs[idx] @ text_embs[idx].T
                    if direction == "t2i":
                        sim = sim.T
                    r = recall_at_k(sim, np.eye(len(idx), dtype=bool), k)
                    per_pool.append(r)
                    hits += int(round(r * len(idx)))
                results[f"{direction}@{n}/R{k}"] = PooledRecall(
                    pool_size=n, k=k, direction=direction, macro=float(np.mean(per_pool)),
                    micro=hits / image_embs.shape[0], n_pools=len(pools))
    return results
