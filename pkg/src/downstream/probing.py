"""
Linear probing and discriminant-axis phenotype analysis on frozen embeddings.
"""

from dataclasses import dataclass, field
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.decomposition import PCA
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import (average_precision_score, balanced_accuracy_score, f1_score,
                             roc_auc_score, silhouette_score)
from sklearn.model_selection import GridSearchCV, RepeatedStratifiedKFold, StratifiedKFold
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler, label_binarize

from ..core.errors import ValidationError
from ..evaluation.stats import CIResult, bca_bootstrap

logger = logging.getLogger(__name__)

C_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2)
PCA_COMPONENT_RANGE = (16, 30)
RESIDUAL_STD_EPS = 1e-10


@dataclass
class ProbeConfig:
    c_grid: Tuple[float, ...] = C_GRID
    class_weight: str = "balanced"
    max_iter: int = 20_000
    n_splits: int = 5
    n_repeats: int = 3
    inner_splits: int = 3
    seed: int = 0

    def validate(self) -> None:
        if len(self.c_grid) != 7 or any(c <= 0 for c in self.c_grid):
            raise ValidationError(f"C grid must hold seven positive values, got {self.c_grid}")
        if self.n_splits < 2 or self.n_repeats < 1 or self.inner_splits < 2:
            raise ValidationError("n_splits and inner_splits must be >= 2, n_repeats >= 1")


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    lower: float
    upper: float
    values: Tuple[float, ...]

    @classmethod
    def of(cls, values: Sequence[float]) -> 'MetricSummary':
        arr = np.asarray(values, dtype=np.float64)
        lo, hi = np.percentile(arr, [2.5, 97.5])
        return cls(float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                   float(lo), float(hi), tuple(float(v) for v in arr))


@dataclass
class ProbeResult:
    metrics: Dict[str, MetricSummary]
    chosen_c: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": {k: {"mean": m.mean, "std": m.std, "ci95": [m.lower, m.upper]}
                        for k, m in self.metrics.items()},
            "chosen_c": self.chosen_c,
        }


def _check_labels(labels: np.ndarray, min_per_class: int) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValidationError("Probing needs at least two classes")
    if counts.min() < min_per_class:
        raise ValidationError(
            f"Stratified {min_per_class}-fold split impossible: class {classes[counts.argmin()]!r} "
            f"has {counts.min()} samples")
    return classes


def stratified_folds(labels: Sequence, cfg: ProbeConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    labels = np.asarray(labels)
    _check_labels(labels, cfg.n_splits)
    splitter = RepeatedStratifiedKFold(n_splits=cfg.n_splits, n_repeats=cfg.n_repeats,
                                       random_state=cfg.seed)
    return list(splitter.split(np.zeros((labels.size, 1)), labels))


def _probe_pipeline(cfg: ProbeConfig) -> Pipeline:
    return Pipeline([
        ("scale", StandardScaler()),
        ("clf", LogisticRegression(class_weight=cfg.class_weight, max_iter=cfg.max_iter)),
    ])


def _fold_metrics(y: np.ndarray, proba: np.ndarray, classes: np.ndarray) -> Dict[str, float]:
    pred = classes[proba.argmax(axis=1)]
    if classes.size == 2:
        auc = roc_auc_score(y, proba[:, 1])
        pr_auc = average_precision_score(y == classes[1], proba[:, 1])
    else:
        auc = roc_auc_score(y, proba, multi_class="ovr", average="macro", labels=classes)
        pr_auc = average_precision_score(label_binarize(y, classes=classes), proba, average="macro")
    return {
        "balanced_accuracy": float(balanced_accuracy_score(y, pred)),
        "macro_f1": float(f1_score(y, pred, average="macro")),
        "macro_auc": float(auc),
        "macro_pr_auc": float(pr_auc),
    }


def linear_probe(features: np.ndarray, labels: Sequence, cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """Standardize, grid-search C on the training folds, fit, score the held-out fold.

    Raises:
        ValidationError: With fewer than two classes or too few samples per class to stratify
    """
    cfg = cfg or ProbeConfig()
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValidationError(f"Features {x.shape} do not match {y.size} labels")
    classes = _check_labels(y, cfg.n_splits)

    per_fold: Dict[str, List[float]] = {}
    chosen = []
    for fold, (train, test) in enumerate(stratified_folds(y, cfg)):
        inner = StratifiedKFold(n_splits=min(cfg.inner_splits, int(np.unique(y[train], return_counts=True)[1].min())),
                                shuffle=True, random_state=cfg.seed + fold)
        search = GridSearchCV(_probe_pipeline(cfg), {"clf__C": list(cfg.c_grid)}, cv=inner,
                              scoring="balanced_accuracy")
        search.fit(x[train], y[train])
        chosen.append(float(search.best_params_["clf__C"]))
        for name, value in _fold_metrics(y[test], search.predict_proba(x[test]), classes).items():
            per_fold.setdefault(name, []).append(value)
    logger.info("Linear probe: %d folds, balanced accuracy %.3f", len(chosen),
                float(np.mean(per_fold["balanced_accuracy"])))
    return ProbeResult({k: MetricSummary.of(v) for k, v in per_fold.items()}, chosen)


@dataclass
class PhenotypeConfig:
    pca_components: Optional[int] = None
    n_permutations: int = 10_000
    n_strata: int = 10
    n_bootstrap: int = 1_000
    seed: int = 0


@dataclass
class PhenotypeResult:
    projection: np.ndarray
    silhouette: float
    scatter_ratio: float
    covariate_rho: float
    label_rho: float
    residual_projection: np.ndarray
    residual_label_rho: float
    residual_rho_ci: Optional[CIResult]
    permutation_p: float
    pca_components: Optional[int]
    pca_fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "silhouette": self.silhouette,
            "scatter_ratio": self.scatter_ratio,
            "covariate_rho": self.covariate_rho,
            "label_rho": self.label_rho,
            "residual_label_rho": self.residual_label_rho,
            "residual_rho_ci": None if self.residual_rho_ci is None else self.residual_rho_ci.to_dict(),
            "permutation_p": self.permutation_p,
            "pca_components": self.pca_components,
            "pca_fallback": self.pca_fallback,
        }


def scatter_ratio(z: np.ndarray, labels: np.ndarray) -> float:
    """trace(between-class scatter) / trace(within-class scatter)."""
    mu = z.mean(axis=0)
    between = within = 0.0
    for c in np.unique(labels):
        zc = z[labels == c]
        between += len(zc) * float(np.sum((zc.mean(axis=0) - mu) ** 2))
        within += float(np.sum((zc - zc.mean(axis=0)) ** 2))
    return between / within if within > 0 else float("inf")


def _within_rank(x: np.ndarray, labels: np.ndarray) -> int:
    centred = np.concatenate([x[labels == c] - x[labels == c].mean(axis=0) for c in np.unique(labels)])
    return int(np.linalg.matrix_rank(centred))


def _reduce(x: np.ndarray, labels: np.ndarray, cfg: PhenotypeConfig) -> Tuple[np.ndarray, Optional[int], bool]:
    """Optional PCA whitening; forced when the within-class scatter is singular."""
    n_comp, fallback = cfg.pca_components, False
    rank = _within_rank(x, labels)
    if n_comp is None and rank < x.shape[1]:
        n_comp, fallback = min(PCA_COMPONENT_RANGE[1], rank), True
        logger.warning("Within-class scatter is singular (rank %d < %d); whitening with %d PCA components",
                       rank, x.shape[1], n_comp)
    if n_comp is None:
        return x, None, False
    if n_comp < 1:
        raise ValidationError("Within-class scatter has rank 0; features carry no variation")
    n_comp = min(n_comp, rank, x.shape[1])
    return PCA(n_components=n_comp, whiten=True, random_state=cfg.seed).fit_transform(x), n_comp, fallback


def _lda(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n_comp = min(2, len(np.unique(labels)) - 1)
    return LinearDiscriminantAnalysis(n_components=n_comp).fit_transform(x, labels)


def residualize(z: np.ndarray, covariate: np.ndarray) -> np.ndarray:
    """Residuals of each column of ``z`` after OLS on [1, covariate]."""
    design = np.column_stack((np.ones_like(covariate), covariate))
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    return z - design @ coef


def _rho(a: np.ndarray, b: np.ndarray) -> float:
    if np.std(a) < RESIDUAL_STD_EPS or np.std(b) == 0:
        return 0.0
    return float(spearmanr(a, b)[0])


def decile_strata(covariate: np.ndarray, n_strata: int) -> np.ndarray:
    return np.asarray(pd.qcut(covariate, n_strata, labels=False, duplicates="drop"))


def size_matched_permutation_test(x: np.ndarray, labels: np.ndarray, covariate: np.ndarray,
                                  n_permutations: int, n_strata: int, seed: int) -> float:
    """Shuffle labels inside covariate strata, refit LDA, compare scatter ratios."""
    observed = scatter_ratio(_lda(x, labels), labels)
    strata = decile_strata(covariate, n_strata)
    groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    rng = np.random.default_rng(seed)
    count = 0
    permuted = labels.copy()
    for _ in range(n_permutations):
        for g in groups:
            permuted[g] = labels[rng.permutation(g)]
        if len(np.unique(permuted)) < 2:
            continue
        if scatter_ratio(_lda(x, permuted), permuted) >= observed:
            count += 1
    return (1 + count) / (n_permutations + 1)


def lda_phenotype(features: np.ndarray, labels: Sequence, covariate: Sequence[float],
                  cfg: Optional[PhenotypeConfig] = None) -> PhenotypeResult:
    """LDA projection with separability, covariate gradients and a size-matched test.

    ``labels`` are ordinal class codes (e.g. grades); ``covariate`` is the
    nuisance variable (e.g. tumour diameter) regressed out of the discriminant
    axes before the residual gradient is measured.
    """
    cfg = cfg or PhenotypeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    cov = np.asarray(covariate, dtype=np.float64)
    if x.ndim != 2 or not x.shape[0] == y.size == cov.size:
        raise ValidationError(f"Features {x.shape}, {y.size} labels and {cov.size} covariates disagree")
    if len(np.unique(y)) < 2:
        raise ValidationError("LDA needs at least two classes")
    if cfg.pca_components is not None and not PCA_COMPONENT_RANGE[0] <= cfg.pca_components <= PCA_COMPONENT_RANGE[1]:
        logger.warning("PCA whitening with %d components is outside the usual %d-%d range",
                       cfg.pca_components, *PCA_COMPONENT_RANGE)

    reduced, n_comp, fallback = _reduce(x, y, cfg)
    z = _lda(reduced, y)
    resid = residualize(z, cov)
    label_codes = y.astype(np.float64) if np.issubdtype(y.dtype, np.number) else np.unique(y, return_inverse=True)[1]

    ci = None
    if cfg.n_bootstrap > 0 and np.std(resid[:, 0]) >= RESIDUAL_STD_EPS:
        ci = bca_bootstrap(np.column_stack((resid[:, 0], label_codes)),
                           lambda rows: _rho(rows[:, 0], rows[:, 1]), n=cfg.n_bootstrap, seed=cfg.seed)

    return PhenotypeResult(
        projection=z,
        silhouette=float(silhouette_score(z, y)),
        scatter_ratio=scatter_ratio(z, y),
        covariate_rho=_rho(z[:, 0], cov),
        label_rho=_rho(z[:, 0], label_codes),
        residual_projection=resid,
        residual_label_rho=_rho(resid[:, 0], label_codes),
        residual_rho_ci=ci,
        permutation_p=size_matched_permutation_test(reduced, y, cov, cfg.n_permutations,
                                                    cfg.n_strata, cfg.seed),
        pca_components=n_comp,
        pca_fallback=fallback,
    )
