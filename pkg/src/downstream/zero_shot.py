"""Zero-shot classification with positive/negative prompt pairs and ROC thresholds."""

from dataclasses import dataclass
import logging
from typing import Callable, List, Sequence, Union

import numpy as np
from sklearn.metrics import roc_curve
import torch

from ..core.errors import ValidationError

logger = logging.getLogger(__name__)

TextEncodeFn = Callable[[List[str]], torch.Tensor]


@dataclass(frozen=True)
class PromptPair:
    class_name: str

    @property
    def positive(self) -> str:
        return f"{self.class_name.strip().lower()}."

    @property
    def negative(self) -> str:
        return f"No {self.class_name.strip().lower()}."


def load_class_names(path) -> List[str]:
    """One class name per non-empty line."""
    with open(path, "r", encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if not names:
        raise ValidationError(f"No class names in {path}")
    return names


def zero_shot_classify(volume_embs: Union[torch.Tensor, np.ndarray], class_names: Sequence[str],
                       encode_text: TextEncodeFn, tau: float) -> np.ndarray:
    """Per-class probability softmax(tau * [sim_pos, sim_neg])[0] as a (B, C) array.

    ``volume_embs`` is (D,) or (B, D) and unit-normalized; ``encode_text``
    returns unit-normalized prompt embeddings.
    """
    if not class_names:
        raise ValidationError("No class names")
    emb = torch.as_tensor(volume_embs).to(torch.float64)
    if emb.ndim == 1:
        emb = emb[None]
    pairs = [PromptPair(name) for name in class_names]
    with torch.no_grad():
        pos = encode_text([p.positive for p in pairs]).to(torch.float64)
        neg = encode_text([p.negative for p in pairs]).to(torch.float64)
        sims = torch.stack((emb @ pos.T, emb @ neg.T), dim=-1)
        probs = (float(tau) * sims).softmax(dim=-1)[..., 0]
    return probs.numpy()


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    distance: float
    tpr: float
    fpr: float


def threshold_select(probs: Sequence[float], labels: Sequence[int]) -> ThresholdChoice:
    """Operating point closest to the ROC corner (FPR 0, TPR 1); ties take the lower threshold.

    Raises:
        ValidationError: If the labels hold only one class
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if len(np.unique(labels)) < 2:
        raise ValidationError("Threshold selection needs both classes")
    fpr, tpr, thresholds = roc_curve(labels, probs, drop_intermediate=False)
    finite = np.isfinite(thresholds) & (thresholds <= probs.max())
    fpr, tpr, thresholds = fpr[finite], tpr[finite], thresholds[finite]
    dist = np.sqrt((1.0 - tpr) ** 2 + fpr ** 2)
    best = np.flatnonzero(np.isclose(dist, dist.min(), rtol=0.0, atol=1e-12))
    i = best[np.argmin(thresholds[best])]
    return ThresholdChoice(float(thresholds[i]), float(dist[i]), float(tpr[i]), float(fpr[i]))


def select_thresholds(probs: np.ndarray, labels: np.ndarray) -> List[ThresholdChoice]:
    """threshold_select for every column of (N, C) probabilities and binary labels."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValidationError(f"Probabilities {probs.shape} and labels {labels.shape} must be (N, C)")
    return [threshold_select(probs[:, c], labels[:, c]) for c in range(probs.shape[1])]


def apply_thresholds(probs: np.ndarray, choices: Sequence[ThresholdChoice]) -> np.ndarray:
    cut = np.array([c.threshold for c in choices])
    return (np.asarray(probs) >= cut).astype(np.int64)
