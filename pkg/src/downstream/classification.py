"""
Linear classification on cached frozen features.

Single-vector samples go straight into one linear layer; multi-slice samples
(S, F) are first pooled by a single-head attention module with one learned
query.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score, roc_auc_score
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)

FeatureSet = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass
class ClassifierConfig:
    base_lr: float = 0.002
    batch_size: int = 64
    epochs: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 20

    @property
    def lr(self) -> float:
        return scaled_lr(self.base_lr, self.batch_size)


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: base * B / 256."""
    return base_lr * batch_size / 256


class AttentionPool(nn.Module):
    """Single-head attention of one learned query over a set of slice features."""

    def __init__(self, dim: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(1, 1, dim))
        self.attn = nn.MultiheadAttention(dim, num_heads=1, batch_first=True)
        nn.init.normal_(self.query, std=0.02)

    def forward(self, x: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        q = self.query.expand(x.shape[0], -1, -1)
        out, _ = self.attn(q, x, x, key_padding_mask=padding, need_weights=False)
        return out[:, 0]


class LinearClassifier(nn.Module):
    def __init__(self, dim: int, n_classes: int, pooled: bool = False):
        super().__init__()
        self.pool = AttentionPool(dim) if pooled else None
        self.linear = nn.Linear(dim, n_classes)

    def forward(self, x: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.pool is not None:
            x = self.pool(x, padding)
        return self.linear(x)


def pack_features(features: FeatureSet) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """(N, F) matrix, or (N, S_max, F) with a True-means-padding mask for slice sets."""
    if isinstance(features, np.ndarray) and features.ndim == 2:
        return torch.from_numpy(features.astype(np.float32)), None
    items = [np.asarray(f, dtype=np.float32) for f in features]
    if not items:
        raise ValidationError("No features")
    if all(f.ndim == 1 for f in items):
        return torch.from_numpy(np.stack(items)), None
    items = [f if f.ndim == 2 else f[None] for f in items]
    dims = {f.shape[1] for f in items}
    if len(dims) != 1:
        raise ValidationError(f"Slice features disagree on width: {sorted(dims)}")
    s_max = max(f.shape[0] for f in items)
    x = np.zeros((len(items), s_max, dims.pop()), dtype=np.float32)
    padding = np.ones((len(items), s_max), dtype=bool)
    for i, f in enumerate(items):
        x[i, :len(f)] = f
        padding[i, :len(f)] = False
    return torch.from_numpy(x), torch.from_numpy(padding)


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> Dict[str, object]:
    """AUC (one-vs-rest macro for >2 classes), accuracy, weighted precision/F1, per-class accuracy."""
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    classes = np.arange(probs.shape[1])
    if len(np.unique(labels)) < 2:
        auc = float("nan")
    elif probs.shape[1] == 2:
        auc = float(roc_auc_score(labels, probs[:, 1]))
    else:
        auc = float(roc_auc_score(labels, probs, multi_class="ovr", average="macro", labels=classes))
    per_class = recall_score(labels, pred, labels=classes, average=None, zero_division=0)
    return {
        "auc": auc,
        "accuracy": float(accuracy_score(labels, pred)),
        "precision_weighted": float(precision_score(labels, pred, average="weighted", zero_division=0)),
        "f1_weighted": float(f1_score(labels, pred, average="weighted", zero_division=0)),
        "per_class_accuracy": [float(v) for v in per_class],
    }


@dataclass
class ClassificationResult:
    model: LinearClassifier
    metrics: Dict[str, object]
    history: List[float] = field(default_factory=list)


@torch.no_grad()
def predict_proba(model: LinearClassifier, features: FeatureSet) -> np.ndarray:
    x, padding = pack_features(features)
    return model.eval()(x, padding).softmax(dim=1).numpy()


def linear_classify(features: FeatureSet, labels: Sequence[int], cfg: ClassifierConfig,
                    test_features: Optional[FeatureSet] = None,
                    test_labels: Optional[Sequence[int]] = None) -> ClassificationResult:
    """Train the linear head with SGD + cosine annealing and report metrics.

    Metrics are computed on the test split when given, otherwise on the
    training features.

    Raises:
        ValidationError: If the labels hold a single class
    """
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValidationError("Classification needs at least two classes")
    x, padding = pack_features(features)
    if x.shape[0] != y.size:
        raise ValidationError(f"{x.shape[0]} samples for {y.size} labels")
    n_classes = int(y.max()) + 1

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = LinearClassifier(x.shape[-1], n_classes, pooled=padding is not None)
    steps_per_epoch = math.ceil(y.size / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total)
    target = torch.from_numpy(y)

    history = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(y.size)
        epoch_loss = 0.0
        for start in range(0, y.size, cfg.batch_size):
            idx = torch.from_numpy(perm[start:start + cfg.batch_size])
            logits = model(x[idx], None if padding is None else padding[idx])
            loss = F.cross_entropy(logits, target[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"Classifier loss diverged in epoch {epoch}", epoch, {"ce": float(loss)})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss) * len(idx)
        history.append(epoch_loss / y.size)
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            logger.info("[classify] epoch %d/%d loss=%.4f", epoch + 1, cfg.epochs, history[-1])

    if test_features is not None:
        eval_x, eval_y = test_features, np.asarray(test_labels, dtype=np.int64)
    else:
        eval_x, eval_y = features, y
    probs = predict_proba(model, eval_x)
    return ClassificationResult(model, classification_metrics(probs, eval_y), history)
