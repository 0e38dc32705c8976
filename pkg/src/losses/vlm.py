"""Contrastive, opposite-sentence and combined Phase-3 objectives."""

from typing import Callable, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from ..core.errors import ValidationError
from ..text.osl_pairs import OSLPairSet
from .ssl import LossWeights

EncodeFn = Callable[[List[str]], torch.Tensor]


def clip_loss(vision: torch.Tensor, text: torch.Tensor, scale: Union[float, torch.Tensor]) -> torch.Tensor:
    """Symmetric in-batch cross-entropy over ``scale * V T^T`` with diagonal targets.

    Raises:
        ValidationError: Empty batch or mismatched shapes
    """
    if vision.shape[0] == 0:
        raise ValidationError("clip_loss needs a non-empty batch")
    if vision.shape != text.shape:
        raise ValidationError(f"Vision {tuple(vision.shape)} and text {tuple(text.shape)} differ")
    logits = scale * vision @ text.t()
    labels = torch.arange(vision.shape[0], device=vision.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def osl_loss_from_embeddings(vision: torch.Tensor, t_pos: torch.Tensor, t_neg: torch.Tensor,
                             y: torch.Tensor, valid: torch.Tensor,
                             scale: Union[float, torch.Tensor]) -> torch.Tensor:
    """Binary selection between a finding and its negation, averaged over valid pairs.

    Args:
        vision: (B, D) unit image embeddings
        t_pos, t_neg: (B, K, D) unit text embeddings of s+ and s-
        y: (B, K) 1 when s+ is true for the sample
        valid: (B, K) boolean; invalid entries are ignored
        scale: logit scale multiplying the similarity difference
    """
    valid = valid.to(torch.bool)
    if not bool(valid.any()):
        return vision.sum() * 0.0
    margin = scale * torch.einsum("bd,bkd->bk", vision, t_pos - t_neg)
    y = y.to(margin.dtype)
    nll = -(y * F.logsigmoid(margin) + (1 - y) * F.logsigmoid(-margin))
    return nll[valid].mean()


def osl_loss(vision: torch.Tensor, pairs: Union[OSLPairSet, Sequence[OSLPairSet]],
             encode_fn: EncodeFn, scale: Union[float, torch.Tensor]) -> torch.Tensor:
    """Opposite-sentence loss for one embedding (D,) or a batch (B, D).

    ``encode_fn`` maps a list of texts to unit embeddings (n, D); only valid
    pairs are encoded.
    """
    if vision.ndim == 1:
        vision = vision[None]
    if isinstance(pairs, OSLPairSet):
        pairs = [pairs]
    if len(pairs) != vision.shape[0]:
        raise ValidationError(f"{len(pairs)} pair sets for {vision.shape[0]} embeddings")
    b, k, d = vision.shape[0], len(pairs[0].pairs), vision.shape[1]
    valid = torch.tensor([[p.valid for p in s.pairs] for s in pairs], dtype=torch.bool)
    y = torch.tensor([[p.y for p in s.pairs] for s in pairs], dtype=vision.dtype)
    if not bool(valid.any()):
        return vision.sum() * 0.0
    flat = [p for s in pairs for p in s.pairs if p.valid]
    enc_pos = encode_fn([p.s_plus for p in flat]).to(vision.dtype)
    enc_neg = encode_fn([p.s_minus for p in flat]).to(vision.dtype)
    t_pos = vision.new_zeros(b, k, d)
    t_neg = vision.new_zeros(b, k, d)
    t_pos[valid] = enc_pos
    t_neg[valid] = enc_neg
    return osl_loss_from_embeddings(vision, t_pos, t_neg, y.to(vision.device),
                                    valid.to(vision.device), scale)


def phase3_loss(ibot: torch.Tensor, clip: torch.Tensor, osl: torch.Tensor,
                weights: Optional[LossWeights] = None) -> torch.Tensor:
    """lambda_ibot * ibot + lambda_clip * clip + lambda_osl * osl (1.0, 1.0, 0.5 by default)."""
    w = weights or LossWeights.preset("phase3")
    return w.ibot * ibot + w.clip * clip + w.osl * osl
