"""
Teacher-student objectives: DINO with Sinkhorn-Knopp centering, iBOT masked
patch prediction, the KoLeo spreading regularizer, Gram anchoring and the
EMA teacher update.
"""

from dataclasses import asdict, dataclass
import logging
from typing import Dict, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)

STUDENT_TEMP = 0.1
SINKHORN_ITERATIONS = 3
KOLEO_EPS = 1e-8


@dataclass
class LossWeights:
    dino: float = 1.0
    ibot: float = 1.0
    koleo: float = 0.1
    gram: float = 0.0
    clip: float = 0.0
    osl: float = 0.0

    @classmethod
    def preset(cls, phase: str) -> 'LossWeights':
        presets = {
            "phase1": cls(),
            "phase1hr": cls(gram=1.5),
            "phase2": cls(dino=0.5),
            "phase3": cls(dino=0.0, ibot=1.0, koleo=0.0, gram=0.0, clip=1.0, osl=0.5),
        }
        try:
            return presets[phase]
        except KeyError:
            raise ValidationError(f"Unknown loss-weight preset: {phase!r}") from None

    def validate(self) -> None:
        bad = {k: v for k, v in asdict(self).items() if v < 0}
        if bad:
            raise ValidationError(f"Loss weights must be non-negative: {bad}")

    def combine(self, components: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Weighted sum of the components present; zero-weight terms are skipped."""
        total = None
        for name, value in components.items():
            w = getattr(self, name)
            if w == 0:
                continue
            total = w * value if total is None else total + w * value
        if total is None:
            ref = next(iter(components.values()), None)
            return ref.sum() * 0.0 if ref is not None else torch.zeros(())
        return total


@torch.no_grad()
def sinkhorn_normalize(teacher_logits: torch.Tensor, teacher_temp: float,
                       iterations: int = SINKHORN_ITERATIONS) -> torch.Tensor:
    """Soft assignments (B, K) whose rows sum to 1 and columns to B/K at convergence.

    Raises:
        ValidationError: Empty input, NaN/+inf logits, or a row that is entirely -inf
    """
    if teacher_logits.ndim != 2 or 0 in teacher_logits.shape:
        raise ValidationError(f"Teacher logits must be (B, K) with B, K >= 1, got {tuple(teacher_logits.shape)}")
    if torch.isnan(teacher_logits).any() or torch.isposinf(teacher_logits).any():
        raise ValidationError("Teacher logits contain NaN or +inf")
    if torch.isneginf(teacher_logits).all(dim=1).any():
        raise ValidationError("A teacher row is entirely -inf")
    scaled = teacher_logits / teacher_temp
    # per-sample shift; the sample-wise step below cancels any per-sample scale
    q = torch.exp(scaled - scaled.max(dim=1, keepdim=True).values).t()  # (K, B)
    k, b = q.shape
    tiny = torch.finfo(q.dtype).tiny
    q = q / q.sum()
    for _ in range(iterations):
        q = q / q.sum(dim=1, keepdim=True).clamp_min(tiny) / k
        q = q / q.sum(dim=0, keepdim=True).clamp_min(tiny) / b
    return (q * b).t()


def _cross_entropy(target: torch.Tensor, student_logits: torch.Tensor, student_temp: float) -> torch.Tensor:
    """-sum(t * log_softmax(s / tau)) over the last axis."""
    return -(target * F.log_softmax(student_logits / student_temp, dim=-1)).sum(dim=-1)


def dino_loss(student_logits: Sequence[torch.Tensor], teacher_probs: Sequence[torch.Tensor],
              student_temp: float = STUDENT_TEMP) -> torch.Tensor:
    """Mean cross-entropy over (teacher view i, student view j != i) pairs.

    Teacher view i corresponds to student view i (global crops come first).

    Raises:
        ValidationError: Prototype dimensions differ or no cross-view pair exists
    """
    dims = {t.shape[-1] for t in teacher_probs} | {s.shape[-1] for s in student_logits}
    if len(dims) > 1:
        raise ValidationError(f"Mismatched prototype dimensions: {sorted(dims)}")
    terms = [_cross_entropy(t, s, student_temp).mean()
             for i, t in enumerate(teacher_probs)
             for j, s in enumerate(student_logits) if i != j]
    if not terms:
        raise ValidationError("dino_loss needs at least one cross-view pair")
    return torch.stack(terms).mean()


def ibot_loss(student_patch_logits: torch.Tensor, teacher_patch_probs: torch.Tensor,
              mask: torch.Tensor, student_temp: float = STUDENT_TEMP) -> torch.Tensor:
    """Cross-entropy over masked tokens only; 0 for an empty mask.

    Args:
        student_patch_logits: (B, N, K) from the masked student input
        teacher_patch_probs: (B, N, K) from the unmasked teacher input
        mask: (B, N) or any shape with B*N booleans
    """
    if student_patch_logits.shape != teacher_patch_probs.shape:
        raise ValidationError(
            f"Student {tuple(student_patch_logits.shape)} and teacher "
            f"{tuple(teacher_patch_probs.shape)} patch outputs differ")
    mask = mask.reshape(student_patch_logits.shape[:-1]).to(torch.bool)
    n = int(mask.sum())
    if n == 0:
        return student_patch_logits.sum() * 0.0
    ce = _cross_entropy(teacher_patch_probs, student_patch_logits, student_temp)
    return ce[mask].sum() / n


def koleo_loss(features: torch.Tensor, eps: float = KOLEO_EPS) -> torch.Tensor:
    """-(1/n) sum_i log(eps + min_{j != i} ||x_i - x_j||) on L2-normalized rows; 0 when n < 2."""
    n = features.shape[0]
    if n < 2:
        return features.sum() * 0.0
    x = F.normalize(features, dim=-1, eps=1e-8)
    with torch.no_grad():
        dots = x @ x.t()
        dots.fill_diagonal_(-3.0)
        nn_idx = dots.argmax(dim=1)
    sq = ((x - x[nn_idx]) ** 2).sum(dim=-1)
    positive = sq > 0
    dist = torch.where(positive, sq.clamp_min(torch.finfo(sq.dtype).tiny).sqrt(), torch.zeros_like(sq))
    return -torch.log(eps + dist).mean()


def _match_tokens(reference: torch.Tensor, reference_grid: Optional[Sequence[int]],
                  student_grid: Optional[Sequence[int]]) -> torch.Tensor:
    if reference_grid is None or student_grid is None:
        raise ValidationError("Token counts differ; both patch grids are needed to resize the reference")
    b, _, d = reference.shape
    grid = reference.transpose(1, 2).reshape(b, d, *reference_grid)
    mode = "bilinear" if len(reference_grid) == 2 else "trilinear"
    grid = F.interpolate(grid, size=tuple(student_grid), mode=mode, align_corners=False)
    return grid.flatten(2).transpose(1, 2)


def gram_loss(student: torch.Tensor, reference: torch.Tensor,
              student_grid: Optional[Sequence[int]] = None,
              reference_grid: Optional[Sequence[int]] = None) -> torch.Tensor:
    """||G_s - G_r||_F^2 / N^2 with G = F F^T of row-normalized patch features, batch mean.

    A reference on a different patch grid is resized to the student grid by
    linear interpolation first.
    """
    if student.ndim == 2:
        student, reference = student[None], reference[None]
    if reference.shape[1] != student.shape[1]:
        reference = _match_tokens(reference, reference_grid, student_grid)
    s = F.normalize(student, dim=-1)
    r = F.normalize(reference.to(student.dtype), dim=-1)
    n = s.shape[1]
    diff = s @ s.transpose(1, 2) - r @ r.transpose(1, 2)
    return (diff ** 2).sum(dim=(1, 2)).mean() / (n * n)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every shared parameter name.

    Raises:
        ValidationError: Parameter names or shapes differ, or m outside [0, 1]
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError(f"EMA momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        diff = sorted(set(t_params) ^ set(s_params))
        raise ValidationError(f"Teacher/student parameter names differ: {diff[:5]}")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValidationError(f"Shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if momentum == 0.0:
            t.copy_(s)
        else:
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


def loss_history_row(step: int, components: Dict[str, torch.Tensor], total: torch.Tensor) -> Dict[str, float]:
    row = {"step": step, "total": float(total.detach())}
    row.update({k: float(v.detach()) for k, v in components.items()})
    return row


def check_finite(step: int, components: Dict[str, torch.Tensor], total: torch.Tensor) -> None:
    """Raises DivergenceError carrying the step and component values when the objective is not finite."""
    if not torch.isfinite(total.detach()).all():
        values = {k: float(v.detach()) for k, v in components.items()}
        raise DivergenceError(f"Non-finite loss at step {step}: {values}", step=step, components=values)

