"""Step-indexed training schedules.

Epoch-denominated settings convert to steps with
``steps_per_epoch = ceil(corpus_size / batch_size)``.
"""

from dataclasses import dataclass
import math

from ..core.errors import ValidationError
from .config import PhaseConfig


def steps_per_epoch(corpus_size: int, batch_size: int) -> int:
    if corpus_size < 1 or batch_size < 1:
        raise ValidationError(f"corpus_size and batch_size must be >= 1, got {corpus_size}, {batch_size}")
    return math.ceil(corpus_size / batch_size)


def _check_step(step: int, total: int) -> None:
    if not 0 <= step <= total:
        raise ValidationError(f"step {step} outside [0, {total}]")


def cosine(start: float, end: float, progress: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, total: int, peak: float, warmup_steps: int, floor: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak``, then cosine down to ``floor`` at ``total``."""
    _check_step(step, total)
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = total - warmup_steps
    return cosine(peak, floor, (step - warmup_steps) / span if span > 0 else 0.0)


def wd_at(step: int, total: int, start: float, end: float) -> float:
    _check_step(step, total)
    return cosine(start, end, step / total if total else 0.0)


def ema_at(step: int, total: int, start: float, end: float) -> float:
    _check_step(step, total)
    return start + (end - start) * (step / total if total else 0.0)


def temp_at(step: int, total: int, warmup_steps: int, start: float, end: float) -> float:
    _check_step(step, total)
    if step >= warmup_steps:
        return end
    return start + (end - start) * step / warmup_steps


@dataclass(frozen=True)
class Schedules:
    """All schedules of one phase, bound to a corpus size."""
    total: int
    warmup_steps: int
    temp_warmup_steps: int
    peak_lr: float
    lr_floor: float
    weight_decay: tuple
    ema_momentum: tuple
    teacher_temp: tuple

    @classmethod
    def for_phase(cls, cfg: PhaseConfig, corpus_size: int) -> 'Schedules':
        spe = steps_per_epoch(corpus_size, cfg.batch_size)
        total = cfg.iterations
        return cls(
            total=total,
            warmup_steps=min(int(round(cfg.optim.warmup_epochs * spe)), total),
            temp_warmup_steps=min(int(round(cfg.teacher_temp_warmup_epochs * spe)), total),
            peak_lr=cfg.optim.peak_lr,
            lr_floor=cfg.optim.lr_floor,
            weight_decay=tuple(cfg.optim.weight_decay),
            ema_momentum=tuple(cfg.ema_momentum),
            teacher_temp=tuple(cfg.teacher_temp),
        )

    def lr(self, step: int) -> float:
        return lr_at(step, self.total, self.peak_lr, self.warmup_steps, self.lr_floor)

    def wd(self, step: int) -> float:
        return wd_at(step, self.total, *self.weight_decay)

    def momentum(self, step: int) -> float:
        return ema_at(step, self.total, *self.ema_momentum)

    def temp(self, step: int) -> float:
        return temp_at(step, self.total, self.temp_warmup_steps, *self.teacher_temp)
