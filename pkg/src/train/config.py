"""
Phase configurations.

Full-scale presets follow the published training table; ``toy_*`` presets
shrink dimensions and iteration counts so a run finishes on a CPU in
minutes. Every field can be overridden from a TOML file through
``src.utils.config.load_config``.
"""

from dataclasses import dataclass, field, replace
from typing import Tuple

from ..augment.intensity import AugConfig
from ..augment.views import CropConfig, ViewConfig
from ..core.errors import ValidationError
from ..losses.ssl import LossWeights
from ..models.heads import HeadConfig
from ..models.vit import BackboneConfig
from ..text.encoder import TextConfig

PHASES = ("1", "1hr", "2", "3")


@dataclass
class OptimConfig:
    betas: Tuple[float, float] = (0.9, 0.999)
    peak_lr: float = 2e-4
    lr_floor: float = 1e-6
    warmup_epochs: float = 30.0
    weight_decay: Tuple[float, float] = (0.04, 0.04)
    grad_clip: float = 3.0
    patch_embed_lr_mult: float = 0.2
    layer_decay: float = 0.9


@dataclass
class PhaseConfig:
    name: str = "phase1"
    phase: str = "1"
    iterations: int = 1_000_000
    batch_size: int = 1600
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema_momentum: Tuple[float, float] = (0.994, 0.994)
    teacher_temp: Tuple[float, float] = (0.04, 0.07)
    teacher_temp_warmup_epochs: float = 30.0
    student_temp: float = 0.1
    sinkhorn_iterations: int = 3
    loss: LossWeights = field(default_factory=LossWeights)
    views: ViewConfig = field(default_factory=ViewConfig)
    runtime_patches: Tuple[int, ...] = (16, 8)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    text: TextConfig = field(default_factory=TextConfig)
    init: str = "imagenet"
    seed: int = 0
    log_every: int = 10

    @property
    def ndim(self) -> int:
        return 2 if self.phase in ("1", "1hr") else 3

    @classmethod
    def preset(cls, name: str) -> 'PhaseConfig':
        builders = {
            "phase1": _phase1, "phase1hr": _phase1hr, "phase2": _phase2, "phase3": _phase3,
            "toy_phase1": _toy_phase1, "toy_phase1hr": _toy_phase1hr,
            "toy_phase2": _toy_phase2, "toy_phase3": _toy_phase3,
        }
        try:
            return builders[name]()
        except KeyError:
            raise ValidationError(f"Unknown phase preset {name!r}; choose from {sorted(builders)}") from None

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if not self.runtime_patches or any(p < 1 for p in self.runtime_patches):
            raise ValidationError(f"runtime_patches must be positive, got {self.runtime_patches}")
        lo, hi = self.ema_momentum
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError(f"ema_momentum must satisfy 0 <= start <= end <= 1, got {self.ema_momentum}")
        lo, hi = self.teacher_temp
        if not 0.0 < lo <= hi:
            raise ValidationError(f"teacher_temp must be a positive increasing range, got {self.teacher_temp}")
        if self.optim.grad_clip <= 0:
            raise ValidationError("grad_clip must be > 0")
        self.loss.validate()
        self.views.validate()
        self.backbone.validate()
        c = self.views.crops
        sizes = (c.global_sizes or (c.global_size,)) + (c.local_sizes or (c.local_size,))
        for p in self.runtime_patches:
            bad = [s for s in sizes if s % p]
            if bad:
                raise ValidationError(f"Crop sizes {bad} are not divisible by runtime patch {p}")


def _phase1() -> PhaseConfig:
    return PhaseConfig(views=ViewConfig(crops=CropConfig.preset("2d")))


def _phase1hr() -> PhaseConfig:
    return PhaseConfig(
        name="phase1hr", phase="1hr", iterations=100_000,
        optim=OptimConfig(peak_lr=5e-5, warmup_epochs=10.0),
        ema_momentum=(0.999, 0.999), loss=LossWeights.preset("phase1hr"),
        views=ViewConfig(aug=replace(AugConfig(), flip_p=0.0), crops=CropConfig.preset("highres")),
        init="phase1")


def _phase2() -> PhaseConfig:
    return PhaseConfig(
        name="phase2", phase="2", batch_size=400, loss=LossWeights.preset("phase2"),
        views=ViewConfig(crops=CropConfig.preset("3d")), runtime_patches=(16,), init="phase1")


def _phase3() -> PhaseConfig:
    return PhaseConfig(
        name="phase3", phase="3", iterations=500_000, batch_size=1024,
        optim=OptimConfig(lr_floor=2e-5, weight_decay=(0.04, 0.4)),
        ema_momentum=(0.994, 1.0), loss=LossWeights.preset("phase3"),
        views=ViewConfig(crops=CropConfig.preset("3d_phase3")), runtime_patches=(16,), init="phase2")


def _toy(cfg: PhaseConfig, iterations: int, crops: str, patches: Tuple[int, ...]) -> PhaseConfig:
    views = replace(cfg.views, crops=CropConfig.preset(crops))
    return replace(
        cfg, name=f"toy_{cfg.name}", iterations=iterations, batch_size=4,
        optim=replace(cfg.optim, peak_lr=1e-3, warmup_epochs=1.0),
        teacher_temp_warmup_epochs=2.0, views=views, runtime_patches=patches,
        backbone=BackboneConfig.preset("toy"), heads=HeadConfig.preset("toy"),
        text=TextConfig.preset("toy"), log_every=20)


def _toy_phase1() -> PhaseConfig:
    return _toy(_phase1(), 200, "toy2d", (16, 8))


def _toy_phase1hr() -> PhaseConfig:
    cfg = _toy(_phase1hr(), 100, "toy_highres", (16,))
    return replace(cfg, optim=replace(cfg.optim, peak_lr=2.5e-4))


def _toy_phase2() -> PhaseConfig:
    return _toy(_phase2(), 100, "toy3d", (8,))


def _toy_phase3() -> PhaseConfig:
    return _toy(_phase3(), 100, "toy3d_phase3", (8,))
