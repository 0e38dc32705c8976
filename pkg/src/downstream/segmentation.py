"""
Minimal segmentation fine-tuning loop for PatchDecode models.

AdamW over decoder and backbone at one shared learning rate with polynomial
decay, Dice + cross-entropy loss, and random crops of which a fixed share is
forced to contain foreground.
"""

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..core.compression import CompressionLike
from ..core.container import ContainerKind, TensorContainer
from ..core.errors import ConfigError, DivergenceError, FormatError, ValidationError
from ..core.format import CompressionType
from ..evaluation.metrics import dice, hd95, surface_dice
from ..models.vit import BackboneConfig, FlexiViT
from ..utils.config import config_from_dict, config_to_dict
from ..volume.preprocess import normalize_array
from .decoder import DecoderConfig, SegmentationModel

logger = logging.getLogger(__name__)


@dataclass
class SegCase:
    """One labeled image or volume; labels share the image shape."""
    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.image.shape != self.labels.shape:
            raise ValidationError(f"Image {self.image.shape} and labels {self.labels.shape} differ")


@dataclass
class SegTrainConfig:
    iterations: int = 500
    lr: float = 5e-5
    weight_decay: float = 3e-5
    betas: Tuple[float, float] = (0.9, 0.98)
    poly_power: float = 1.0
    fg_oversample: float = 0.33
    crop_size: Tuple[int, ...] = (64, 64)
    batch_size: int = 2
    seed: int = 0
    log_every: int = 50

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if not 0.0 <= self.fg_oversample <= 1.0:
            raise ValidationError(f"fg_oversample must be in [0, 1], got {self.fg_oversample}")
        if self.lr <= 0 or self.poly_power <= 0:
            raise ValidationError("lr and poly_power must be positive")


@dataclass
class SegTrainResult:
    model: SegmentationModel
    history: List[Dict[str, float]] = field(default_factory=list)


def poly_lr(step: int, total: int, base: float, power: float = 1.0) -> float:
    """base * (1 - step / (total - 1)) ** power; the last step is 0."""
    if not 0 <= step < total:
        raise ValidationError(f"Step {step} outside [0, {total})")
    if total == 1:
        return base
    return base * (1.0 - step / (total - 1)) ** power


def _pad_to(array: np.ndarray, size: Sequence[int], value) -> np.ndarray:
    pads = [(0, max(0, s - n)) for n, s in zip(array.shape, size)]
    if not any(p for _, p in pads):
        return array
    return np.pad(array, pads, constant_values=value)


def sample_crop(case: SegCase, crop_size: Sequence[int], rng: np.random.Generator,
                force_foreground: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Crop of ``crop_size``; forced crops are centred on a random foreground voxel.

    Cases smaller than the crop are padded with the image minimum and label 0.
    """
    if len(crop_size) != case.image.ndim:
        raise ValidationError(f"Crop size {tuple(crop_size)} does not match image rank {case.image.ndim}")
    image = _pad_to(case.image, crop_size, case.image.min())
    labels = _pad_to(case.labels, crop_size, 0)
    limits = [n - c for n, c in zip(image.shape, crop_size)]
    fg = np.argwhere(labels > 0) if force_foreground else np.empty((0, labels.ndim))
    if len(fg):
        centre = fg[int(rng.integers(len(fg)))]
        starts = [int(np.clip(int(p) - c // 2, 0, hi)) for p, c, hi in zip(centre, crop_size, limits)]
    else:
        starts = [int(rng.integers(0, hi + 1)) for hi in limits]
    window = tuple(slice(s, s + c) for s, c in zip(starts, crop_size))
    return image[window], labels[window]


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes, pooled across the batch."""
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, logits.shape[1]).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, logits.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    score = (2 * inter + eps) / (denom + eps)
    return 1.0 - score[1:].mean()


def train_seg(model: SegmentationModel, dataset: Sequence[SegCase], cfg: SegTrainConfig) -> SegTrainResult:
    """Fine-tune decoder (and backbone when enabled) on labeled cases.

    Raises:
        ValidationError: For an empty dataset or a crop not divisible by the patch size
        DivergenceError: If the loss becomes non-finite
    """
    cfg.validate()
    if not dataset:
        raise ValidationError("Segmentation dataset is empty")
    if any(c % model.cfg.patch_size for c in cfg.crop_size):
        raise ValidationError(f"Crop {cfg.crop_size} is not divisible by patch size {model.cfg.patch_size}")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    images = [SegCase(normalize_array(c.image), c.labels) for c in dataset]

    optimizer = torch.optim.AdamW(model.parameter_groups(), lr=cfg.lr, betas=tuple(cfg.betas),
                                  weight_decay=cfg.weight_decay)
    model.train()
    history = []
    for step in range(cfg.iterations):
        lr = poly_lr(step, cfg.iterations, cfg.lr, cfg.poly_power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        crops = [sample_crop(images[int(rng.integers(len(images)))], cfg.crop_size, rng,
                             bool(rng.random() < cfg.fg_oversample))
                 for _ in range(cfg.batch_size)]
        x = torch.from_numpy(np.stack([c[0] for c in crops])[:, None].astype(np.float32))
        y = torch.from_numpy(np.stack([c[1] for c in crops]))

        logits = model(x)
        ce = F.cross_entropy(logits, y)
        dl = soft_dice_loss(logits, y)
        loss = ce + dl
        if not torch.isfinite(loss):
            raise DivergenceError(f"Segmentation loss diverged at step {step}", step,
                                  {"ce": float(ce), "dice": float(dl)})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append({"step": step, "total": float(loss), "ce": float(ce), "dice": float(dl), "lr": lr})
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            logger.info("[seg] step %d/%d loss=%.4f ce=%.4f dice=%.4f lr=%.3g",
                        step + 1, cfg.iterations, float(loss), float(ce), float(dl), lr)
    return SegTrainResult(model.eval(), history)


@torch.no_grad()
def segment(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    """Argmax label map for one image or volume whose size is divisible by the patch size."""
    x = torch.from_numpy(normalize_array(image)[None, None].astype(np.float32))
    return model.eval()(x).argmax(dim=1)[0].numpy()


def evaluate_segmentation(pred: np.ndarray, truth: np.ndarray,
                          spacing: Optional[Sequence[float]] = None,
                          labels: Optional[Sequence[int]] = None) -> Dict[int, Dict[str, float]]:
    """Dice, surface Dice and HD95 for every foreground label."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if labels is None:
        labels = sorted(int(v) for v in np.union1d(np.unique(pred), np.unique(truth)) if v > 0)
    return {
        int(lab): {
            "dice": dice(pred == lab, truth == lab),
            "sdc": surface_dice(pred == lab, truth == lab, spacing),
            "hd95": hd95(pred == lab, truth == lab, spacing),
        }
        for lab in labels
    }


def save_seg_model(model: SegmentationModel, path: Union[str, Path],
                   compression: CompressionLike = CompressionType.NONE) -> Path:
    """Backbone + decoder weights with the configs needed to rebuild them."""
    tensors = {name: value.detach().cpu().to(torch.float32).numpy().copy()
               for name, value in model.state_dict().items()}
    meta = {"type": "segmentation", "backbone": config_to_dict(model.backbone.cfg),
            "decoder": config_to_dict(model.cfg)}
    return TensorContainer(ContainerKind.CHECKPOINT, tensors, meta).save(path, compression)


def load_seg_model(path: Union[str, Path]) -> SegmentationModel:
    """Rebuild a model written by ``save_seg_model``.

    Raises:
        FormatError: If the container is not a segmentation model or its tensors do not fit
    """
    container = TensorContainer.load(path, ContainerKind.CHECKPOINT)
    if container.meta.get("type") != "segmentation":
        raise FormatError(f"{path} does not hold a segmentation model")
    try:
        backbone = FlexiViT(config_from_dict(container.meta["backbone"], BackboneConfig))
        cfg = config_from_dict(container.meta["decoder"], DecoderConfig)
    except (KeyError, ConfigError) as e:
        raise FormatError(f"{path}: malformed segmentation metadata ({e})") from e
    model = SegmentationModel(backbone, cfg)
    try:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in container.tensors.items()}, strict=True)
    except RuntimeError as e:
        raise FormatError(f"{path}: tensors do not fit the model ({e})") from e
    return model.eval()
