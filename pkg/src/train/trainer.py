"""
Training loops for the four pretraining stages.

Every stage trains a student with AdamW and keeps an EMA teacher; only the
teacher is exported. Runs are deterministic for a given config seed: one
numpy Generator drives batching, runtime patch choice and view seeds, and
torch is seeded once before the modules are built.
"""

import copy
from dataclasses import dataclass, field, replace
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from ..augment.views import ViewBundle, ViewConfig, make_views_2d, make_views_3d, stack_views
from ..core.errors import ValidationError
from ..losses.ssl import (check_finite, dino_loss, ema_update, gram_loss, ibot_loss, koleo_loss,
                          loss_history_row, sinkhorn_normalize)
from ..losses.vlm import clip_loss, osl_loss, phase3_loss
from ..models.heads import ProjectionHead
from ..models.vit import FlexiViT
from ..models.vlm import VLMHeads, project_vision
from ..text.captions import sample_caption
from ..text.encoder import ToyTextEncoder
from ..text.osl_pairs import build_osl_pairs
from ..text.reports import PositiveFindingDB, StructuredReport
from ..volume.grid import SliceImage, VolumeGrid
from ..volume.preprocess import normalize_array
from .checkpoint import MODULE_PREFIXES, CheckpointBundle, export_modules
from .config import PhaseConfig
from .param_groups import apply_schedules, build_param_groups
from .schedules import Schedules

logger = logging.getLogger(__name__)

ImageLike = Union[SliceImage, VolumeGrid, np.ndarray]
PairedItem = Tuple[ImageLike, StructuredReport]
Components = Dict[str, torch.Tensor]


class DistillationModel(nn.Module):
    """Backbone with DINO/iBOT heads and, for Phase 3, the vision-language towers."""

    def __init__(self, backbone: FlexiViT, dino_head: ProjectionHead, ibot_head: ProjectionHead,
                 vlm_heads: Optional[VLMHeads] = None, text_encoder: Optional[ToyTextEncoder] = None):
        super().__init__()
        self.backbone = backbone
        self.dino_head = dino_head
        self.ibot_head = ibot_head
        self.vlm_heads = vlm_heads
        self.text_encoder = text_encoder

    def by_prefix(self) -> Dict[str, nn.Module]:
        return {p: getattr(self, p) for p in MODULE_PREFIXES if getattr(self, p) is not None}

    def encode_text(self, texts: List[str]) -> torch.Tensor:
        return self.vlm_heads.project_text(self.text_encoder.encode(texts))


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    history: List[Dict[str, float]] = field(default_factory=list)
    student: Optional[DistillationModel] = None
    teacher: Optional[DistillationModel] = None


def _attach_vlm(model: DistillationModel, cfg: PhaseConfig) -> None:
    model.text_encoder = ToyTextEncoder(cfg.text, trainable=True)
    model.vlm_heads = VLMHeads(cfg.backbone.embed_dim, cfg.text.dim, cfg.text.proj_dim)


def build_model(cfg: PhaseConfig, with_vlm: bool = False) -> DistillationModel:
    """Freshly initialized student, seeded from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    d = cfg.backbone.embed_dim
    model = DistillationModel(FlexiViT(cfg.backbone), ProjectionHead(d, cfg.heads), ProjectionHead(d, cfg.heads))
    if with_vlm:
        _attach_vlm(model, cfg)
    return model


def _check_compatible(bundle: CheckpointBundle, cfg: PhaseConfig) -> None:
    saved = bundle.backbone_config
    for key in ("embed_dim", "depth", "heads", "n_registers", "base_patch", "in_chans"):
        if getattr(saved, key) != getattr(cfg.backbone, key):
            raise ValidationError(
                f"Checkpoint {key}={getattr(saved, key)} does not match config {getattr(cfg.backbone, key)}")
    if bundle.head_config != cfg.heads:
        raise ValidationError(f"Checkpoint heads {bundle.head_config} do not match config {cfg.heads}")


def model_from_checkpoint(bundle: CheckpointBundle, cfg: PhaseConfig,
                          with_vlm: bool = False) -> DistillationModel:
    """Student initialized from a teacher checkpoint; missing VLM towers are built fresh."""
    _check_compatible(bundle, cfg)
    model = build_model(cfg, with_vlm=with_vlm)
    for prefix, module in model.by_prefix().items():
        if not bundle.has_module(prefix):
            if prefix in ("vlm_heads", "text_encoder"):
                continue
            raise ValidationError(f"Checkpoint has no {prefix} tensors")
        try:
            module.load_state_dict(bundle.module_state(prefix), strict=True)
        except RuntimeError as e:
            raise ValidationError(f"Checkpoint tensors do not fit {prefix}: {e}") from e
    return model


def _frozen_copy(model: DistillationModel) -> DistillationModel:
    teacher = copy.deepcopy(model)
    teacher.requires_grad_(False)
    return teacher.eval()


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def _to_array(item: ImageLike) -> np.ndarray:
    if isinstance(item, SliceImage):
        item = item.pixels
    elif isinstance(item, VolumeGrid):
        item = item.voxels
    return normalize_array(item)


def _mean(terms: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack(list(terms)).mean()


class _Loop:
    """Shared optimizer / EMA / logging loop; ``step_fn`` returns (components, total)."""

    def __init__(self, cfg: PhaseConfig, student: DistillationModel, corpus_size: int):
        cfg.validate()
        if corpus_size < 1:
            raise ValidationError("Training corpus is empty")
        self.cfg = cfg
        self.student = student.train()
        self.teacher = _frozen_copy(student)
        self.rng = np.random.default_rng(cfg.seed)
        self.schedules = Schedules.for_phase(cfg, corpus_size)
        self.optimizer = torch.optim.AdamW(
            build_param_groups(student, cfg.backbone.depth, cfg.optim.layer_decay,
                               cfg.optim.patch_embed_lr_mult),
            lr=0.0, betas=tuple(cfg.optim.betas), weight_decay=0.0)
        self.batches = _batches(corpus_size, cfg.batch_size, self.rng)
        self.history: List[Dict[str, float]] = []

    def view_seeds(self, n: int) -> List[int]:
        return [int(s) for s in self.rng.integers(0, 2 ** 31 - 1, size=n)]

    def runtime_patch(self) -> int:
        patches = self.cfg.runtime_patches
        return int(patches[int(self.rng.integers(len(patches)))])

    def run(self, step_fn: Callable[[int, np.ndarray], Tuple[Components, torch.Tensor]],
            after_step: Optional[Callable[[], None]] = None) -> List[Dict[str, float]]:
        cfg, sched = self.cfg, self.schedules
        for step in range(cfg.iterations):
            apply_schedules(self.optimizer, sched.lr(step), sched.wd(step))
            components, total = step_fn(step, next(self.batches))
            check_finite(step, components, total)
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(self.student.parameters(), cfg.optim.grad_clip)
            self.optimizer.step()
            if after_step is not None:
                after_step()
            ema_update(self.teacher, self.student, sched.momentum(step))
            row = loss_history_row(step, components, total)
            self.history.append(row)
            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                parts = " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("step", "total"))
                logger.info("[%s] step %d/%d total=%.4f %s lr=%.3g", cfg.name, step + 1,
                            cfg.iterations, row["total"], parts, sched.lr(step))
        return self.history

    def export(self, phase: str, rope_dims: int) -> TrainResult:
        bundle = export_modules(
            self.teacher.by_prefix(), phase, self.cfg.backbone, self.cfg.heads, rope_dims,
            text_cfg=self.cfg.text if self.teacher.vlm_heads is not None else None,
            extra_meta={"config": self.cfg.name, "iterations": self.cfg.iterations, "seed": self.cfg.seed})
        return TrainResult(bundle, self.history, self.student, self.teacher)


def _teacher_targets(teacher: DistillationModel, views: torch.Tensor, patch: int,
                     temp: float, iterations: int):
    """Sinkhorn-centred CLS and patch assignments of the teacher on an unmasked view."""
    with torch.no_grad():
        out = teacher.backbone(views, runtime_patch=patch)
        cls = sinkhorn_normalize(teacher.dino_head(out.cls), temp, iterations)
        logits = teacher.ibot_head(out.patches)
        b, n, k = logits.shape
        patches = sinkhorn_normalize(logits.reshape(b * n, k), temp, iterations).reshape(b, n, k)
    return cls, patches


def _mask_tensor(bundles: Sequence[ViewBundle], index: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([b.masks[index].mask.reshape(-1) for b in bundles]))


def _fixed_sizes(views: ViewConfig, rng: np.random.Generator) -> ViewConfig:
    """Pin multi-resolution crop sizes for one step so every sample in the batch agrees."""
    c = views.crops
    if not (c.global_sizes or c.local_sizes or c.gram_sizes):
        return views

    def pick(sizes, default):
        return int(sizes[int(rng.integers(len(sizes)))]) if sizes else default

    crops = replace(c, global_size=pick(c.global_sizes, c.global_size),
                    local_size=pick(c.local_sizes, c.local_size), global_sizes=(), local_sizes=(),
                    gram_sizes=(pick(c.gram_sizes, 0),) if c.gram_sizes else ())
    return replace(views, crops=crops)


def _ssl_step_fn(loop: _Loop, corpus: Sequence[np.ndarray], make_views,
                 gram_reference: Optional[DistillationModel] = None):
    cfg, student, teacher = loop.cfg, loop.student, loop.teacher
    crops = cfg.views.crops

    def step_fn(step: int, indices: np.ndarray):
        patch = loop.runtime_patch()
        views_cfg = _fixed_sizes(cfg.views, loop.rng)
        seeds = loop.view_seeds(len(indices))
        bundles = [make_views(corpus[i], views_cfg, s, patch_size=patch) for i, s in zip(indices, seeds)]
        temp = loop.schedules.temp(step)

        cls_logits, cls_feats, ibot_terms, gram_terms = [], [], [], []
        teacher_cls = []
        for g in range(crops.n_globals):
            views = stack_views(bundles, "globals", g)
            t_cls, t_patch = _teacher_targets(teacher, views, patch, temp, cfg.sinkhorn_iterations)
            teacher_cls.append(t_cls)
            mask = _mask_tensor(bundles, g)
            out = student.backbone(views, mask=mask, runtime_patch=patch)
            cls_logits.append(student.dino_head(out.cls))
            cls_feats.append(out.cls)
            ibot_terms.append(ibot_loss(student.ibot_head(out.patches), t_patch, mask, cfg.student_temp))
            if gram_reference is not None:
                with torch.no_grad():
                    ref = gram_reference.backbone(stack_views(bundles, "gram_views", g), runtime_patch=patch)
                gram_terms.append(gram_loss(out.patches, ref.patches, out.grid_shape, ref.grid_shape))
        for j in range(crops.n_locals):
            out = student.backbone(stack_views(bundles, "locals", j), runtime_patch=patch)
            cls_logits.append(student.dino_head(out.cls))

        components = {
            "dino": dino_loss(cls_logits, teacher_cls, cfg.student_temp),
            "ibot": _mean(ibot_terms),
            "koleo": _mean([koleo_loss(f) for f in cls_feats]),
        }
        if gram_terms:
            components["gram"] = _mean(gram_terms)
        return components, cfg.loss.combine(components)

    return step_fn


def _require_phase(cfg: PhaseConfig, phase: str) -> None:
    if cfg.phase != phase:
        raise ValidationError(f"Config {cfg.name!r} is for phase {cfg.phase}, expected {phase}")


def run_phase1(corpus: Sequence[ImageLike], cfg: PhaseConfig,
               init: Optional[CheckpointBundle] = None) -> TrainResult:
    """2D DINO + iBOT + KoLeo pretraining; runtime patch drawn per iteration from ``cfg.runtime_patches``.

    ``init`` optionally warm-starts from an existing 2D checkpoint; otherwise
    weights are randomly initialized.
    """
    _require_phase(cfg, "1")
    student = model_from_checkpoint(init, cfg) if init is not None else build_model(cfg)
    data = [_to_array(x) for x in corpus]
    loop = _Loop(cfg, student, len(data))
    loop.run(_ssl_step_fn(loop, data, make_views_2d))
    return loop.export("1", rope_dims=2)


def run_highres(checkpoint: CheckpointBundle, corpus: Sequence[ImageLike], cfg: PhaseConfig) -> TrainResult:
    """High-resolution continuation with Gram anchoring to a frozen copy of ``checkpoint``."""
    _require_phase(cfg, "1hr")
    if checkpoint.rope_dims != 2:
        raise ValidationError("High-resolution continuation needs a 2D checkpoint")
    if not cfg.views.crops.gram_sizes:
        raise ValidationError("High-resolution continuation needs gram_sizes for the reference crops")
    student = model_from_checkpoint(checkpoint, cfg)
    reference = _frozen_copy(student)
    data = [_to_array(x) for x in corpus]
    loop = _Loop(cfg, student, len(data))
    loop.run(_ssl_step_fn(loop, data, make_views_2d, gram_reference=reference))
    return loop.export("1hr", rope_dims=2)


def run_phase2(checkpoint: CheckpointBundle, corpus: Sequence[ImageLike], cfg: PhaseConfig) -> TrainResult:
    """3D self-distillation from a transferred checkpoint."""
    _require_phase(cfg, "2")
    if checkpoint.rope_dims != 3:
        raise ValidationError("Phase 2 needs a 3D checkpoint; run transfer_2d_to_3d first")
    student = model_from_checkpoint(checkpoint, cfg)
    data = [_to_array(x) for x in corpus]
    loop = _Loop(cfg, student, len(data))
    loop.run(_ssl_step_fn(loop, data, make_views_3d))
    return loop.export("2", rope_dims=3)


def run_phase3(checkpoint: CheckpointBundle, corpus: Sequence[PairedItem], cfg: PhaseConfig) -> TrainResult:
    """Report alignment: iBOT on the single global crop plus CLIP and OSL.

    Local crops are generated with the bundle but not forwarded: the Phase-3
    objective has no cross-view term.
    """
    _require_phase(cfg, "3")
    if checkpoint.rope_dims != 3:
        raise ValidationError("Phase 3 needs a 3D checkpoint")
    if cfg.views.crops.n_globals != 1:
        raise ValidationError("Phase 3 uses exactly one global crop")
    student = model_from_checkpoint(checkpoint, cfg, with_vlm=True)
    volumes = [_to_array(v) for v, _ in corpus]
    reports = [r for _, r in corpus]
    db = PositiveFindingDB.from_reports(r for r in reports if r.caption_bearing)
    loop = _Loop(cfg, student, len(volumes))
    teacher = loop.teacher

    def step_fn(step: int, indices: np.ndarray):
        patch = loop.runtime_patch()
        seeds = loop.view_seeds(len(indices))
        bundles = [make_views_3d(volumes[i], cfg.views, s, patch_size=patch) for i, s in zip(indices, seeds)]
        views = stack_views(bundles, "globals", 0)
        mask = _mask_tensor(bundles, 0)
        _, t_patch = _teacher_targets(teacher, views, patch, loop.schedules.temp(step), cfg.sinkhorn_iterations)
        out = student.backbone(views, mask=mask, runtime_patch=patch)
        ibot = ibot_loss(student.ibot_head(out.patches), t_patch, mask, cfg.student_temp)

        vision = project_vision(out.cls, out.patch_mean, student.vlm_heads)
        batch_reports = [reports[i] for i in indices]
        captions = [sample_caption(r, loop.rng) for r in batch_reports]
        scale = student.vlm_heads.temperature
        clip = clip_loss(vision, student.encode_text(captions), scale)
        pairs = [build_osl_pairs(r, db, loop.rng) for r in batch_reports]
        osl = osl_loss(vision, pairs, student.encode_text, scale)
        components = {"ibot": ibot, "clip": clip, "osl": osl}
        return components, phase3_loss(ibot, clip, osl, cfg.loss)

    loop.run(step_fn, after_step=student.vlm_heads.clamp_logit_scale)
    return loop.export("3", rope_dims=3)
