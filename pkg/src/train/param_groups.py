"""AdamW parameter groups with layer-wise LR decay and a patch-embedding LR multiplier."""

import logging
import re
from typing import Dict, List, Tuple

import torch.nn as nn

logger = logging.getLogger(__name__)

_BLOCK = re.compile(r"(?:^|\.)blocks\.(\d+)\.")
_EMBED_NAMES = ("cls_token", "register_tokens", "mask_token", "patch_embed_2d", "patch_embed_3d")
_NO_DECAY_SUFFIXES = ("bias", "cls_token", "register_tokens", "mask_token", ".gamma", "logit_scale")


def layer_id(name: str, depth: int) -> int:
    """0 for embeddings and tokens, k + 1 for block k, depth for everything after the trunk."""
    m = _BLOCK.search(name)
    if m:
        return int(m.group(1)) + 1
    if any(token in name for token in _EMBED_NAMES):
        return 0
    return depth


def lr_multiplier(name: str, depth: int, layer_decay: float, patch_embed_mult: float) -> float:
    """block k -> decay^(depth-1-k); embeddings -> decay^depth; patch embed additionally x mult."""
    scale = layer_decay ** (depth - layer_id(name, depth))
    if "patch_embed" in name:
        scale *= patch_embed_mult
    return scale


def applies_weight_decay(name: str, param: nn.Parameter) -> bool:
    return param.ndim > 1 and not name.endswith(_NO_DECAY_SUFFIXES)


def build_param_groups(model: nn.Module, depth: int, layer_decay: float = 0.9,
                       patch_embed_mult: float = 0.2) -> List[Dict]:
    """Trainable parameters grouped by (lr_multiplier, wd_multiplier).

    Each group carries ``lr_multiplier``, ``wd_multiplier`` and the parameter
    ``names``; ``apply_schedules`` turns them into per-group lr / weight_decay.
    """
    groups: Dict[Tuple[float, float], Dict] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        lr_mult = lr_multiplier(name, depth, layer_decay, patch_embed_mult)
        wd_mult = 1.0 if applies_weight_decay(name, param) else 0.0
        group = groups.setdefault((lr_mult, wd_mult), {
            "params": [], "names": [], "lr_multiplier": lr_mult, "wd_multiplier": wd_mult})
        group["params"].append(param)
        group["names"].append(name)
    logger.debug("Built %d parameter groups", len(groups))
    return list(groups.values())


def apply_schedules(optimizer, lr: float, weight_decay: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr * group["lr_multiplier"]
        group["weight_decay"] = weight_decay * group["wd_multiplier"]
