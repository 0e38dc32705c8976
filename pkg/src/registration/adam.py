"""
Instance-wise Adam refinement of a displacement field.

The optimized parameter is a raw field; every iteration it is box-smoothed
(kernel ``smooth_kernel``, ``smooth_passes`` passes, replicate borders) and the
smoothed field warps the moving features. The objective is the mean squared
feature difference plus ``smooth_weight`` times the mean squared forward
difference of the smoothed field.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import List, Optional

import torch
import torch.nn.functional as F

from ..core.errors import DivergenceError, ValidationError
from .convex import ConvexAdamParams, as_feature_array
from .field import DisplacementField
from .warp import warp_tensor

logger = logging.getLogger(__name__)

# objective floor relative to the fixed feature energy; below it the field is left as is
CONVERGED_RTOL = 1e-12


@dataclass
class RefineResult:
    field: DisplacementField
    history: List[float] = field(default_factory=list)


def box_smooth(u: torch.Tensor, kernel: int, passes: int) -> torch.Tensor:
    """Repeated stride-1 box filter over (B, C, D, H, W) with replicate padding."""
    r = kernel // 2
    for _ in range(passes):
        u = F.avg_pool3d(F.pad(u, (r,) * 6, mode="replicate"), kernel, stride=1)
    return u


def smoothness(u: torch.Tensor) -> torch.Tensor:
    terms = [torch.diff(u, dim=d).pow(2).mean() for d in (2, 3, 4) if u.shape[d] > 1]
    return torch.stack(terms).sum() if terms else u.new_zeros(())


def refine_lr(step: int, total: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup then cosine decay to 0 at the last step."""
    warmup = int(round(warmup_fraction * total))
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - 1 - warmup, 1)
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warmup) / span))


def adam_refine(fixed, moving, init: Optional[DisplacementField] = None,
                params: Optional[ConvexAdamParams] = None) -> RefineResult:
    """Minimize SSD(fixed, warp(moving, u)) + smooth_weight * |grad u|^2 from ``init``.

    Raises:
        DivergenceError: If the objective becomes non-finite
    """
    params = params or ConvexAdamParams()
    params.validate()
    f, m = as_feature_array(fixed), as_feature_array(moving)
    if f.shape != m.shape:
        raise ValidationError(f"Fixed {f.shape} and moving {m.shape} features differ")
    shape = f.shape[1:]
    if init is None:
        init = DisplacementField.zeros(shape)
    if init.grid_shape != shape:
        raise ValidationError(f"Initial field grid {init.grid_shape} does not match features {shape}")

    fixed_t = torch.from_numpy(f)[None]
    moving_t = torch.from_numpy(m)[None]
    u = torch.nn.Parameter(torch.from_numpy(init.u.copy())[None])
    optimizer = torch.optim.Adam([u], lr=params.lr)
    history = []
    floor = CONVERGED_RTOL * max(float(fixed_t.pow(2).sum(dim=1).mean()), 1e-30)
    with torch.enable_grad():
        for step in range(params.iterations):
            for group in optimizer.param_groups:
                group["lr"] = refine_lr(step, params.iterations, params.lr, params.warmup_fraction)
            smooth = box_smooth(u, params.smooth_kernel, params.smooth_passes)
            warped = warp_tensor(moving_t, smooth)
            ssd = (fixed_t - warped).pow(2).sum(dim=1).mean()
            reg = smoothness(smooth)
            loss = ssd + params.smooth_weight * reg
            if not torch.isfinite(loss):
                raise DivergenceError(f"Registration objective diverged at iteration {step}", step,
                                      {"ssd": float(ssd), "smooth": float(reg)})
            if float(loss) <= floor:
                # exact optimum; Adam would amplify the residual gradient noise
                history.append(float(loss))
                logger.debug("Objective %.3g at the floor after %d iterations", float(loss), step)
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            history.append(float(loss))

    with torch.no_grad():
        final = box_smooth(u, params.smooth_kernel, params.smooth_passes)[0].numpy()
    logger.info("Adam refinement: %d iterations, objective %.4g -> %.4g", len(history),
                history[0] if history else float("nan"), history[-1] if history else float("nan"))
    return RefineResult(DisplacementField(final, {"stage": "adam"}), history)
