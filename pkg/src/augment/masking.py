"""
Region Collaborative Cutout (RCC) masking over a 2D or 3D patch grid.

The grid is split into 3 cells per axis. One box is drawn inside every cell,
boxes are applied largest first, and the box that overshoots the target
token count is truncated in C order (equivalent to recovering the most
recently masked tokens), so the mask hits the target count exactly.
"""

from dataclasses import dataclass
import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ValidationError

logger = logging.getLogger(__name__)

CELLS_PER_AXIS = 3
MAX_ROUNDS = 16

Box = Tuple[Tuple[int, ...], Tuple[int, ...]]  # (start, stop), stop exclusive


@dataclass
class MaskConfig:
    gate_p: float = 0.5
    ratio: Tuple[float, float] = (0.1, 0.5)
    box_scale: Tuple[float, float] = (0.25, 1.0)

    def validate(self) -> None:
        if not 0.0 <= self.gate_p <= 1.0:
            raise ValidationError(f"gate_p must be in [0, 1], got {self.gate_p}")
        lo, hi = self.ratio
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError(f"ratio must satisfy 0 <= low <= high <= 1, got {self.ratio}")
        lo, hi = self.box_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValidationError(f"box_scale must satisfy 0 < low <= high <= 1, got {self.box_scale}")


@dataclass(frozen=True)
class MaskGrid:
    mask: np.ndarray
    target_ratio: float
    active: bool
    boxes: Tuple[Box, ...] = ()

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def target_count(self) -> int:
        return int(round(self.target_ratio * self.mask.size))

    @property
    def ratio(self) -> float:
        return self.n_masked / self.mask.size

    def boxes_union(self) -> np.ndarray:
        out = np.zeros_like(self.mask)
        for start, stop in self.boxes:
            out[tuple(slice(a, b) for a, b in zip(start, stop))] = True
        return out


def empty_mask(grid_shape: Sequence[int], active: bool = False) -> MaskGrid:
    return MaskGrid(np.zeros(tuple(grid_shape), dtype=bool), 0.0, active)


def _cell_bounds(n: int) -> List[Tuple[int, int]]:
    edges = np.linspace(0, n, CELLS_PER_AXIS + 1).round().astype(int)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def _draw_boxes(grid_shape: Sequence[int], cfg: MaskConfig, rng: np.random.Generator) -> List[Box]:
    cells = itertools.product(*[_cell_bounds(n) for n in grid_shape])
    boxes = []
    for cell in cells:
        start, stop = [], []
        for lo, hi in cell:
            extent = hi - lo
            side = min(max(int(round(rng.uniform(*cfg.box_scale) * extent)), 1), extent)
            offset = lo + int(rng.integers(0, extent - side + 1))
            start.append(offset)
            stop.append(offset + side)
        boxes.append((tuple(start), tuple(stop)))
    # largest first; stable for equal volumes
    return sorted(boxes, key=lambda b: -int(np.prod(np.subtract(b[1], b[0]))))


def _prefix_boxes(start: Sequence[int], shape: Sequence[int], count: int) -> List[Box]:
    """Rectangles covering the first ``count`` cells (C order) of a box."""
    if count <= 0:
        return []
    start, shape = list(start), list(shape)
    inner = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    full, rem = divmod(count, inner)
    out = []
    if full:
        out.append((tuple(start), tuple([start[0] + full] + [s + n for s, n in zip(start[1:], shape[1:])])))
    if rem:
        for sub_start, sub_stop in _prefix_boxes(start[1:], shape[1:], rem):
            out.append(((start[0] + full,) + sub_start, (start[0] + full + 1,) + sub_stop))
    return out


def rcc_mask(grid_shape: Sequence[int], rng: np.random.Generator,
             cfg: Optional[MaskConfig] = None) -> MaskGrid:
    """RCC mask over an n-d token grid.

    Raises:
        ValidationError: If any grid axis is shorter than 3
    """
    cfg = cfg or MaskConfig()
    grid_shape = tuple(int(n) for n in grid_shape)
    if any(n < CELLS_PER_AXIS for n in grid_shape):
        raise ValidationError(f"RCC needs at least {CELLS_PER_AXIS} tokens per axis, got {grid_shape}")
    if rng.random() >= cfg.gate_p:
        return empty_mask(grid_shape)
    ratio = float(rng.uniform(*cfg.ratio))
    mask = np.zeros(grid_shape, dtype=bool)
    target = int(round(ratio * mask.size))
    if target == 0:
        return MaskGrid(mask, ratio, True)

    kept: List[Box] = []
    count = 0
    rounds = [_draw_boxes(grid_shape, cfg, rng) for _ in range(MAX_ROUNDS)]
    # the whole grid as a last resort
    rounds.append([((0,) * len(grid_shape), grid_shape)])
    for boxes in rounds:
        for start, stop in boxes:
            region = tuple(slice(a, b) for a, b in zip(start, stop))
            fresh = ~mask[region]
            n_fresh = int(fresh.sum())
            if n_fresh == 0:
                continue
            if count + n_fresh <= target:
                mask[region] = True
                kept.append((start, stop))
                count += n_fresh
            else:
                # recover the overshoot: keep the C-order prefix holding the needed fresh cells
                cut = int(np.searchsorted(np.cumsum(fresh.ravel()), target - count)) + 1
                shape = tuple(b - a for a, b in zip(start, stop))
                for sub in _prefix_boxes(start, shape, cut):
                    mask[tuple(slice(a, b) for a, b in zip(*sub))] = True
                    kept.append(sub)
                count = target
            if count == target:
                return MaskGrid(mask, ratio, True, tuple(kept))
    logger.warning("RCC could not reach %d tokens on grid %s", target, grid_shape)
    return MaskGrid(mask, ratio, True, tuple(kept))


def rcc_mask_2d(grid_shape: Sequence[int], rng: np.random.Generator,
                cfg: Optional[MaskConfig] = None) -> MaskGrid:
    if len(grid_shape) != 2:
        raise ValidationError(f"Expected a 2D grid, got {tuple(grid_shape)}")
    return rcc_mask(grid_shape, rng, cfg)


def rcc_mask_3d(grid_shape: Sequence[int], rng: np.random.Generator,
                cfg: Optional[MaskConfig] = None) -> MaskGrid:
    if len(grid_shape) != 3:
        raise ValidationError(f"Expected a 3D grid, got {tuple(grid_shape)}")
    return rcc_mask(grid_shape, rng, cfg)
