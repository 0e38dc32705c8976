"""
Multi-crop view generation for 2D slices and 3D volumes.

2D: intensity augmentations on the full image, then random-resized crops
(bicubic) for the global and local views, each with its own horizontal flip.
3D: undersized volumes are padded with their minimum, global cubes are
cropped at native size, local cubes of a random fraction of the global side
are resized trilinearly; every crop gets independent per-axis flips.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image
import torch
import torch.nn.functional as F

from ..core.errors import ValidationError
from ..volume.grid import SliceImage, VolumeGrid
from ..volume.preprocess import resize_image
from .intensity import AugConfig, apply_intensity_augs
from .masking import MaskConfig, MaskGrid, rcc_mask

logger = logging.getLogger(__name__)

CropBox = Tuple[int, ...]  # 2D: (top, left, height, width); 3D: (z, y, x, side)


@dataclass
class CropConfig:
    n_globals: int = 2
    n_locals: int = 8
    global_size: int = 256
    local_size: int = 112
    global_scale: Tuple[float, float] = (0.32, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.32)
    aspect_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    # high-resolution continuation: one size per bundle drawn from each list
    global_sizes: Tuple[int, ...] = ()
    local_sizes: Tuple[int, ...] = ()
    gram_sizes: Tuple[int, ...] = ()

    @classmethod
    def preset(cls, name: str) -> 'CropConfig':
        presets = {
            "2d": cls(),
            "3d": cls(global_size=160, local_size=80, local_scale=(0.1875, 0.5)),
            "3d_phase3": cls(n_globals=1, global_size=160, local_size=80, local_scale=(0.1875, 0.5)),
            "highres": cls(global_sizes=(384, 448, 512), local_sizes=(112, 160, 224),
                           gram_sizes=(192, 224, 256)),
            "toy2d": cls(global_size=64, local_size=32),
            "toy3d": cls(global_size=32, local_size=16, local_scale=(0.1875, 0.5)),
            "toy3d_phase3": cls(n_globals=1, global_size=32, local_size=16, local_scale=(0.1875, 0.5)),
            "toy_highres": cls(global_sizes=(64, 80, 96), local_sizes=(32, 48), gram_sizes=(48, 64)),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValidationError(f"Unknown crop preset: {name!r}") from None

    def validate(self) -> None:
        if self.n_globals < 1 or self.n_locals < 0:
            raise ValidationError("Need at least one global crop and a non-negative local count")
        for name in ("global_scale", "local_scale", "aspect_ratio"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must be a positive (low, high) range, got {(lo, hi)}")


@dataclass
class ViewConfig:
    aug: AugConfig = field(default_factory=AugConfig)
    crops: CropConfig = field(default_factory=CropConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    augment_3d_intensity: bool = False

    def validate(self) -> None:
        self.aug.validate()
        self.crops.validate()
        self.masks.validate()


@dataclass
class ViewBundle:
    globals: List[np.ndarray]
    locals: List[np.ndarray]
    masks: List[MaskGrid]
    rng_seed: int
    global_boxes: List[CropBox] = field(default_factory=list)
    local_boxes: List[CropBox] = field(default_factory=list)
    aug_log: Dict[str, object] = field(default_factory=dict)
    gram_views: List[np.ndarray] = field(default_factory=list)


def random_resized_crop_box(height: int, width: int, scale: Tuple[float, float],
                            ratio: Tuple[float, float], rng: np.random.Generator,
                            attempts: int = 10) -> CropBox:
    """(top, left, h, w) with area fraction drawn from ``scale``; falls back to the full image."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target_area = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(math.ceil(math.sqrt(target_area * aspect)))
        h = int(math.ceil(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def _crop_resize_2d(image: np.ndarray, box: CropBox, size: int) -> np.ndarray:
    top, left, h, w = box
    return resize_image(image, (size, size), resample=Image.BICUBIC,
                        box=(left, top, left + w, top + h))


def _pick(sizes: Sequence[int], default: int, rng: np.random.Generator) -> int:
    return int(sizes[int(rng.integers(len(sizes)))]) if sizes else default


def _as_image(x: Union[SliceImage, np.ndarray]) -> np.ndarray:
    pixels = x.pixels if isinstance(x, SliceImage) else x
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValidationError(f"Expected a 2D image, got shape {pixels.shape}")
    return pixels


def make_views_2d(image: Union[SliceImage, np.ndarray], cfg: ViewConfig, seed: int,
                  patch_size: int = 8) -> ViewBundle:
    """Global/local crops, per-global RCC masks and optional clean Gram views of one slice.

    The bundle is a pure function of (image, cfg, seed).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    clean = _as_image(image)
    augmented, applied = apply_intensity_augs(clean, cfg.aug, rng)
    c = cfg.crops
    h, w = clean.shape
    global_size = _pick(c.global_sizes, c.global_size, rng)
    local_size = _pick(c.local_sizes, c.local_size, rng)
    gram_size = _pick(c.gram_sizes, 0, rng)

    globals_, global_boxes, global_flips, gram_views = [], [], [], []
    for _ in range(c.n_globals):
        box = random_resized_crop_box(h, w, c.global_scale, c.aspect_ratio, rng)
        flip = bool(rng.random() < cfg.aug.flip_p)
        view = _crop_resize_2d(augmented, box, global_size)
        globals_.append(view[:, ::-1].copy() if flip else view)
        if gram_size:
            ref = _crop_resize_2d(clean, box, gram_size)
            gram_views.append(ref[:, ::-1].copy() if flip else ref)
        global_boxes.append(box)
        global_flips.append(flip)

    locals_, local_boxes, local_flips = [], [], []
    for _ in range(c.n_locals):
        box = random_resized_crop_box(h, w, c.local_scale, c.aspect_ratio, rng)
        flip = bool(rng.random() < cfg.aug.flip_p)
        view = _crop_resize_2d(augmented, box, local_size)
        locals_.append(view[:, ::-1].copy() if flip else view)
        local_boxes.append(box)
        local_flips.append(flip)

    grid = (global_size // patch_size,) * 2
    masks = [rcc_mask(grid, rng, cfg.masks) for _ in range(c.n_globals)]
    log = {"intensity": applied, "global_flips": global_flips, "local_flips": local_flips,
           "global_size": global_size, "local_size": local_size, "gram_size": gram_size}
    return ViewBundle(globals_, locals_, masks, seed, global_boxes, local_boxes, log, gram_views)


def pad_to_min_size(voxels: np.ndarray, size: int) -> np.ndarray:
    """Centre-pad every axis to at least ``size`` with the volume minimum."""
    pads = []
    for n in voxels.shape:
        extra = max(size - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    if not any(p for pair in pads for p in pair):
        return voxels
    return np.pad(voxels, pads, mode="constant", constant_values=float(voxels.min()))


def _random_cube(shape: Sequence[int], side: int, rng: np.random.Generator) -> Tuple[int, ...]:
    return tuple(int(rng.integers(0, n - side + 1)) for n in shape)


def _resize_cube(cube: np.ndarray, size: int) -> np.ndarray:
    if cube.shape == (size,) * 3:
        return cube.copy()
    t = torch.from_numpy(np.ascontiguousarray(cube, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size,) * 3, mode="trilinear", align_corners=False)[0, 0].numpy()


def _flip_axes(cube: np.ndarray, flips: Sequence[bool]) -> np.ndarray:
    axes = tuple(i for i, f in enumerate(flips) if f)
    return np.flip(cube, axis=axes).copy() if axes else cube


def make_views_3d(vol: Union[VolumeGrid, np.ndarray], cfg: ViewConfig, seed: int,
                  patch_size: int = 8) -> ViewBundle:
    """Global cubes at native size and resized local cubes of one canonical volume.

    Local sides are ``round(s * global_size)`` with s drawn from ``local_scale``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    voxels = np.asarray(vol.voxels if isinstance(vol, VolumeGrid) else vol, dtype=np.float32)
    if voxels.ndim != 3:
        raise ValidationError(f"Expected a 3D volume, got shape {voxels.shape}")
    c = cfg.crops
    applied: List[str] = []
    if cfg.augment_3d_intensity:
        aug, applied = apply_intensity_augs(voxels, cfg.aug, rng)
        voxels = aug.astype(np.float32)
    padded = pad_to_min_size(voxels, c.global_size)

    def draw_flips():
        return [bool(rng.random() < cfg.aug.flip_p) for _ in range(3)]

    globals_, global_boxes, global_flips = [], [], []
    for _ in range(c.n_globals):
        z, y, x = _random_cube(padded.shape, c.global_size, rng)
        s = c.global_size
        flips = draw_flips()
        globals_.append(_flip_axes(padded[z:z + s, y:y + s, x:x + s].copy(), flips))
        global_boxes.append((z, y, x, s))
        global_flips.append(flips)

    locals_, local_boxes, local_flips = [], [], []
    for _ in range(c.n_locals):
        side = max(int(round(rng.uniform(*c.local_scale) * c.global_size)), 1)
        side = min(side, min(padded.shape))
        z, y, x = _random_cube(padded.shape, side, rng)
        flips = draw_flips()
        cube = _resize_cube(padded[z:z + side, y:y + side, x:x + side], c.local_size)
        locals_.append(_flip_axes(cube, flips))
        local_boxes.append((z, y, x, side))
        local_flips.append(flips)

    grid = (c.global_size // patch_size,) * 3
    masks = [rcc_mask(grid, rng, cfg.masks) for _ in range(c.n_globals)]
    log = {"intensity": applied, "global_flips": global_flips, "local_flips": local_flips,
           "global_size": c.global_size, "local_size": c.local_size, "padded_shape": list(padded.shape)}
    return ViewBundle(globals_, locals_, masks, seed, global_boxes, local_boxes, log)


def stack_views(bundles: Sequence[ViewBundle], kind: str, index: int) -> torch.Tensor:
    """Batch one view slot across bundles as a float32 (B, 1, ...) tensor."""
    views = [getattr(b, kind)[index] for b in bundles]
    return torch.from_numpy(np.stack(views).astype(np.float32))[:, None]
