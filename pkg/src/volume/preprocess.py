"""Canonical orientation, resampling, clamping, normalization and slice extraction."""

from enum import Enum
import logging
import math
from typing import List, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from ..core.errors import ValidationError
from .grid import (AXIS_LETTERS, CANONICAL_ORIENTATION, SLICE_SIZE, SliceImage, Units,
                   VolumeGrid, validate_orientation)

logger = logging.getLogger(__name__)

TARGET_SPACING_MM = 1.5
HU_CLAMP = (-1000.0, 1000.0)
DEFAULT_BODY_THRESHOLD_HU = -500.0


class PrepMode(str, Enum):
    SLICE2D = "slice2d"
    VOLUME3D = "volume3d"


def reorient(vol: VolumeGrid, target: str = CANONICAL_ORIENTATION) -> VolumeGrid:
    """Permute and flip array axes so the orientation code becomes ``target``."""
    source = vol.orientation
    target = validate_orientation(target)
    if source == target:
        return vol

    # world position -> array axis is (2 - position)
    perm = [0, 0, 0]
    flips = []
    for t_pos, t_letter in enumerate(target):
        s_pos = next(i for i, c in enumerate(source) if AXIS_LETTERS[c] == AXIS_LETTERS[t_letter])
        perm[2 - t_pos] = 2 - s_pos
        if source[s_pos] != t_letter:
            flips.append(2 - t_pos)
    voxels = np.transpose(vol.voxels, perm)
    if flips:
        voxels = np.flip(voxels, axis=tuple(flips))
    spacing = tuple(vol.spacing_mm[p] for p in perm)
    return vol.with_voxels(np.ascontiguousarray(voxels), spacing_mm=spacing, orientation=target)


def resampled_length(n: int, spacing: float, new_spacing: float = TARGET_SPACING_MM) -> int:
    """Endpoint-inclusive sample count: round(extent / new_spacing) + 1, halves rounded up."""
    extent = (n - 1) * spacing
    return int(math.floor(extent / new_spacing + 0.5)) + 1


def _resample_axis(arr: np.ndarray, axis: int, spacing: float, new_spacing: float) -> np.ndarray:
    n = arr.shape[axis]
    if n < 2:
        raise ValidationError(f"Zero-extent axis {axis} cannot be resampled")
    new_n = resampled_length(n, spacing, new_spacing)
    positions = np.minimum(np.arange(new_n) * (new_spacing / spacing), n - 1)
    i0 = np.floor(positions).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w = positions - i0
    shape = [1] * arr.ndim
    shape[axis] = new_n
    w = w.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - w) + np.take(arr, i1, axis=axis) * w


def canonicalize(vol: VolumeGrid, mode: PrepMode = PrepMode.VOLUME3D) -> VolumeGrid:
    """Reorient to LPS, resample to 1.5 mm (through-plane only in slice2d mode), clamp HU.

    Raises:
        ValidationError: If a resampled axis has zero extent
    """
    mode = PrepMode(mode)
    vol = reorient(vol)
    arr = np.asarray(vol.voxels, dtype=np.float64)
    spacing = list(vol.spacing_mm)
    axes = (0,) if mode is PrepMode.SLICE2D else (0, 1, 2)
    for axis in axes:
        if abs(spacing[axis] - TARGET_SPACING_MM) < 1e-9:
            continue
        arr = _resample_axis(arr, axis, spacing[axis], TARGET_SPACING_MM)
        spacing[axis] = TARGET_SPACING_MM
    arr = np.clip(arr, *HU_CLAMP)
    return vol.with_voxels(arr.astype(np.float32), spacing_mm=tuple(spacing))


def normalize(vol: VolumeGrid) -> VolumeGrid:
    """Zero mean, unit std per volume; degenerate (std < 1e-8) volumes become zeros."""
    arr = np.asarray(vol.voxels, dtype=np.float64)
    std = arr.std()
    if std < 1e-8:
        out = np.zeros_like(arr)
    else:
        out = (arr - arr.mean()) / std
    return vol.with_voxels(out.astype(np.float32), units=Units.NORMALIZED)


def normalize_array(arr: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit std used at training time."""
    arr = np.asarray(arr, dtype=np.float64)
    std = arr.std()
    if std < 1e-8:
        return np.zeros(arr.shape, dtype=np.float32)
    return ((arr - arr.mean()) / std).astype(np.float32)


def resize_image(image: np.ndarray, size: Tuple[int, int], resample=Image.BILINEAR,
                 box: Tuple[float, float, float, float] = None) -> np.ndarray:
    """Resize a float image with Pillow's 32-bit float mode.

    Args:
        image: 2D array
        size: (height, width) of the output
        resample: Pillow filter
        box: optional (left, upper, right, lower) source region
    """
    img = Image.fromarray(np.ascontiguousarray(image, dtype=np.float32))
    out = img.resize((int(size[1]), int(size[0])), resample=resample, box=box)
    return np.asarray(out, dtype=np.float32)


def body_crop_box(pixels: np.ndarray, hu_threshold: float) -> Tuple[int, int, int, int]:
    """Bounding box (+1 px margin) of the largest 8-connected foreground component.

    Returns None when the slice has no foreground.
    """
    foreground = pixels > hu_threshold
    labels, n = ndimage.label(foreground, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    rows, cols = np.nonzero(labels == int(sizes.argmax()))
    h, w = pixels.shape
    return (max(int(rows.min()) - 1, 0), max(int(cols.min()) - 1, 0),
            min(int(rows.max()) + 2, h), min(int(cols.max()) + 2, w))


def extract_slices(vol: VolumeGrid, hu_threshold: float = DEFAULT_BODY_THRESHOLD_HU,
                   output_size: int = SLICE_SIZE) -> List[SliceImage]:
    """Body-cropped axial slices resized to 256x256; empty slices are skipped."""
    slices = []
    for index in range(vol.shape[0]):
        pixels = np.asarray(vol.voxels[index], dtype=np.float32)
        box = body_crop_box(pixels, hu_threshold)
        if box is None:
            continue
        r0, c0, r1, c1 = box
        resized = resize_image(pixels[r0:r1, c0:c1], (output_size, output_size))
        slices.append(SliceImage(pixels=resized, source_volume_id=vol.volume_id,
                                 slice_index=index, crop_box=box))
    logger.info("Extracted %d/%d slices from %s", len(slices), vol.shape[0], vol.volume_id)
    return slices


def prep_volume(vol: VolumeGrid, mode: PrepMode):
    """QC, then canonicalize; returns (report, canonical volume or None)."""
    from .qc import qc_screen

    report = qc_screen(vol)
    if not report.accepted:
        return report, None
    return report, canonicalize(vol, mode)
