"""Volume and slice containers."""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Tuple

import numpy as np

from ..core.errors import ValidationError

# Axis letter -> world axis index (x, y, z) and its opposite
AXIS_LETTERS = {'L': 0, 'R': 0, 'P': 1, 'A': 1, 'S': 2, 'I': 2}
OPPOSITE = {'L': 'R', 'R': 'L', 'P': 'A', 'A': 'P', 'S': 'I', 'I': 'S'}
CANONICAL_ORIENTATION = "LPS"
SLICE_SIZE = 256


class Units(str, Enum):
    """Intensity unit flag."""
    HU = "HU"
    NORMALIZED = "normalized"


def validate_orientation(code: str) -> str:
    """Check an ITK-style orientation code.

    The code names, for the world axes (x, y, z), the direction towards which
    the matching array index grows. Voxels are stored axial-first, so letter
    ``i`` describes array axis ``2 - i``.

    Raises:
        ValidationError: If the code is not a permutation of one letter per axis pair
    """
    code = code.upper()
    if len(code) != 3 or any(c not in AXIS_LETTERS for c in code):
        raise ValidationError(f"Invalid orientation code: {code!r}")
    if sorted(AXIS_LETTERS[c] for c in code) != [0, 1, 2]:
        raise ValidationError(f"Orientation code {code!r} repeats an axis")
    return code


@dataclass
class VolumeGrid:
    """3D voxel array (axial x coronal x sagittal) with geometry metadata."""
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float]
    orientation: str = CANONICAL_ORIENTATION
    units: Units = Units.HU
    volume_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValidationError(f"Volume must be rank 3, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(not s > 0 for s in self.spacing_mm):
            raise ValidationError(f"Spacing must be 3 positive values, got {self.spacing_mm}")
        self.orientation = validate_orientation(self.orientation)
        self.units = Units(self.units)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def extent_mm(self) -> Tuple[float, float, float]:
        """Physical size per axis (samples x spacing)."""
        return tuple(n * s for n, s in zip(self.voxels.shape, self.spacing_mm))

    def with_voxels(self, voxels: np.ndarray, **changes) -> 'VolumeGrid':
        return replace(self, voxels=voxels, **changes)


@dataclass
class SliceImage:
    """A body-cropped axial slice resampled to 256x256."""
    pixels: np.ndarray
    source_volume_id: str
    slice_index: int
    crop_box: Tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (SLICE_SIZE, SLICE_SIZE):
            raise ValidationError(f"Slice must be {SLICE_SIZE}x{SLICE_SIZE}, got {self.pixels.shape}")
        if self.slice_index < 0:
            raise ValidationError(f"slice_index must be >= 0, got {self.slice_index}")
        r0, c0, r1, c1 = (int(v) for v in self.crop_box)
        if not (0 <= r0 < r1 and 0 <= c0 < c1):
            raise ValidationError(f"Invalid crop box {self.crop_box}")
        self.crop_box = (r0, c0, r1, c1)
