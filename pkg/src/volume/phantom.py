"""Deterministic synthetic CT phantoms made of voxelized ellipsoids."""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ValidationError
from .grid import Units, VolumeGrid

AIR_HU = -1000.0


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid in voxel coordinates (axial, coronal, sagittal)."""
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radii: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    hu: float = 0.0

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        grids = np.ogrid[tuple(slice(0, n) for n in shape)]
        total = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
        return total <= 1.0

    def shifted(self, shift: Sequence[float]) -> 'Ellipsoid':
        return replace(self, center=tuple(c + s for c, s in zip(self.center, shift)))


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to rebuild a phantom bit for bit."""
    seed: int = 0
    grid_shape: Tuple[int, int, int] = (64, 64, 64)
    spacing_mm: Tuple[float, float, float] = (1.5, 1.5, 1.5)
    body: Ellipsoid = field(default_factory=lambda: Ellipsoid((32.0, 32.0, 32.0), (28.0, 24.0, 26.0), 0.0))
    organs: Tuple[Ellipsoid, ...] = ()
    lesion: Optional[Ellipsoid] = None
    noise_std: float = 0.0

    def validate(self) -> None:
        if len(self.grid_shape) != 3 or any(n < 1 for n in self.grid_shape):
            raise ValidationError(f"grid_shape must be 3 positive ints, got {self.grid_shape}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        for shape in self._layers():
            if any(r <= 0 for r in shape.radii):
                raise ValidationError(f"Ellipsoid radii must be positive: {shape.radii}")
        for organ in self.organs:
            if not -1000.0 <= organ.hu <= 1000.0:
                raise ValidationError(f"Organ HU {organ.hu} outside [-1000, 1000]")

    def _layers(self):
        yield self.body
        yield from self.organs
        if self.lesion is not None:
            yield self.lesion


def gen_phantom(spec: PhantomSpec) -> VolumeGrid:
    """Rasterize the spec on an air background; later shapes overwrite earlier ones."""
    spec.validate()
    shape = tuple(int(n) for n in spec.grid_shape)
    voxels = np.full(shape, AIR_HU, dtype=np.float64)
    for layer in spec._layers():
        voxels[layer.mask(shape)] = layer.hu
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        voxels += rng.normal(0.0, spec.noise_std, size=shape)
    return VolumeGrid(voxels=voxels.astype(np.float32), spacing_mm=spec.spacing_mm,
                      orientation="LPS", units=Units.HU, volume_id=f"phantom-{spec.seed}")


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    """Integer labels: 0 air, 1 body, 2.. organs in order, lesion last."""
    spec.validate()
    shape = tuple(int(n) for n in spec.grid_shape)
    labels = np.zeros(shape, dtype=np.int64)
    for value, layer in enumerate(spec._layers(), start=1):
        labels[layer.mask(shape)] = value
    return labels


def translate_spec(spec: PhantomSpec, shift: Sequence[float]) -> PhantomSpec:
    """Shift every shape by ``shift`` voxels."""
    return replace(
        spec,
        body=spec.body.shifted(shift),
        organs=tuple(o.shifted(shift) for o in spec.organs),
        lesion=spec.lesion.shifted(shift) if spec.lesion is not None else None,
    )


def random_phantom_spec(seed: int, grid_shape: Tuple[int, int, int] = (32, 64, 64),
                        with_lesion: Optional[bool] = None, noise_std: float = 10.0) -> PhantomSpec:
    """Draw a plausible torso-like phantom from a seed."""
    rng = np.random.default_rng(seed)
    d, h, w = grid_shape
    center = (d / 2, h / 2 + rng.uniform(-2, 2), w / 2 + rng.uniform(-2, 2))
    body = Ellipsoid(center, (d * 0.45, h * rng.uniform(0.32, 0.4), w * rng.uniform(0.36, 0.44)),
                     float(rng.uniform(-50, 50)))
    organs = []
    for hu in (float(rng.uniform(30, 80)), float(rng.uniform(-900, -700))):
        oc = tuple(c + rng.uniform(-0.25, 0.25) * r for c, r in zip(center, body.radii))
        organs.append(Ellipsoid(oc, tuple(r * rng.uniform(0.25, 0.4) for r in body.radii), hu))
    if with_lesion is None:
        with_lesion = bool(rng.random() < 0.5)
    lesion = None
    if with_lesion:
        lc = tuple(c + rng.uniform(-0.3, 0.3) * r for c, r in zip(center, body.radii))
        lesion = Ellipsoid(lc, tuple(float(rng.uniform(3, 5)) for _ in range(3)), float(rng.uniform(500, 800)))
    return PhantomSpec(seed=seed, grid_shape=grid_shape, body=body, organs=tuple(organs),
                       lesion=lesion, noise_std=noise_std)
