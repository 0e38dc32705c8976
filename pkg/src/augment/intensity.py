"""
Intensity augmentations for single-channel CT images.

Each transform fires with its own probability, in a fixed order, on the full
image before any geometric cropping.
"""

from dataclasses import asdict, dataclass
import logging
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from ..core.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class AugConfig:
    noise_p: float = 0.1
    noise_sigma: float = 0.1
    smooth_p: float = 0.2
    smooth_sigma: Tuple[float, float] = (0.5, 1.0)
    scale_p: float = 0.15
    scale_factor: Tuple[float, float] = (-0.25, 0.25)
    low_res_p: float = 0.25
    low_res_zoom: Tuple[float, float] = (0.5, 1.0)
    contrast_p: float = 0.1
    contrast_gamma: Tuple[float, float] = (0.7, 1.5)
    flip_p: float = 0.5

    @classmethod
    def disabled(cls) -> 'AugConfig':
        return cls(noise_p=0.0, smooth_p=0.0, scale_p=0.0, low_res_p=0.0, contrast_p=0.0, flip_p=0.0)

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if name.endswith("_p") and not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
            if isinstance(value, (tuple, list)) and (len(value) != 2 or value[0] > value[1]):
                raise ValidationError(f"{name} must be a non-empty (low, high) range, got {value}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return image + rng.normal(0.0, sigma, size=image.shape)


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=sigma, mode="nearest")


def scale_intensity(image: np.ndarray, factor: float) -> np.ndarray:
    return image * (1.0 + factor)


def simulate_low_resolution(image: np.ndarray, zoom: float) -> np.ndarray:
    """Nearest-neighbour downsample by ``zoom`` and cubic upsample back to the input shape."""
    down = ndimage.zoom(image, zoom, order=0, mode="nearest")
    factors = [s / d for s, d in zip(image.shape, down.shape)]
    up = ndimage.zoom(down, factors, order=3, mode="nearest")
    if up.shape != image.shape:
        up = up[tuple(slice(0, s) for s in image.shape)]
        up = np.pad(up, [(0, s - u) for s, u in zip(image.shape, up.shape)], mode="edge")
    return up


def adjust_contrast(image: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma on the min-max rescaled image, mapped back to the original range."""
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo
    if span < 1e-7:
        return image.copy()
    return ((image - lo) / span) ** gamma * span + lo


def apply_intensity_augs(image: np.ndarray, cfg: AugConfig,
                         rng: np.random.Generator) -> Tuple[np.ndarray, List[str]]:
    """Returns the augmented image (same shape, float64) and the names of the transforms that fired."""
    out = np.asarray(image, dtype=np.float64)
    applied = []
    if rng.random() < cfg.noise_p:
        out = gaussian_noise(out, cfg.noise_sigma, rng)
        applied.append("noise")
    if rng.random() < cfg.smooth_p:
        out = gaussian_smooth(out, rng.uniform(*cfg.smooth_sigma))
        applied.append("smooth")
    if rng.random() < cfg.scale_p:
        out = scale_intensity(out, rng.uniform(*cfg.scale_factor))
        applied.append("scale")
    if rng.random() < cfg.low_res_p:
        out = simulate_low_resolution(out, rng.uniform(*cfg.low_res_zoom))
        applied.append("low_res")
    if rng.random() < cfg.contrast_p:
        out = adjust_contrast(out, rng.uniform(*cfg.contrast_gamma))
        applied.append("contrast")
    return out, applied
