"""PCA reduction of dense feature volumes, fitted once and reused across cases."""

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from sklearn.decomposition import PCA

from ..core.container import ContainerKind, TensorContainer
from ..core.errors import FormatError, ValidationError
from .features import FeatureVolume

logger = logging.getLogger(__name__)

N_COMPONENTS = 24


@dataclass
class PCAReducer:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def to_container(self) -> TensorContainer:
        return TensorContainer(kind=ContainerKind.FEATURES,
                               tensors={"mean": self.mean, "components": self.components,
                                        "explained_variance": self.explained_variance},
                               meta={"type": "pca_reducer", "n_components": self.n_components})

    def save(self, path: Union[str, Path]) -> Path:
        return self.to_container().save(path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'PCAReducer':
        container = TensorContainer.load(path, ContainerKind.FEATURES)
        if container.meta.get("type") != "pca_reducer":
            raise FormatError(f"{path} does not hold a PCA reducer")
        t = container.tensors
        return cls(t["mean"].astype(np.float64), t["components"].astype(np.float64),
                   t["explained_variance"].astype(np.float64))


def _stack(features: Union[FeatureVolume, np.ndarray, Sequence[FeatureVolume]]) -> np.ndarray:
    if isinstance(features, FeatureVolume):
        return features.vectors().astype(np.float64)
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    return np.concatenate([f.vectors() for f in features], axis=0).astype(np.float64)


def fit_pca(features: Union[FeatureVolume, np.ndarray, Sequence[FeatureVolume]],
            n_components: int = N_COMPONENTS, seed: int = 0) -> PCAReducer:
    """Top principal directions of the pooled feature vectors.

    Raises:
        ValidationError: If the data cannot have rank ``n_components`` (too few
            vectors or channels); the message carries the attainable rank
    """
    x = _stack(features)
    if x.ndim != 2:
        raise ValidationError(f"Feature vectors must be (n, C), got {x.shape}")
    rank = min(x.shape[0] - 1, x.shape[1])
    if rank < n_components:
        raise ValidationError(
            f"PCA needs rank >= {n_components}; {x.shape[0]} vectors of width {x.shape[1]} give rank {rank}")
    pca = PCA(n_components=n_components, svd_solver="full", random_state=seed).fit(x)
    logger.info("PCA keeps %.1f%% of the feature variance in %d components",
                100 * float(pca.explained_variance_ratio_.sum()), n_components)
    return PCAReducer(pca.mean_.astype(np.float64), pca.components_.astype(np.float64),
                      pca.explained_variance_.astype(np.float64))


def reduce(features: FeatureVolume, reducer: PCAReducer) -> FeatureVolume:
    """Centre and project every voxel onto the reducer components."""
    if features.channels != reducer.mean.size:
        raise ValidationError(f"Features have {features.channels} channels, reducer expects {reducer.mean.size}")
    flat = features.data.reshape(features.channels, -1).astype(np.float64)
    out = reducer.components @ (flat - reducer.mean[:, None])
    return FeatureVolume(out.reshape(reducer.n_components, *features.grid_shape),
                         features.patch_size, features.image_shape)
