"""
Frozen-backbone feature extraction and an on-disk feature cache.

A cache is bound to the fingerprint of the backbone that produced it; loading
it against a different backbone drops every entry.
"""

from concurrent.futures import ThreadPoolExecutor
import hashlib
import logging
from pathlib import Path
import threading
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from ..core.compression import CompressionLike, CompressionType
from ..core.container import ContainerKind, TensorContainer
from ..core.errors import ValidationError
from ..models.vit import FlexiViT
from ..volume.preprocess import normalize_array

logger = logging.getLogger(__name__)

EncodeFn = Callable[[np.ndarray], np.ndarray]


def model_fingerprint(model: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and float32 bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


@torch.no_grad()
def embed_features(backbone: FlexiViT, image: np.ndarray, runtime_patch: Optional[int] = None,
                   slicewise: bool = False) -> np.ndarray:
    """concat(CLS, patch mean) of one image or volume.

    With ``slicewise`` a (S, H, W) stack goes through the 2D path one slice at a
    time and the result is (S, 2D).
    """
    backbone.eval()
    array = np.asarray(image)
    if slicewise:
        if array.ndim != 3:
            raise ValidationError(f"Slice-wise embedding needs (S, H, W), got {array.shape}")
        x = torch.from_numpy(np.stack([normalize_array(s) for s in array])[:, None])
    else:
        x = torch.from_numpy(normalize_array(array)[None, None])
    out = backbone(x, runtime_patch=runtime_patch)
    feats = torch.cat((out.cls, out.patch_mean), dim=-1).numpy().astype(np.float32)
    return feats if slicewise else feats[0]


class FeatureCache:
    """Sample id -> feature array, guarded by a lock for concurrent population."""

    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        self._store: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._store

    def ids(self) -> List[str]:
        return sorted(self._store)

    def get(self, sample_id: str) -> Optional[np.ndarray]:
        return self._store.get(sample_id)

    def put(self, sample_id: str, features: np.ndarray) -> None:
        with self._lock:
            self._store[sample_id] = np.asarray(features, dtype=np.float32)

    def clear(self) -> None:
        with self._lock:
            self._store.clear()

    def rebind(self, fingerprint: str) -> bool:
        """Switch to a new backbone fingerprint; returns True if entries were dropped."""
        if fingerprint == self.fingerprint:
            return False
        dropped = len(self)
        self.clear()
        self.fingerprint = fingerprint
        if dropped:
            logger.warning("Backbone changed; invalidated %d cached feature entries", dropped)
        return True

    def populate(self, samples: Mapping[str, np.ndarray], encode: EncodeFn,
                 max_workers: int = 4) -> int:
        """Encode every sample missing from the cache; returns how many were added."""
        missing = [sid for sid in samples if sid not in self]
        if not missing:
            return 0

        def work(sid: str) -> None:
            self.put(sid, encode(samples[sid]))

        if max_workers <= 1:
            for sid in missing:
                work(sid)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(work, missing))
        logger.info("Cached features for %d samples (%d total)", len(missing), len(self))
        return len(missing)

    def stack(self, ids: Sequence[str]) -> List[np.ndarray]:
        missing = [sid for sid in ids if sid not in self]
        if missing:
            raise ValidationError(f"{len(missing)} ids are not cached, e.g. {missing[:3]}")
        return [self._store[sid] for sid in ids]

    def to_container(self) -> TensorContainer:
        return TensorContainer(kind=ContainerKind.FEATURES,
                               tensors={sid: self._store[sid] for sid in self.ids()},
                               meta={"fingerprint": self.fingerprint, "n_samples": len(self)})

    def save(self, path: Union[str, Path], compression: CompressionLike = CompressionType.NONE) -> Path:
        return self.to_container().save(path, compression)

    @classmethod
    def load(cls, path: Union[str, Path], fingerprint: Optional[str] = None) -> 'FeatureCache':
        """Load a cache; a mismatching ``fingerprint`` yields an empty cache bound to it."""
        container = TensorContainer.load(path, ContainerKind.FEATURES)
        cache = cls(str(container.meta.get("fingerprint", "")))
        for sid, arr in container.tensors.items():
            cache._store[sid] = arr
        if fingerprint is not None:
            cache.rebind(fingerprint)
        return cache


def backbone_encoder(backbone: FlexiViT, runtime_patch: Optional[int] = None,
                     slicewise: bool = False) -> EncodeFn:
    # one forward pass at a time; the backbone is shared across worker threads
    lock = threading.Lock()

    def encode(array: np.ndarray) -> np.ndarray:
        with lock:
            return embed_features(backbone, array, runtime_patch, slicewise)

    return encode


def cache_for(backbone: FlexiViT, samples: Mapping[str, np.ndarray], runtime_patch: Optional[int] = None,
              slicewise: bool = False, path: Optional[Union[str, Path]] = None,
              max_workers: int = 4) -> FeatureCache:
    """Load (if ``path`` exists), top up and re-save the cache for ``backbone``."""
    fingerprint = model_fingerprint(backbone)
    if path is not None and Path(path).exists():
        cache = FeatureCache.load(path, fingerprint)
    else:
        cache = FeatureCache(fingerprint)
    added = cache.populate(samples, backbone_encoder(backbone, runtime_patch, slicewise), max_workers)
    if path is not None and added:
        cache.save(path)
    return cache
