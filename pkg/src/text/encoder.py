"""
Text encoders behind a small interface.

``ToyTextEncoder`` hashes character trigrams into a fixed vocabulary and
sums a seeded random embedding per trigram, so equal texts always map to
equal vectors and the empty text maps to zero. A pretrained transformer
encoder can implement the same interface without touching callers.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
import functools
import hashlib
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn

from ..core.errors import ValidationError


@dataclass
class TextConfig:
    dim: int = 256
    proj_dim: int = 1024
    vocab: int = 4096
    max_len_train: int = 512
    max_len_inference: int = 768
    seed: int = 0

    @classmethod
    def preset(cls, name: str) -> 'TextConfig':
        if name == "full":
            return cls()
        if name == "toy":
            return cls(dim=64, proj_dim=32)
        raise ValidationError(f"Unknown text preset: {name!r}")


class TextEncoderInterface(ABC):
    """tokenize -> left-padded ids; encode -> one feature row per text."""

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def tokenize(self, text: str, max_len: int) -> torch.Tensor:
        ...

    @abstractmethod
    def encode(self, texts: Union[str, Sequence[str]], max_len: Optional[int] = None) -> torch.Tensor:
        ...


def trigram_ids(text: str, vocab: int) -> List[int]:
    """Hashed character trigrams in reading order; ids start at 1 (0 is padding)."""
    if not text:
        return []
    padded = f"  {text.lower()} "
    ids = []
    for i in range(len(padded) - 2):
        digest = hashlib.blake2b(padded[i:i + 3].encode("utf-8"), digest_size=4).digest()
        ids.append(int.from_bytes(digest, "little") % vocab + 1)
    return ids


class ToyTextEncoder(nn.Module, TextEncoderInterface):
    def __init__(self, cfg: Optional[TextConfig] = None, trainable: bool = False):
        super().__init__()
        self.cfg = cfg or TextConfig()
        self.bag = nn.EmbeddingBag(self.cfg.vocab + 1, self.cfg.dim, mode="sum", padding_idx=0)
        gen = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            self.bag.weight.copy_(torch.randn(self.cfg.vocab + 1, self.cfg.dim, generator=gen)
                                  / self.cfg.dim ** 0.5)
            self.bag.weight[0].zero_()
        self.bag.weight.requires_grad_(trainable)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def tokenize(self, text: str, max_len: int) -> torch.Tensor:
        """First ``max_len`` trigram ids, left-padded with 0 to ``max_len``."""
        if max_len < 1:
            raise ValidationError(f"max_len must be >= 1, got {max_len}")
        ids = trigram_ids(text, self.cfg.vocab)[:max_len]
        return torch.tensor([0] * (max_len - len(ids)) + ids, dtype=torch.long)

    def encode(self, texts: Union[str, Sequence[str]], max_len: Optional[int] = None) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        max_len = max_len or self.cfg.max_len_train
        if not texts:
            return torch.zeros(0, self.dim)
        ids = torch.stack([self.tokenize(t, max_len) for t in texts])
        return self.bag(ids.to(self.bag.weight.device))

    def forward(self, texts, max_len=None):
        return self.encode(texts, max_len)


@functools.lru_cache(maxsize=4)
def _default_encoder(dim: int, seed: int) -> ToyTextEncoder:
    return ToyTextEncoder(TextConfig(dim=dim, seed=seed))


def toy_encode(text: str, dim: int = 64, seed: int = 0) -> torch.Tensor:
    """d-dim trigram-bag embedding of a single text."""
    with torch.no_grad():
        return _default_encoder(dim, seed).encode([text])[0].clone()
