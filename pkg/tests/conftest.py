"""Shared fixtures: toy backbones and small synthetic phantoms."""

import numpy as np
import pytest
import torch

from src.models.vit import BackboneConfig, FlexiViT
from src.volume.phantom import gen_phantom, phantom_labels, random_phantom_spec


def make_toy_backbone(seed: int = 0, **overrides) -> FlexiViT:
    torch.manual_seed(seed)
    cfg = BackboneConfig.preset("toy")
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return FlexiViT(cfg).eval()


@pytest.fixture
def toy_backbone():
    return make_toy_backbone(drop_path=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def phantom_spec():
    return random_phantom_spec(7, grid_shape=(16, 32, 32), with_lesion=True, noise_std=0.0)


@pytest.fixture
def phantom(phantom_spec):
    return gen_phantom(phantom_spec)


@pytest.fixture
def phantom_label_map(phantom_spec):
    return phantom_labels(phantom_spec)


@pytest.fixture
def backbone_factory():
    return make_toy_backbone
