"""
Tests for multi-crop views, intensity augmentations and RCC masking.
"""

from dataclasses import replace

import numpy as np
import pytest

from src.augment.intensity import AugConfig, adjust_contrast, apply_intensity_augs
from src.augment.masking import MaskConfig, rcc_mask, rcc_mask_2d, rcc_mask_3d
from src.augment.views import (CropConfig, ViewConfig, _flip_axes, make_views_2d, make_views_3d,
                               pad_to_min_size, random_resized_crop_box, stack_views)
from src.core.errors import ValidationError


def _image(size=64, seed=0):
    return np.random.default_rng(seed).normal(size=(size, size))


def _toy_view_config(dim="2d", **aug):
    return ViewConfig(aug=AugConfig(**aug), crops=CropConfig.preset(f"toy{dim}"))


# -- intensity -----------------------------------------------------------------

def test_intensity_augs_preserve_shape():
    cfg = AugConfig(noise_p=1, smooth_p=1, scale_p=1, low_res_p=1, contrast_p=1)
    out, applied = apply_intensity_augs(_image(30), cfg, np.random.default_rng(0))
    assert out.shape == (30, 30)
    assert applied == ["noise", "smooth", "scale", "low_res", "contrast"]


def test_disabled_augs_are_identity():
    image = _image()
    out, applied = apply_intensity_augs(image, AugConfig.disabled(), np.random.default_rng(0))
    assert applied == [] and np.array_equal(out, image)


@pytest.mark.parametrize('name,p', [("noise", 0.1), ("smooth", 0.2), ("scale", 0.15),
                                    ("low_res", 0.25), ("contrast", 0.1)])
def test_augmentation_rates_match_configuration(name, p):
    n = 2000
    cfg = AugConfig()
    image = _image(8)
    fired = sum(name in apply_intensity_augs(image, cfg, np.random.default_rng(seed))[1]
                for seed in range(n))
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(fired - n * p) <= 3 * sigma


def test_contrast_keeps_range_and_constant_images():
    image = _image()
    out = adjust_contrast(image, 1.3)
    assert np.isclose(out.min(), image.min()) and np.isclose(out.max(), image.max())
    flat = np.full((4, 4), 2.0)
    assert np.array_equal(adjust_contrast(flat, 0.7), flat)


def test_aug_config_validation():
    with pytest.raises(ValidationError):
        AugConfig(noise_p=1.5).validate()
    with pytest.raises(ValidationError):
        AugConfig(smooth_sigma=(1.0, 0.5)).validate()
    with pytest.raises(ValidationError):
        CropConfig.preset("4d")
    with pytest.raises(ValidationError):
        CropConfig(global_scale=(0.0, 1.0)).validate()


# -- 2D views --------------------------------------------------------------------

def test_global_crop_area_fraction_over_seeds():
    for seed in range(1000):
        top, left, h, w = random_resized_crop_box(256, 256, (0.32, 1.0), (3 / 4, 4 / 3),
                                                  np.random.default_rng(seed))
        frac = h * w / 256 ** 2
        assert 0.32 <= frac <= 1.0
        assert 0 <= top and top + h <= 256 and 0 <= left and left + w <= 256


def test_views_2d_are_deterministic_per_seed():
    cfg = _toy_view_config()
    a = make_views_2d(_image(), cfg, seed=5)
    b = make_views_2d(_image(), cfg, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.globals + a.locals, b.globals + b.locals))
    assert all(np.array_equal(x.mask, y.mask) for x, y in zip(a.masks, b.masks))
    assert a.aug_log == b.aug_log and a.rng_seed == 5


def test_views_2d_sizes_and_counts():
    bundle = make_views_2d(_image(), _toy_view_config(), seed=1)
    assert len(bundle.globals) == 2 and len(bundle.locals) == 8
    assert all(v.shape == (64, 64) for v in bundle.globals)
    assert all(v.shape == (32, 32) for v in bundle.locals)
    assert [m.mask.shape for m in bundle.masks] == [(8, 8), (8, 8)]
    assert bundle.gram_views == []


def test_identity_configuration_reproduces_input():
    crops = replace(CropConfig.preset("toy2d"), n_locals=0, global_scale=(1.0, 1.0), aspect_ratio=(1.0, 1.0))
    cfg = ViewConfig(aug=AugConfig.disabled(), crops=crops)
    image = _image()
    bundle = make_views_2d(image, cfg, seed=3)
    for view in bundle.globals:
        assert np.allclose(view, image, atol=1e-5)


def test_highres_bundles_draw_sizes_and_gram_views():
    cfg = ViewConfig(aug=AugConfig.disabled(), crops=CropConfig.preset("toy_highres"))
    bundle = make_views_2d(_image(128), cfg, seed=2)
    g, loc, gram = (bundle.aug_log[k] for k in ("global_size", "local_size", "gram_size"))
    assert g in (64, 80, 96) and loc in (32, 48) and gram in (48, 64)
    assert all(v.shape == (g, g) for v in bundle.globals)
    assert len(bundle.gram_views) == 2 and bundle.gram_views[0].shape == (gram, gram)


def test_stack_views_batches_slot():
    cfg = _toy_view_config()
    bundles = [make_views_2d(_image(seed=s), cfg, seed=s) for s in range(3)]
    assert stack_views(bundles, "globals", 1).shape == (3, 1, 64, 64)
    assert stack_views(bundles, "locals", 7).shape == (3, 1, 32, 32)


# -- 3D views --------------------------------------------------------------------

def test_undersized_volume_is_min_padded():
    rng = np.random.default_rng(0)
    vol = rng.uniform(-800, 600, size=(100, 100, 100)).astype(np.float32)
    padded = pad_to_min_size(vol, 160)
    assert padded.shape == (160, 160, 160)
    assert padded[0, 0, 0] == vol.min()
    assert np.array_equal(padded[30:130, 30:130, 30:130], vol)


def test_views_3d_shapes_and_local_scale():
    vol = np.random.default_rng(1).normal(size=(20, 40, 40)).astype(np.float32)
    bundle = make_views_3d(vol, _toy_view_config("3d"), seed=4)
    assert bundle.aug_log["padded_shape"] == [32, 40, 40]
    assert len(bundle.globals) == 2 and all(v.shape == (32, 32, 32) for v in bundle.globals)
    assert len(bundle.locals) == 8 and all(v.shape == (16, 16, 16) for v in bundle.locals)
    for *_, side in bundle.local_boxes:
        assert 0.1875 <= side / 32 <= 0.5
    assert [m.mask.shape for m in bundle.masks] == [(4, 4, 4)] * 2


def test_phase3_volume_bundle_has_one_global():
    cfg = ViewConfig(crops=CropConfig.preset("toy3d_phase3"))
    bundle = make_views_3d(np.zeros((32, 32, 32), dtype=np.float32) + np.arange(32)[:, None, None],
                           cfg, seed=0)
    assert len(bundle.globals) == 1 and len(bundle.masks) == 1


def test_flips_are_involutions():
    cube = np.random.default_rng(2).normal(size=(5, 6, 7))
    flips = [True, False, True]
    assert np.array_equal(_flip_axes(_flip_axes(cube, flips), flips), cube)


def test_views_3d_deterministic():
    vol = np.random.default_rng(3).normal(size=(32, 32, 32)).astype(np.float32)
    cfg = _toy_view_config("3d")
    a, b = make_views_3d(vol, cfg, seed=9), make_views_3d(vol, cfg, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a.locals, b.locals))
    assert a.global_boxes == b.global_boxes


# -- RCC masking -----------------------------------------------------------------

def test_gate_off_gives_empty_mask():
    m = rcc_mask((16, 16), np.random.default_rng(0), MaskConfig(gate_p=0.0))
    assert not m.active and m.n_masked == 0


def test_zero_ratio_gives_empty_active_mask():
    m = rcc_mask((10, 10, 10), np.random.default_rng(0), MaskConfig(gate_p=1.0, ratio=(0.0, 0.0)))
    assert m.active and m.n_masked == 0


def test_2d_ratio_and_rectangle_union_over_seeds():
    cfg = MaskConfig(gate_p=1.0)
    for seed in range(1000):
        m = rcc_mask_2d((16, 16), np.random.default_rng(seed), cfg)
        assert 0.1 <= m.target_ratio <= 0.5
        assert abs(m.n_masked - m.target_ratio * 256) <= 1
        assert np.array_equal(m.boxes_union(), m.mask)


def test_3d_ratio_and_cuboid_union_over_seeds():
    cfg = MaskConfig(gate_p=1.0)
    for seed in range(300):
        m = rcc_mask_3d((10, 10, 10), np.random.default_rng(seed), cfg)
        assert abs(m.n_masked - m.target_ratio * 1000) <= 1
        assert np.array_equal(m.boxes_union(), m.mask)


def test_gate_probability_is_one_half():
    n = 2000
    active = sum(rcc_mask((6, 6), np.random.default_rng(seed)).active for seed in range(n))
    assert abs(active / n - 0.5) <= 0.05


def test_rcc_grid_errors():
    with pytest.raises(ValidationError):
        rcc_mask((2, 8), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        rcc_mask_2d((4, 4, 4), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        rcc_mask_3d((4, 4), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        MaskConfig(ratio=(0.6, 0.2)).validate()
