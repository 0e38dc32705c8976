"""
Tests for volume loading, QC screening, preprocessing and phantoms.
"""

from dataclasses import replace

import numpy as np
import pytest

from src.core.errors import FormatError, ValidationError
from src.volume.grid import SliceImage, Units, VolumeGrid
from src.volume.io import load_volume, read_ctv_array, save_volume, write_ctv_array
from src.volume.phantom import Ellipsoid, PhantomSpec, gen_phantom, phantom_labels, translate_spec
from src.volume.preprocess import (PrepMode, canonicalize, extract_slices, normalize,
                                   prep_volume, reorient, resampled_length)
from src.volume.qc import Verdict, qc_screen


def _hu_volume(shape, spacing=(1.0, 1.0, 1.0), seed=0, lo=-1000.0, hi=400.0):
    rng = np.random.default_rng(seed)
    return VolumeGrid(rng.uniform(lo, hi, size=shape).astype(np.float32), spacing)


# -- grid -------------------------------------------------------------------

def test_volume_grid_rejects_bad_geometry():
    with pytest.raises(ValidationError):
        VolumeGrid(np.zeros((4, 4)), (1.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        VolumeGrid(np.zeros((4, 4, 4)), (1.0, 0.0, 1.0))
    with pytest.raises(ValidationError):
        VolumeGrid(np.zeros((4, 4, 4)), (1.0, 1.0, 1.0), orientation="LLS")


def test_slice_image_shape_contract():
    with pytest.raises(ValidationError):
        SliceImage(np.zeros((128, 128)), "v", 0, (0, 0, 10, 10))
    with pytest.raises(ValidationError):
        SliceImage(np.zeros((256, 256)), "v", 0, (10, 0, 5, 10))


# -- qc ---------------------------------------------------------------------

def test_qc_rejects_too_few_slices():
    vol = _hu_volume((7, 100, 100), spacing=(5.0, 1.0, 1.0))
    report = qc_screen(vol)
    assert report.verdict is Verdict.REJECT
    assert report.rules == ["min_slices"]


def test_qc_accepts_plain_ct():
    report = qc_screen(_hu_volume((100, 100, 100)))
    assert report.accepted
    assert report.reasons == []


def test_qc_rejects_binary_mask():
    rng = np.random.default_rng(1)
    vol = VolumeGrid(rng.integers(0, 2, size=(40, 40, 40)).astype(np.float32), (1.0, 1.0, 1.0))
    report = qc_screen(vol)
    assert not report.accepted
    assert "binary_mask" in report.rules


def test_qc_rejects_constant_and_prenormalized():
    constant = VolumeGrid(np.full((20, 20, 20), 5.0, dtype=np.float32), (1.0, 1.0, 1.0))
    assert "constant" in qc_screen(constant).rules

    rng = np.random.default_rng(2)
    prenorm = VolumeGrid(np.clip(rng.normal(size=(20, 20, 20)), -4, 4).astype(np.float32), (1.0, 1.0, 1.0))
    assert "prenormalized" in qc_screen(prenorm).rules


def test_qc_rejects_coarse_inplane_and_short_extent():
    coarse = _hu_volume((20, 10, 10), spacing=(12.0, 12.0, 12.0))
    assert "inplane_spacing" in qc_screen(coarse).rules
    flat = _hu_volume((10, 100, 100), spacing=(1.0, 1.0, 1.0))
    assert "extent_ratio" in qc_screen(flat).rules


def test_qc_reject_always_has_reason_and_is_deterministic():
    vol = _hu_volume((6, 50, 50), spacing=(1.0, 12.0, 1.0))
    first, second = qc_screen(vol), qc_screen(vol)
    assert first.reasons and first.to_dict() == second.to_dict()


# -- canonicalize / normalize ------------------------------------------------

def test_canonicalize_identity_on_canonical_volume():
    vol = _hu_volume((16, 16, 16), spacing=(1.5, 1.5, 1.5))
    out = canonicalize(vol)
    assert np.allclose(out.voxels, vol.voxels, atol=1e-6)
    assert out.orientation == "LPS"


def test_resampled_length_rule():
    assert resampled_length(64, 3.0) == 127
    assert resampled_length(10, 1.5) == 10


def test_canonicalize_through_plane_resample_matches_ramp():
    ramp = np.arange(64, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), dtype=np.float32)
    vol = VolumeGrid(ramp, (3.0, 1.5, 1.5))
    out = canonicalize(vol, PrepMode.SLICE2D)
    assert out.shape == (127, 4, 4)
    assert out.spacing_mm == (1.5, 1.5, 1.5)
    expected = np.arange(127) * 0.5
    assert np.allclose(out.voxels[:, 0, 0], expected, atol=1e-5)


def test_slice2d_mode_keeps_inplane_spacing():
    vol = _hu_volume((20, 16, 16), spacing=(3.0, 0.75, 0.75))
    out = canonicalize(vol, "slice2d")
    assert out.shape[1:] == (16, 16)
    assert out.spacing_mm[1:] == (0.75, 0.75)


def test_canonicalize_clamps_and_is_idempotent():
    vol = _hu_volume((12, 12, 12), spacing=(2.0, 1.0, 1.0), hi=2500.0)
    vol.voxels[0, 0, 0] = 2500.0
    once = canonicalize(vol)
    assert once.voxels.max() <= 1000.0
    twice = canonicalize(once)
    assert np.allclose(once.voxels, twice.voxels, atol=1e-6)


def test_zero_extent_axis_cannot_be_resampled():
    vol = _hu_volume((1, 8, 8), spacing=(3.0, 1.5, 1.5))
    with pytest.raises(ValidationError):
        canonicalize(vol)


def test_reorient_flips_mirrored_axis():
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    vol = VolumeGrid(data, (1.0, 2.0, 3.0), orientation="RPS")
    out = reorient(vol)
    assert out.orientation == "LPS"
    assert np.array_equal(out.voxels, data[:, :, ::-1])
    assert out.spacing_mm == (1.0, 2.0, 3.0)


def test_normalize_moments_and_affine_invariance():
    vol = _hu_volume((10, 10, 10))
    out = normalize(vol)
    assert abs(float(out.voxels.mean())) < 1e-5
    assert abs(float(out.voxels.std()) - 1.0) < 1e-5
    assert out.units is Units.NORMALIZED

    shifted = vol.with_voxels(vol.voxels * 3.0 + 40.0)
    assert np.allclose(normalize(shifted).voxels, out.voxels, atol=1e-5)
    assert np.allclose(normalize(out).voxels, out.voxels, atol=1e-5)


def test_normalize_constant_volume_is_zero():
    vol = VolumeGrid(np.full((4, 4, 4), 7.0, dtype=np.float32), (1.0, 1.0, 1.0))
    assert not normalize(vol).voxels.any()


# -- slices -------------------------------------------------------------------

def test_extract_slices_crop_box_of_disc():
    voxels = np.full((2, 128, 128), -1000.0, dtype=np.float32)
    rows, cols = np.ogrid[:128, :128]
    voxels[0][(rows - 64) ** 2 + (cols - 64) ** 2 <= 40 ** 2] = 0.0
    vol = VolumeGrid(voxels, (1.5, 1.5, 1.5), volume_id="disc")
    slices = extract_slices(vol, hu_threshold=-500.0)
    assert len(slices) == 1  # the all-air slice is skipped
    s = slices[0]
    assert s.crop_box == (23, 23, 106, 106)
    assert s.pixels.shape == (256, 256)
    assert s.source_volume_id == "disc" and s.slice_index == 0


def test_extract_slices_keeps_largest_component_only():
    voxels = np.full((1, 64, 64), -1000.0, dtype=np.float32)
    voxels[0, 10:40, 10:40] = 0.0
    voxels[0, 50:53, 50:53] = 0.0
    slices = extract_slices(VolumeGrid(voxels, (1.5, 1.5, 1.5)))
    assert slices[0].crop_box == (9, 9, 41, 41)


def test_phantom_body_fits_crop_boxes():
    spec = PhantomSpec(grid_shape=(24, 48, 48), body=Ellipsoid((12, 24, 24), (10, 18, 20), 20.0),
                       organs=(Ellipsoid((12, 20, 24), (4, 6, 6), 60.0),))
    phantom, phantom_label_map = gen_phantom(spec), phantom_labels(spec)
    slices = extract_slices(phantom)
    assert 0 < len(slices) <= phantom.shape[0]
    for s in slices:
        r0, c0, r1, c1 = s.crop_box
        body = phantom_label_map[s.slice_index] > 0
        rows, cols = np.nonzero(body)
        assert r0 <= rows.min() and rows.max() < r1
        assert c0 <= cols.min() and cols.max() < c1
        assert r1 <= phantom.shape[1] and c1 <= phantom.shape[2]


def test_prep_volume_skips_canonicalize_on_reject():
    report, out = prep_volume(_hu_volume((4, 40, 40), spacing=(20.0, 1.0, 1.0)), PrepMode.VOLUME3D)
    assert not report.accepted and out is None


# -- phantoms -----------------------------------------------------------------

def test_phantom_is_bit_identical(phantom_spec):
    noisy = replace(phantom_spec, noise_std=5.0)
    assert np.array_equal(gen_phantom(noisy).voxels, gen_phantom(noisy).voxels)


def test_noise_free_body_only_phantom_has_two_values():
    spec = PhantomSpec(grid_shape=(32, 32, 32), body=Ellipsoid((16, 16, 16), (12, 12, 12), 0.0))
    values = np.unique(gen_phantom(spec).voxels)
    assert values.tolist() == [-1000.0, 0.0]


def test_organ_voxel_count_matches_ellipsoid_volume():
    organ = Ellipsoid((32.0, 32.0, 32.0), (10.0, 9.0, 8.0), 60.0)
    spec = PhantomSpec(grid_shape=(64, 64, 64), organs=(organ,))
    count = int((phantom_labels(spec) == 2).sum())
    expected = 4.0 / 3.0 * np.pi * 10 * 9 * 8
    assert abs(count - expected) / expected < 0.05


def test_later_layers_win_on_overlap():
    a = Ellipsoid((16, 16, 16), (6, 6, 6), 100.0)
    b = Ellipsoid((16, 16, 16), (3, 3, 3), -200.0)
    vol = gen_phantom(PhantomSpec(grid_shape=(32, 32, 32), organs=(a, b)))
    assert vol.voxels[16, 16, 16] == -200.0


def test_invalid_phantom_spec():
    with pytest.raises(ValidationError):
        gen_phantom(PhantomSpec(organs=(Ellipsoid(hu=1500.0),)))
    with pytest.raises(ValidationError):
        gen_phantom(PhantomSpec(noise_std=-1.0))


def test_translate_spec_moves_labels():
    spec = PhantomSpec(grid_shape=(32, 32, 32), body=Ellipsoid((14, 16, 16), (6, 6, 6), 0.0))
    moved = phantom_labels(translate_spec(spec, (3, 0, 0)))
    assert np.array_equal(moved[3:], phantom_labels(spec)[:-3])


# -- io ------------------------------------------------------------------------

def test_ctv_save_load(tmp_path, phantom):
    path = save_volume(tmp_path / "p.ctv", phantom)
    loaded = load_volume(path)
    assert np.array_equal(loaded.voxels, phantom.voxels)
    assert loaded.spacing_mm == phantom.spacing_mm
    assert loaded.volume_id == phantom.volume_id


def test_ctv_malformed_files(tmp_path):
    bad = tmp_path / "bad.ctv"
    bad.write_bytes(b"NOPE0000")
    with pytest.raises(FormatError):
        read_ctv_array(bad)

    path = write_ctv_array(tmp_path / "short.ctv", np.zeros((2, 2, 2)), {"spacing_mm": [1, 1, 1]})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_volume(path)


def test_ctv_without_spacing_is_format_error(tmp_path):
    path = write_ctv_array(tmp_path / "nospacing.ctv", np.zeros((2, 2, 2)), {})
    with pytest.raises(FormatError):
        load_volume(path)


def test_hu_out_of_range_is_validation_error(tmp_path):
    vol = VolumeGrid(np.full((2, 2, 2), 5000.0, dtype=np.float32), (1.0, 1.0, 1.0))
    path = save_volume(tmp_path / "hot.ctv", vol)
    with pytest.raises(ValidationError):
        load_volume(path)


def test_unknown_suffix(tmp_path):
    path = tmp_path / "volume.raw"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(FormatError):
        load_volume(path)


def test_nifti_axes_are_reversed(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(3)
    data = rng.uniform(-100, 100, size=(6, 7, 8)).astype(np.float32)
    affine = np.diag([2.0, 3.0, 4.0, 1.0])
    nib.save(nib.Nifti1Image(data, affine), str(tmp_path / "vol.nii.gz"))
    vol = load_volume(tmp_path / "vol.nii.gz")
    assert vol.shape == (8, 7, 6)
    assert vol.spacing_mm == (4.0, 3.0, 2.0)
    assert vol.orientation == "RAS"
    assert np.allclose(vol.voxels[5, 4, 3], data[3, 4, 5])
    assert vol.volume_id == "vol"
