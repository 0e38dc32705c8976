"""
Tests for flexible patch embedding: resample matrices, pseudoinverse kernels
and 2D -> 3D inflation.
"""

import threading

import numpy as np
import pytest
import torch

from src.core.errors import ValidationError
from src.models.flexi_embed import (PatchEmbedND, PatchKernel, ResampleMethod, build_resample_matrix,
                                    embed, inflate_to_3d, method_for, resample_kernel)
from src.models.kernel_cache import KernelCache


def _kernel(ndim=2, patch=8, embed_dim=6, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return PatchKernel(torch.randn(embed_dim, 1, *([patch] * ndim), generator=g, dtype=dtype), patch)


def _resize_patch(x: np.ndarray, R) -> np.ndarray:
    return (R.entries @ x.reshape(-1)).reshape([R.target] * R.ndim)


# -- resample matrices ---------------------------------------------------------

@pytest.mark.parametrize('method', list(ResampleMethod))
def test_equal_sizes_give_identity(method):
    R = build_resample_matrix(8, 8, method, ndim=2)
    assert np.array_equal(R.entries, np.eye(64))


def test_nearest_one_to_two_is_ones_column():
    R = build_resample_matrix(1, 2, "nearest")
    assert np.array_equal(R.entries, np.ones((2, 1)))


@pytest.mark.parametrize('base,target', [(2, 4), (3, 7), (8, 16), (8, 5), (16, 8)])
def test_linear_rows_sum_to_one(base, target):
    R = build_resample_matrix(base, target, "linear")
    assert np.allclose(R.entries.sum(axis=1), 1.0, atol=1e-12)


def test_kronecker_shape_and_pseudoinverse_axiom():
    R = build_resample_matrix(2, 4, ResampleMethod.LINEAR, ndim=2)
    M = R.entries
    assert M.shape == (16, 4)
    assert np.linalg.matrix_rank(M) == 4
    assert np.allclose(M @ np.linalg.pinv(M) @ M, M, atol=1e-10)


@pytest.mark.parametrize('base,target', [(0, 4), (4, 0)])
def test_non_positive_sizes_rejected(base, target):
    with pytest.raises(ValidationError):
        build_resample_matrix(base, target, "linear")


def test_unknown_method_rejected():
    with pytest.raises(ValidationError):
        build_resample_matrix(2, 4, "lanczos")


def test_method_dispatch():
    assert method_for(2) is ResampleMethod.BICUBIC
    assert method_for(3) is ResampleMethod.TRILINEAR


# -- resample_kernel -------------------------------------------------------------

def test_identity_resample_keeps_weights_bitwise():
    k = _kernel()
    out = resample_kernel(k, build_resample_matrix(8, 8, "bicubic", ndim=2))
    assert torch.equal(out.weights, k.weights)


def test_linear_upsampling_preserves_tokens():
    k = _kernel(ndim=2, patch=2, embed_dim=3)
    R = build_resample_matrix(2, 4, "linear", ndim=2)
    k2 = resample_kernel(k, R)
    rng = np.random.default_rng(0)
    w = k.weights.reshape(3, -1).numpy()
    w2 = k2.weights.reshape(3, -1).numpy()
    for _ in range(100):
        x = rng.normal(size=(2, 2))
        diff = w2 @ _resize_patch(x, R).reshape(-1) - w @ x.reshape(-1)
        assert np.abs(diff).max() < 1e-10


@pytest.mark.parametrize('ndim,target', [(2, 16), (3, 16), (2, 12)])
def test_embedding_a_resized_image_matches_base_tokens(ndim, target):
    k = _kernel(ndim=ndim)
    R = build_resample_matrix(8, target, method_for(ndim), ndim=ndim)
    x = np.random.default_rng(1).normal(size=[8] * ndim)
    base = embed(torch.from_numpy(x)[None, None], k)
    resized = embed(torch.from_numpy(_resize_patch(x, R))[None, None], k, runtime_patch=target)
    assert torch.allclose(base, resized, atol=1e-8)


def test_resample_kernel_shape_mismatch():
    k = _kernel(patch=8)
    with pytest.raises(ValidationError):
        resample_kernel(k, build_resample_matrix(4, 8, "bicubic", ndim=2))
    with pytest.raises(ValidationError):
        resample_kernel(k, build_resample_matrix(8, 16, "trilinear", ndim=3))


def test_gradients_reach_base_weights():
    weight = torch.randn(4, 1, 8, 8, requires_grad=True)
    out = embed(torch.randn(2, 1, 32, 32), PatchKernel(weight), runtime_patch=16)
    out.sum().backward()
    assert weight.grad is not None and weight.grad.abs().sum() > 0


# -- inflation -------------------------------------------------------------------

def test_inflate_depth_one_adds_axis():
    k = _kernel()
    out = inflate_to_3d(k, 1)
    assert out.weights.shape == (6, 1, 1, 8, 8)
    assert torch.equal(out.weights[:, :, 0], k.weights)


def test_inflated_kernel_sums_back_to_2d():
    k = _kernel()
    out = inflate_to_3d(k, 8)
    assert out.weights.shape == (6, 1, 8, 8, 8)
    assert torch.allclose(out.weights.sum(dim=2), k.weights, atol=1e-10)
    assert torch.allclose(out.weights[:, :, 3], k.weights / 8, atol=1e-12)


def test_depth_constant_patch_matches_2d_token():
    k = _kernel()
    k3 = inflate_to_3d(k, 8)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    token2d = embed(x, k)
    token3d = embed(x[:, :, None].expand(1, 1, 8, 8, 8).contiguous(), k3)
    assert (token3d[..., 0, :, :] - token2d).abs().max() < 1e-9


def test_inflation_errors():
    with pytest.raises(ValidationError):
        inflate_to_3d(_kernel(), 0)
    with pytest.raises(ValidationError):
        inflate_to_3d(_kernel(ndim=3), 4)


# -- embed / PatchEmbedND ------------------------------------------------------

def test_token_grid_shapes():
    emb2 = PatchEmbedND(4, ndim=2)
    assert emb2(torch.zeros(1, 1, 256, 256), runtime_patch=16).shape == (1, 4, 16, 16)
    emb3 = PatchEmbedND(4, ndim=3)
    assert emb3(torch.zeros(1, 1, 160, 160, 160), runtime_patch=8).shape == (1, 4, 20, 20, 20)


def test_patch_switch_keeps_parameter_count():
    emb = PatchEmbedND(8, ndim=2)
    count = sum(p.numel() for p in emb.parameters())
    x = torch.randn(1, 1, 64, 64)
    assert emb(x, runtime_patch=16).shape[-1] == 4
    assert emb(x, runtime_patch=8).shape[-1] == 8
    assert sum(p.numel() for p in emb.parameters()) == count == 8 * 64


def test_embed_is_linear():
    k = _kernel()
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 1, 32, 32, generator=g, dtype=torch.float64)
    y = torch.randn(1, 1, 32, 32, generator=g, dtype=torch.float64)
    lhs = embed(2.5 * x - 0.7 * y, k, 16)
    rhs = 2.5 * embed(x, k, 16) - 0.7 * embed(y, k, 16)
    assert (lhs - rhs).abs().max() < 1e-8


def test_embed_input_errors():
    k = _kernel()
    with pytest.raises(ValidationError):
        embed(torch.zeros(1, 1, 30, 32, dtype=torch.float64), k)
    with pytest.raises(ValidationError):
        embed(torch.zeros(1, 1, 8, 8, 8, dtype=torch.float64), k)


@pytest.mark.parametrize('shape,base', [((4, 1, 8), 8), ((4, 1, 8, 4), 8), ((4, 1, 6, 6), 6)])
def test_patch_kernel_validation(shape, base):
    with pytest.raises(ValidationError):
        PatchKernel(torch.zeros(shape), base)


# -- kernel cache --------------------------------------------------------------

def test_kernel_cache_first_insert_wins_and_counts():
    cache = KernelCache(max_size=2)
    assert cache.get("a") is None
    assert cache.set("a", 1) == 1
    assert cache.set("a", 2) == 1
    assert cache.get("a") == 1
    assert (cache.hits, cache.misses) == (1, 1)


def test_kernel_cache_evicts_least_recent():
    cache = KernelCache(max_size=2)
    cache.set("a", 1)
    cache.set("b", 2)
    cache.get("a")
    cache.set("c", 3)
    assert "a" in cache and "c" in cache and "b" not in cache
    assert len(cache) == 2


def test_kernel_cache_concurrent_get_or_create():
    cache = KernelCache()
    results = []

    def worker(i):
        results.append(cache.get_or_create("k", lambda: object()))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len({id(r) for r in results}) == 1
