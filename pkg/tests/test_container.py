"""
Tests for the binary tensor container and its blob codecs.
"""

import builtins
import sys

import numpy as np
import pytest

from src.core.compression import compress_bytes, decompress_bytes, resolve_compression
from src.core.container import (HEADER_SIZE, MAGIC_BYTES, ContainerKind, TensorContainer,
                                tensors_equal)
from src.core.errors import CompressionError, FormatError
from src.core.format import CompressionType


def _sample_container():
    rng = np.random.default_rng(0)
    return TensorContainer(
        kind=ContainerKind.CHECKPOINT,
        tensors={"a.weight": rng.normal(size=(4, 3)).astype(np.float32),
                 "b.bias": np.arange(5, dtype=np.float32),
                 "scalar": np.array(2.5, dtype=np.float32)},
        meta={"phase": "1", "nested": {"x": [1, 2]}},
    )


@pytest.mark.parametrize('ctype', [CompressionType.NONE, CompressionType.ZLIB, CompressionType.LZMA])
def test_save_load_preserves_tensors_and_meta(tmp_path, ctype):
    c = _sample_container()
    path = c.save(tmp_path / "c.fxc", ctype)
    loaded = TensorContainer.load(path, ContainerKind.CHECKPOINT)
    assert tensors_equal(c.tensors, loaded.tensors)
    assert loaded.meta == c.meta
    assert loaded.kind is ContainerKind.CHECKPOINT


def test_serialization_is_canonical():
    c = _sample_container()
    first = c.to_bytes()
    again = TensorContainer.from_bytes(first).to_bytes()
    assert first == again
    assert first[:4] == MAGIC_BYTES


def test_raw_blob_is_little_endian_float32():
    c = TensorContainer(ContainerKind.FEATURES, {"x": np.array([1.0, -2.0], dtype=np.float64)})
    data = c.to_bytes()
    blob = data[-8:]
    assert np.array_equal(np.frombuffer(blob, dtype="<f4"), [1.0, -2.0])


def test_wrong_magic_is_format_error():
    data = bytearray(_sample_container().to_bytes())
    data[0:4] = b'BAD!'
    with pytest.raises(FormatError):
        TensorContainer.from_bytes(bytes(data))


def test_truncated_container_is_format_error():
    data = _sample_container().to_bytes()
    with pytest.raises(FormatError):
        TensorContainer.from_bytes(data[:HEADER_SIZE - 3])
    with pytest.raises(FormatError):
        TensorContainer.from_bytes(data[:-4])


def test_unknown_compression_byte_is_format_error():
    data = bytearray(_sample_container().to_bytes())
    data[9] = 200  # compression byte
    with pytest.raises(FormatError):
        TensorContainer.from_bytes(bytes(data))


def test_kind_mismatch_on_load(tmp_path):
    path = _sample_container().save(tmp_path / "c.fxc")
    with pytest.raises(FormatError):
        TensorContainer.load(path, ContainerKind.FEATURES)


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        TensorContainer.load(tmp_path / "nope.fxc")


def test_non_json_meta_is_format_error():
    c = TensorContainer(ContainerKind.FEATURES, {"x": np.zeros(2)}, meta={"bad": float("nan")})
    with pytest.raises(FormatError):
        c.to_bytes()


@pytest.mark.parametrize('value,expected', [
    (CompressionType.ZLIB, CompressionType.ZLIB),
    (0, CompressionType.NONE),
    ("lzma", CompressionType.LZMA),
    ("ZSTD", CompressionType.ZSTD),
])
def test_resolve_compression(value, expected):
    assert resolve_compression(value) is expected


@pytest.mark.parametrize('value', ["gzip", 99, 1.5])
def test_resolve_compression_rejects_unknown(value):
    with pytest.raises(CompressionError):
        resolve_compression(value)


def test_corrupt_zlib_blob_is_compression_error():
    with pytest.raises(CompressionError):
        decompress_bytes(CompressionType.ZLIB, b"not zlib at all")


def test_zlib_roundtrip():
    data = b"FlexiCT-" * 500
    assert decompress_bytes("zlib", compress_bytes("zlib", data)) == data


@pytest.mark.parametrize('libname,ctype', [
    ('brotli', CompressionType.BROTLI),
    ('zstandard', CompressionType.ZSTD),
])
def test_missing_optional_codec_raises_compression_error(monkeypatch, libname, ctype):
    monkeypatch.setitem(sys.modules, libname, None)
    orig_import = builtins.__import__

    def blocking_import(name, globals=None, locals=None, fromlist=(), level=0):
        if name == libname or name.startswith(libname + '.'):
            raise ImportError(f"No module named {libname}")
        return orig_import(name, globals, locals, fromlist, level)

    monkeypatch.setattr(builtins, '__import__', blocking_import)
    with pytest.raises(CompressionError):
        ctype.codec()
