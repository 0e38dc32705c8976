"""Blob compression codecs used by FlexiCT binary containers."""

from enum import Enum
from typing import Callable, Tuple
import lzma
import zlib

from .errors import CompressionError

Codec = Tuple[Callable[[bytes], bytes], Callable[[bytes], bytes]]


def _brotli_codec() -> Codec:
    try:
        import brotli
    except ImportError:
        raise CompressionError(
            "brotli library is not installed. Install with: pip install brotli"
        )
    return brotli.compress, brotli.decompress


def _zstd_codec() -> Codec:
    try:
        import zstandard as zstd
    except ImportError:
        raise CompressionError(
            "zstandard library is not installed. Install with: pip install zstandard"
        )

    def zstd_compress(b: bytes) -> bytes:
        # Explicit content size keeps the frame header deterministic
        return zstd.ZstdCompressor(level=3, write_content_size=True).compress(b)

    def zstd_decompress(b: bytes) -> bytes:
        return zstd.ZstdDecompressor().decompress(b)

    return zstd_compress, zstd_decompress


class CompressionType(Enum):
    """Compression applied to the tensor blob of a container."""
    NONE = 0
    ZLIB = 1
    BROTLI = 2
    LZMA = 3
    ZSTD = 4

    def codec(self) -> Codec:
        """Return the (compress, decompress) pair for this type.

        Raises:
            CompressionError: If the optional library backing the codec is missing
        """
        if self is CompressionType.NONE:
            return (lambda x: x), (lambda x: x)
        if self is CompressionType.ZLIB:
            return (lambda x: zlib.compress(x, 6)), zlib.decompress
        if self is CompressionType.LZMA:
            return lzma.compress, lzma.decompress
        if self is CompressionType.BROTLI:
            return _brotli_codec()
        return _zstd_codec()
