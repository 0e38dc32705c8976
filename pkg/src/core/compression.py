"""
Blob-level compression for containers.

``CompressionLike`` accepts the enum, its stored byte value, or its name in
any case; everything that writes a container goes through
``resolve_compression`` so the header always stores a valid codec byte.
"""
from typing import Union

from .errors import CompressionError
from .format import CompressionType

CompressionLike = Union[CompressionType, int, str]


def resolve_compression(comp: CompressionLike) -> CompressionType:
    """Map ``comp`` onto a CompressionType.

    Raises:
        CompressionError: If ``comp`` names no known codec
    """
    if isinstance(comp, CompressionType):
        return comp
    if isinstance(comp, int) and comp in {c.value for c in CompressionType}:
        return CompressionType(comp)
    if isinstance(comp, str) and comp.upper() in CompressionType.__members__:
        return CompressionType[comp.upper()]
    raise CompressionError(f"Invalid compression type: {comp!r}")


def _apply(comp: CompressionLike, data: bytes, direction: int, verb: str) -> bytes:
    fn = resolve_compression(comp).codec()[direction]
    try:
        return fn(data)
    except Exception as e:
        raise CompressionError(f"{verb} failed: {e}") from e


def compress_bytes(comp: CompressionLike, data: bytes) -> bytes:
    return _apply(comp, data, 0, "Compression")


def decompress_bytes(comp: CompressionLike, data: bytes) -> bytes:
    return _apply(comp, data, 1, "Decompression")


__all__ = [
    'CompressionLike',
    'CompressionType',
    'resolve_compression',
    'compress_bytes',
    'decompress_bytes',
]
