"""
FlexiCT Binary Tensor Container

Defines the on-disk layout shared by checkpoints, feature caches and slice
stacks:

    [header: 32 bytes]
    [manifest: UTF-8 JSON, compact, sorted keys]
    [blob: little-endian float32 tensors, C order, optionally compressed]

The manifest lists every tensor with its shape, dtype and byte offset into
the uncompressed blob, plus a free-form ``meta`` object. Serialization is
canonical, so save -> load -> save reproduces the same bytes.
"""

from dataclasses import dataclass, field
from enum import Enum
import json
from pathlib import Path
import struct
from typing import Any, Dict, List, Mapping, Tuple, Union

import numpy as np

from .compression import CompressionLike, compress_bytes, decompress_bytes, resolve_compression
from .errors import FormatError, ValidationError
from .format import CompressionType

MAGIC_BYTES = b'FXCT'
CURRENT_VERSION_MAJOR = 1
CURRENT_VERSION_MINOR = 0
# 4s magic, H major, H minor, B kind, B compression, Q manifest length, Q blob length, 6s reserved
HEADER_FORMAT = '<4sHHBBQQ6s'
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
BLOB_DTYPE = np.dtype('<f4')


class ContainerKind(Enum):
    """What a container holds."""
    CHECKPOINT = 1
    FEATURES = 2
    SLICES = 3


@dataclass(frozen=True)
class TensorEntry:
    """One manifest row."""
    name: str
    shape: Tuple[int, ...]
    offset: int
    nbytes: int
    dtype: str = "float32"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "offset": self.offset,
            "nbytes": self.nbytes,
        }


@dataclass
class ContainerHeader:
    """Fixed-size header in front of the manifest."""
    kind: ContainerKind
    compression: CompressionType = CompressionType.NONE
    manifest_length: int = 0
    blob_length: int = 0
    version_major: int = CURRENT_VERSION_MAJOR
    version_minor: int = CURRENT_VERSION_MINOR

    def validate(self) -> bool:
        """
        Validate header contents

        Raises:
            ValidationError: If the version is newer than this reader
        """
        if self.version_major > CURRENT_VERSION_MAJOR:
            raise ValidationError(f"Unsupported version: {self.version_major}.{self.version_minor}")
        return True

    def pack(self) -> bytes:
        self.validate()
        try:
            return struct.pack(
                HEADER_FORMAT,
                MAGIC_BYTES,
                self.version_major,
                self.version_minor,
                self.kind.value,
                self.compression.value,
                self.manifest_length,
                self.blob_length,
                b'\x00' * 6,
            )
        except struct.error as e:
            raise FormatError(f"Failed to pack header: {e}") from e

    @classmethod
    def unpack(cls, data: bytes) -> 'ContainerHeader':
        """
        Unpack header from bytes

        Raises:
            FormatError: If the data is truncated, has the wrong magic or unknown enums
        """
        if len(data) < HEADER_SIZE:
            raise FormatError(f"Header too small: {len(data)} bytes")
        try:
            magic, major, minor, kind, comp, man_len, blob_len, _ = struct.unpack(
                HEADER_FORMAT, data[:HEADER_SIZE]
            )
        except struct.error as e:
            raise FormatError(f"Failed to unpack header: {e}") from e

        if magic != MAGIC_BYTES:
            raise FormatError(f"Invalid magic bytes: {magic!r}")
        try:
            header = cls(
                kind=ContainerKind(kind),
                compression=CompressionType(comp),
                manifest_length=man_len,
                blob_length=blob_len,
                version_major=major,
                version_minor=minor,
            )
        except ValueError as e:
            raise FormatError(f"Invalid header field: {e}") from e
        header.validate()
        return header


@dataclass
class TensorContainer:
    """Ordered float32 tensors plus JSON metadata."""
    kind: ContainerKind
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def manifest(self) -> List[TensorEntry]:
        entries = []
        offset = 0
        for name, array in self.tensors.items():
            shape = tuple(int(s) for s in np.shape(array))
            nbytes = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
            entries.append(TensorEntry(name=name, shape=shape, offset=offset, nbytes=nbytes))
            offset += nbytes
        return entries

    def to_bytes(self, compression: CompressionLike = CompressionType.NONE) -> bytes:
        comp = resolve_compression(compression)
        entries = self.manifest()
        manifest = {
            "meta": self.meta,
            "tensors": [e.to_dict() for e in entries],
        }
        try:
            manifest_bytes = json.dumps(
                manifest, sort_keys=True, separators=(",", ":"), allow_nan=False
            ).encode("utf-8")
        except (TypeError, ValueError) as e:
            raise FormatError(f"Container metadata is not JSON serializable: {e}") from e

        raw = b"".join(
            np.ascontiguousarray(np.asarray(a), dtype=BLOB_DTYPE).tobytes(order="C")
            for a in self.tensors.values()
        )
        blob = compress_bytes(comp, raw)
        header = ContainerHeader(
            kind=self.kind,
            compression=comp,
            manifest_length=len(manifest_bytes),
            blob_length=len(blob),
        )
        return header.pack() + manifest_bytes + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> 'TensorContainer':
        header = ContainerHeader.unpack(data)
        expected = HEADER_SIZE + header.manifest_length + header.blob_length
        if len(data) != expected:
            raise FormatError(f"Container size mismatch: expected {expected} bytes, got {len(data)}")

        start = HEADER_SIZE
        try:
            manifest = json.loads(data[start:start + header.manifest_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Corrupt container manifest: {e}") from e
        raw = decompress_bytes(header.compression, data[start + header.manifest_length:])

        tensors: Dict[str, np.ndarray] = {}
        cursor = 0
        for row in manifest.get("tensors", []):
            shape = tuple(int(s) for s in row["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
            if row["offset"] != cursor or row["nbytes"] != nbytes or row.get("dtype") != "float32":
                raise FormatError(f"Inconsistent manifest entry for {row.get('name')!r}")
            if cursor + nbytes > len(raw):
                raise FormatError(f"Tensor {row['name']!r} runs past the end of the blob")
            tensors[row["name"]] = np.frombuffer(raw, dtype=BLOB_DTYPE, count=nbytes // 4,
                                                 offset=cursor).reshape(shape).copy()
            cursor += nbytes
        if cursor != len(raw):
            raise FormatError(f"Blob has {len(raw) - cursor} trailing bytes")
        return cls(kind=header.kind, tensors=tensors, meta=manifest.get("meta", {}))

    def save(self, path: Union[str, Path], compression: CompressionLike = CompressionType.NONE) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes(compression))
        return path

    @classmethod
    def load(cls, path: Union[str, Path], kind: ContainerKind = None) -> 'TensorContainer':
        path = Path(path)
        if not path.exists():
            raise FormatError(f"Container not found: {path}")
        container = cls.from_bytes(path.read_bytes())
        if kind is not None and container.kind is not kind:
            raise FormatError(f"{path} holds {container.kind.name}, expected {kind.name}")
        return container


def tensors_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bitwise equality of two tensor maps, names and order included."""
    if list(a) != list(b):
        return False
    return all(np.array_equal(np.asarray(a[k], BLOB_DTYPE), np.asarray(b[k], BLOB_DTYPE)) for k in a)
