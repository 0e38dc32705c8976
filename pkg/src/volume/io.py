"""
Volume file I/O.

Native ``.ctv`` layout:

    b"CTV1" | uint32 LE header length | UTF-8 JSON header | raw float32 LE voxels (C order)

The JSON header carries shape, spacing_mm, orientation, units, dtype and
byte_order. NIfTI-1 files are read through nibabel.
"""

import json
import logging
from pathlib import Path
import struct
from typing import Any, Dict, Tuple, Union

import numpy as np

from ..core.errors import FormatError, ValidationError
from .grid import Units, VolumeGrid

logger = logging.getLogger(__name__)

CTV_MAGIC = b"CTV1"
HU_LIMIT = 4096.0
PathLike = Union[str, Path]


def write_ctv_array(path: PathLike, array: np.ndarray, header: Dict[str, Any]) -> Path:
    """Write any float array with a JSON header in the .ctv layout."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f4")
    full_header = dict(header)
    full_header.update({
        "shape": list(array.shape),
        "dtype": "float32",
        "byte_order": "little",
    })
    payload = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CTV_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(array.tobytes(order="C"))
    return path


def read_ctv_array(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Read a .ctv file into (array, header).

    Raises:
        FormatError: If the magic, header or payload size is malformed
    """
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CTV_MAGIC:
        raise FormatError(f"{path}: not a .ctv file")
    (length,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise FormatError(f"{path}: unsupported dtype/byte order")
    body = data[8 + length:]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(body) != expected:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy(), header


def save_volume(path: PathLike, vol: VolumeGrid) -> Path:
    """Write a VolumeGrid as .ctv."""
    return write_ctv_array(path, vol.voxels, {
        "spacing_mm": list(vol.spacing_mm),
        "orientation": vol.orientation,
        "units": vol.units.value,
        "volume_id": vol.volume_id,
    })


def _check_hu_range(vol: VolumeGrid, path: PathLike) -> VolumeGrid:
    if vol.units is Units.HU and vol.voxels.size:
        lo, hi = float(vol.voxels.min()), float(vol.voxels.max())
        if lo < -HU_LIMIT or hi > HU_LIMIT:
            raise ValidationError(f"{path}: HU values [{lo}, {hi}] outside [-4096, 4096]")
    return vol


def _load_ctv(path: Path) -> VolumeGrid:
    voxels, header = read_ctv_array(path)
    if voxels.ndim != 3:
        raise FormatError(f"{path}: expected a rank-3 volume, got shape {voxels.shape}")
    try:
        return VolumeGrid(
            voxels=voxels,
            spacing_mm=tuple(header["spacing_mm"]),
            orientation=header.get("orientation", "LPS"),
            units=Units(header.get("units", "HU")),
            volume_id=header.get("volume_id") or path.name.split(".")[0],
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e


def _load_nifti(path: Path) -> VolumeGrid:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.get_fdata(dtype=np.float32))
    except Exception as e:
        raise FormatError(f"{path}: unreadable NIfTI ({e})") from e
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3D image, got shape {data.shape}")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    # nibabel axcodes describe array axes (i, j, k); we store (k, j, i)
    orientation = "".join(nib.aff2axcodes(img.affine))
    return VolumeGrid(
        voxels=np.ascontiguousarray(data.transpose(2, 1, 0)),
        spacing_mm=(zooms[2], zooms[1], zooms[0]),
        orientation=orientation,
        units=Units.HU,
        volume_id=path.name.split(".")[0],
    )


def load_volume(path: PathLike) -> VolumeGrid:
    """Load a .ctv or NIfTI volume.

    Raises:
        FormatError: Unknown suffix or malformed file
        ValidationError: HU values out of the accepted range
    """
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".ctv"):
        vol = _load_ctv(path)
    elif name.endswith(".nii") or name.endswith(".nii.gz"):
        vol = _load_nifti(path)
    else:
        raise FormatError(f"Unsupported volume file: {path}")
    logger.debug("Loaded %s shape=%s spacing=%s", path, vol.shape, vol.spacing_mm)
    return _check_hu_range(vol, path)


VOLUME_SUFFIXES = (".ctv", ".nii", ".nii.gz")


def list_volumes(directory: PathLike):
    """Volume files in a directory, sorted by name."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.name.lower().endswith(VOLUME_SUFFIXES))
