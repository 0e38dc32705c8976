"""Rule-based quality-control screening of CT volumes."""

from dataclasses import dataclass, field
from enum import Enum
import logging
from typing import List

import numpy as np

from .grid import Units, VolumeGrid

logger = logging.getLogger(__name__)

MIN_AXIAL_SLICES = 8
MAX_INPLANE_SPACING_MM = 10.0
MIN_EXTENT_RATIO = 1.0 / 3.0
PRENORM_MAX_ABS = 5.0
PRENORM_STD_RANGE = (0.5, 2.0)


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class QCReason:
    """A fired rule with the measured value that triggered it."""
    rule: str
    value: float
    limit: float


@dataclass
class QCReport:
    verdict: Verdict
    reasons: List[QCReason] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPT

    @property
    def rules(self) -> List[str]:
        return [r.rule for r in self.reasons]

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "reasons": [{"rule": r.rule, "value": r.value, "limit": r.limit} for r in self.reasons],
        }


def qc_screen(vol: VolumeGrid) -> QCReport:
    """Apply every QC rule and collect the ones that fire.

    Rules are independent of each other, so the verdict does not depend on
    evaluation order.
    """
    voxels = np.asarray(vol.voxels, dtype=np.float64)
    reasons: List[QCReason] = []

    n_axial = vol.shape[0]
    if n_axial < MIN_AXIAL_SLICES:
        reasons.append(QCReason("min_slices", float(n_axial), float(MIN_AXIAL_SLICES)))

    inplane = max(vol.spacing_mm[1], vol.spacing_mm[2])
    if inplane > MAX_INPLANE_SPACING_MM:
        reasons.append(QCReason("inplane_spacing", inplane, MAX_INPLANE_SPACING_MM))

    axial_extent, coronal_extent = vol.extent_mm[0], vol.extent_mm[1]
    ratio = axial_extent / coronal_extent
    if ratio < MIN_EXTENT_RATIO:
        reasons.append(QCReason("extent_ratio", ratio, MIN_EXTENT_RATIO))

    lo, hi = float(voxels.min()), float(voxels.max())
    if np.isin(voxels, (0.0, 1.0)).all():
        reasons.append(QCReason("binary_mask", float(np.unique(voxels).size), 2.0))

    if lo == hi:
        reasons.append(QCReason("constant", lo, hi))

    if vol.units is Units.HU:
        max_abs = max(abs(lo), abs(hi))
        std = float(voxels.std())
        if max_abs <= PRENORM_MAX_ABS and PRENORM_STD_RANGE[0] <= std <= PRENORM_STD_RANGE[1]:
            reasons.append(QCReason("prenormalized", std, max_abs))

    verdict = Verdict.REJECT if reasons else Verdict.ACCEPT
    if reasons:
        logger.warning("QC reject %s: %s", vol.volume_id or "<volume>", ", ".join(r.rule for r in reasons))
    return QCReport(verdict=verdict, reasons=reasons)
