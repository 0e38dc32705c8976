"""Phantom volumes paired with structured reports, for Phase-3 smoke runs and zero-shot checks.

Every positive finding in a synthetic report is visible in its phantom: the
lesion is the spec's lesion and each other finding adds a small marker
ellipsoid at a fixed position inside the body.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..volume.phantom import Ellipsoid, PhantomSpec, random_phantom_spec
from .reports import FindingCaption, Polarity, StructuredReport

LESION_POSITIVE = "There is a hyperdense nodule."
LESION_NEGATIVE = "There is no hyperdense nodule."

MARKER_RADIUS_FRACTION = 0.12


@dataclass(frozen=True)
class FillerFinding:
    section: str
    positive: str
    negative: str
    offset: Tuple[float, float, float]  # marker center, in body radii from the body center
    hu: float


_FILLER_FINDINGS = (
    FillerFinding("lungs_and_airways", "Septal thickenings.", "No septal thickenings.",
                  (-0.55, -0.45, 0.0), -400.0),
    FillerFinding("pleura", "Pleural effusion.", "No pleural effusion.",
                  (0.55, 0.45, 0.0), 15.0),
    FillerFinding("mediastinum_and_hila", "Mediastinal lymphadenopathy.", "No mediastinal lymphadenopathy.",
                  (0.0, -0.45, 0.55), 120.0),
    FillerFinding("cardiovascular_structures", "Coronary calcifications are present.",
                  "Coronary calcifications are absent.", (0.0, 0.45, -0.55), 950.0),
    FillerFinding("bones_and_soft_tissues", "Degenerative changes of the spine.",
                  "No degenerative changes of the spine.", (-0.55, 0.0, -0.55), 300.0),
    FillerFinding("upper_abdomen", "Hepatic cyst is seen.", "Hepatic cyst is not seen.",
                  (0.55, 0.0, 0.55), -150.0),
)


@dataclass(frozen=True)
class SyntheticPair:
    spec: PhantomSpec
    report: StructuredReport
    label: int  # 1 when the phantom carries a lesion


def draw_findings(rng: np.random.Generator) -> Tuple[bool, ...]:
    """One presence flag per filler finding."""
    return tuple(bool(rng.random() < 0.5) for _ in _FILLER_FINDINGS)


def add_finding_markers(spec: PhantomSpec, findings: Sequence[bool]) -> PhantomSpec:
    """Spec with one marker ellipsoid per present filler finding, drawn after the organs."""
    body = spec.body
    radius = tuple(max(1.5, r * MARKER_RADIUS_FRACTION) for r in body.radii)
    markers = tuple(
        Ellipsoid(tuple(c + o * r for c, o, r in zip(body.center, f.offset, body.radii)), radius, f.hu)
        for f, present in zip(_FILLER_FINDINGS, findings) if present)
    return replace(spec, organs=spec.organs + markers)


def report_for_spec(spec: PhantomSpec, report_id: str, rng: np.random.Generator,
                    findings: Optional[Sequence[bool]] = None) -> StructuredReport:
    """Report whose lesion finding matches the phantom.

    ``findings`` fixes the filler findings (one flag each); when omitted they are
    drawn from ``rng``.
    """
    if findings is None:
        findings = draw_findings(rng)
    sections = {"image_quality": [FindingCaption("Diagnostic image quality.", Polarity.POSITIVE,
                                                 "image_quality")]}
    lesion = spec.lesion is not None
    sections.setdefault("lungs_and_airways", []).append(FindingCaption(
        LESION_POSITIVE if lesion else LESION_NEGATIVE,
        Polarity.POSITIVE if lesion else Polarity.NEGATIVE, "lungs_and_airways"))
    for f, positive in zip(_FILLER_FINDINGS, findings):
        sections.setdefault(f.section, []).append(FindingCaption(
            f.positive if positive else f.negative,
            Polarity.POSITIVE if positive else Polarity.NEGATIVE, f.section))
    return StructuredReport(report_id=report_id,
                            sections={k: tuple(v) for k, v in sections.items()})


def synthetic_pairs(n: int, seed: int = 0,
                    grid_shape: Tuple[int, int, int] = (32, 32, 32)) -> List[SyntheticPair]:
    """``n`` phantom/report pairs alternating lesion presence, with markers for every positive finding."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        findings = draw_findings(rng)
        spec = random_phantom_spec(seed * 100003 + i, grid_shape, with_lesion=bool(i % 2))
        spec = add_finding_markers(spec, findings)
        report = report_for_spec(spec, f"synthetic-{seed}-{i:05d}", rng, findings=findings)
        pairs.append(SyntheticPair(spec, report, int(spec.lesion is not None)))
    return pairs
