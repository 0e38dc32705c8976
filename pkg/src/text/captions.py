"""Training-time caption sampling."""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence

import numpy as np

from .reports import SECTION_NAMES, FindingCaption, Polarity, StructuredReport, section_title

SHUFFLE_PROB = 0.5


class CaptionSource(str, Enum):
    STRUCTURED = "structured"
    POSITIVES = "positives"
    NEGATIVES = "negatives"
    RAW = "raw"


CAPTION_SOURCES = (CaptionSource.STRUCTURED, CaptionSource.POSITIVES, CaptionSource.NEGATIVES)


@dataclass(frozen=True)
class CaptionDraw:
    text: str
    source: CaptionSource
    shuffled: bool


def structured_text(report: StructuredReport, order: Sequence[str] = SECTION_NAMES) -> str:
    """Findings section rendered as one "Section: captions" line per non-empty section."""
    lines = []
    for name in order:
        caps = report.sections.get(name, ())
        if caps:
            lines.append(f"{section_title(name)}: " + " ".join(c.text for c in caps))
    return "\n".join(lines)


def _join(captions: List[FindingCaption]) -> str:
    return " ".join(c.text for c in captions)


def _by_polarity(report: StructuredReport, order: Sequence[str], polarity: Polarity) -> str:
    return _join([c for name in order for c in report.sections.get(name, ())
                  if c.polarity is polarity])


def sample_caption_with_source(report: StructuredReport, rng: np.random.Generator) -> CaptionDraw:
    """Draw one caption and report where it came from.

    Caption-bearing reports pick uniformly among the structured findings text
    and the concatenated positive or negative captions; an empty choice falls
    back to the structured text. Raw-only reports return ``raw_text`` verbatim.
    """
    if not report.caption_bearing:
        return CaptionDraw(report.raw_text or "", CaptionSource.RAW, False)
    source = CAPTION_SOURCES[int(rng.integers(len(CAPTION_SOURCES)))]
    shuffled = bool(rng.random() < SHUFFLE_PROB)
    order = list(SECTION_NAMES)
    if shuffled:
        order = [order[i] for i in rng.permutation(len(order))]
    texts: Dict[CaptionSource, str] = {
        CaptionSource.STRUCTURED: structured_text(report, order),
        CaptionSource.POSITIVES: _by_polarity(report, order, Polarity.POSITIVE),
        CaptionSource.NEGATIVES: _by_polarity(report, order, Polarity.NEGATIVE),
    }
    text = texts[source] or texts[CaptionSource.STRUCTURED]
    return CaptionDraw(text, source, shuffled)


def sample_caption(report: StructuredReport, rng: np.random.Generator) -> str:
    return sample_caption_with_source(report, rng).text
