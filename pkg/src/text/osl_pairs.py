"""Opposite-sentence pair construction.

True pairs (y=1) come from the sample's own positive findings; false pairs
(y=0) are positives of other reports in the same section. Every ``s_minus``
is the rule negation of its ``s_plus``.
"""

from dataclasses import dataclass
import logging
from typing import List, Optional, Tuple

import numpy as np

from ..core.errors import ValidationError
from .negation import negate_finding
from .reports import SECTION_NAMES, FindingEntry, PositiveFindingDB, StructuredReport

logger = logging.getLogger(__name__)

N_PAIRS = 8


@dataclass(frozen=True)
class OSLPair:
    s_plus: str
    s_minus: str
    y: int
    valid: bool
    section: Optional[str] = None
    source_id: Optional[str] = None

    @classmethod
    def padding(cls) -> 'OSLPair':
        return cls("", "", 0, False)


@dataclass(frozen=True)
class OSLPairSet:
    pairs: Tuple[OSLPair, ...]

    def __post_init__(self):
        if len(self.pairs) != N_PAIRS:
            raise ValidationError(f"OSLPairSet needs exactly {N_PAIRS} entries, got {len(self.pairs)}")

    @property
    def n_valid(self) -> int:
        return sum(p.valid for p in self.pairs)

    def labels(self) -> np.ndarray:
        return np.array([p.y for p in self.pairs], dtype=np.int64)

    def valid_mask(self) -> np.ndarray:
        return np.array([p.valid for p in self.pairs], dtype=bool)


def _pair(entry_text: str, y: int, section: str, source_id: str) -> OSLPair:
    return OSLPair(entry_text, negate_finding(entry_text), y, True, section, source_id)


def build_osl_pairs(sample: StructuredReport, db: PositiveFindingDB,
                    rng: np.random.Generator, k: int = N_PAIRS) -> OSLPairSet:
    """Up to ``k`` valid pairs, shuffled, padded with invalid entries."""
    if k != N_PAIRS:
        raise ValidationError(f"Only K={N_PAIRS} is supported")
    if not sample.caption_bearing:
        return OSLPairSet(tuple(OSLPair.padding() for _ in range(k)))

    own = sample.positives()
    own_texts = {c.text for c in own}
    order = rng.permutation(len(own))
    n_true = min(len(own), k // 2)
    chosen = [own[i] for i in order[:n_true]]
    spare = [own[i] for i in order[n_true:]]
    pairs: List[OSLPair] = [_pair(c.text, 1, c.section, sample.report_id) for c in chosen]

    sections = sorted({c.section for c in own}, key=SECTION_NAMES.index) or list(SECTION_NAMES)
    pools = {}
    for name in sections:
        pool: List[FindingEntry] = [e for e in db.section(name)
                                    if e.report_id != sample.report_id and e.text not in own_texts]
        pools[name] = [pool[i] for i in rng.permutation(len(pool))]
    used = set()
    while len(pairs) < k and any(pools.values()):
        for name in [sections[i] for i in rng.permutation(len(sections))]:
            if len(pairs) >= k:
                break
            while pools[name] and pools[name][-1].text in used:
                pools[name].pop()
            if pools[name]:
                entry = pools[name].pop()
                used.add(entry.text)
                pairs.append(_pair(entry.text, 0, name, entry.report_id))

    while len(pairs) < k and spare:
        c = spare.pop(0)
        pairs.append(_pair(c.text, 1, c.section, sample.report_id))

    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    pairs.extend(OSLPair.padding() for _ in range(k - len(pairs)))
    logger.debug("OSL pairs for %s: %d valid", sample.report_id, sum(p.valid for p in pairs))
    return OSLPairSet(tuple(pairs))
