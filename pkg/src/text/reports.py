"""
Structured radiology reports.

JSON layout::

    {"report_id": "...",
     "sections": {"pleura": [{"text": "Pleural effusion.", "polarity": "positive"}], ...},
     "raw_text": "..."}

Section keys may be given as display names ("Lungs and airways") or snake
case; they are stored in snake case.
"""

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
import re
from typing import Dict, Iterable, List, Optional, Tuple, Union

from ..core.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SECTION_NAMES: Tuple[str, ...] = (
    "image_quality",
    "lungs_and_airways",
    "pleura",
    "mediastinum_and_hila",
    "cardiovascular_structures",
    "bones_and_soft_tissues",
    "tubes_and_devices",
    "upper_abdomen",
)

_SENTENCE_BREAK = re.compile(r"[.!?]\s+\S")


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def section_key(name: str) -> str:
    key = "_".join(name.strip().lower().split())
    if key not in SECTION_NAMES:
        raise ValidationError(f"Unknown report section: {name!r}")
    return key


def section_title(key: str) -> str:
    return key.replace("_", " ").capitalize()


@dataclass(frozen=True)
class FindingCaption:
    text: str
    polarity: Polarity
    section: str

    def __post_init__(self):
        text = self.text.strip()
        if not text:
            raise ValidationError("Finding caption is empty")
        if not text.endswith("."):
            raise ValidationError(f"Finding caption must end with '.': {self.text!r}")
        if _SENTENCE_BREAK.search(text):
            raise ValidationError(f"Finding caption must be a single sentence: {self.text!r}")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "section", section_key(self.section))


@dataclass(frozen=True)
class StructuredReport:
    report_id: str
    sections: Dict[str, Tuple[FindingCaption, ...]] = field(default_factory=dict)
    raw_text: Optional[str] = None

    @property
    def caption_bearing(self) -> bool:
        return any(self.sections.get(s) for s in SECTION_NAMES)

    def captions(self, polarity: Optional[Polarity] = None) -> List[FindingCaption]:
        """Captions in canonical section order, optionally filtered by polarity."""
        out = []
        for name in SECTION_NAMES:
            out.extend(c for c in self.sections.get(name, ())
                       if polarity is None or c.polarity is polarity)
        return out

    def positives(self) -> List[FindingCaption]:
        return self.captions(Polarity.POSITIVE)

    def negatives(self) -> List[FindingCaption]:
        return self.captions(Polarity.NEGATIVE)

    @classmethod
    def from_dict(cls, data: dict) -> 'StructuredReport':
        """Build a report from its JSON form.

        Raises:
            FormatError: Missing report_id or malformed section lists
            ValidationError: Unknown section names or malformed captions
        """
        if not isinstance(data, dict) or "report_id" not in data:
            raise FormatError("Report JSON must be an object with a 'report_id'")
        sections: Dict[str, Tuple[FindingCaption, ...]] = {}
        for name, items in (data.get("sections") or {}).items():
            key = section_key(name)
            if not isinstance(items, list):
                raise FormatError(f"Section {name!r} must be a list of captions")
            try:
                sections[key] = tuple(
                    FindingCaption(item["text"], item.get("polarity", "positive"), key)
                    for item in items)
            except (KeyError, TypeError) as e:
                raise FormatError(f"Malformed caption in section {name!r}: {e}") from e
        raw = data.get("raw_text")
        if raw is not None and not isinstance(raw, str):
            raise FormatError("raw_text must be a string")
        return cls(report_id=str(data["report_id"]), sections=sections, raw_text=raw)

    def to_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "sections": {
                name: [{"text": c.text, "polarity": c.polarity.value} for c in self.sections[name]]
                for name in SECTION_NAMES if name in self.sections
            },
            "raw_text": self.raw_text,
        }


def load_report(path: PathLike) -> StructuredReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    return StructuredReport.from_dict(data)


def load_reports(directory: PathLike) -> List[StructuredReport]:
    """All ``*.json`` reports in a directory, sorted by file name."""
    paths = sorted(Path(directory).glob("*.json"))
    reports = [load_report(p) for p in paths]
    logger.info("Loaded %d reports from %s", len(reports), directory)
    return reports


def save_report(path: PathLike, report: StructuredReport) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path


@dataclass(frozen=True)
class FindingEntry:
    report_id: str
    section: str
    text: str


class PositiveFindingDB:
    """Immutable corpus of positive findings grouped by section."""

    def __init__(self, entries: Iterable[FindingEntry]):
        self._entries: Tuple[FindingEntry, ...] = tuple(entries)
        by_section: Dict[str, List[FindingEntry]] = {name: [] for name in SECTION_NAMES}
        for entry in self._entries:
            by_section[entry.section].append(entry)
        self._by_section = {k: tuple(v) for k, v in by_section.items()}

    @classmethod
    def from_reports(cls, reports: Iterable[StructuredReport]) -> 'PositiveFindingDB':
        return cls(FindingEntry(r.report_id, c.section, c.text)
                   for r in reports for c in r.positives())

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> Tuple[FindingEntry, ...]:
        return self._entries

    def section(self, name: str) -> Tuple[FindingEntry, ...]:
        return self._by_section[section_key(name)]
