"""Rule-based negation of single finding sentences.

Rules live in ``data/negation_rules.json`` and are tried in file order; the
first full-sentence match wins. Templates may use ``{x}`` (captured phrase),
``{X}`` (capitalized), ``{x_lower}`` and ``{article}`` (a/an for ``x``).

"There is a/an X" and the article-less "There is X" negate to different
forms ("There is no X" and "There is no evidence of X") so the inverse can
restore exactly what was removed.
"""

from dataclasses import dataclass
import functools
import json
from pathlib import Path
import re
from typing import Optional, Tuple, Union

from ..core.errors import FormatError, ValidationError

RULES_PATH = Path(__file__).parent / "data" / "negation_rules.json"


@dataclass(frozen=True)
class NegationRule:
    name: str
    pattern: re.Pattern
    template: str


@dataclass(frozen=True)
class NegationTable:
    rules: Tuple[NegationRule, ...]
    fallback: str

    def match(self, body: str) -> Tuple[Optional[NegationRule], Optional[re.Match]]:
        for rule in self.rules:
            m = rule.pattern.match(body)
            if m:
                return rule, m
        return None, None


def load_rules(path: Union[str, Path] = RULES_PATH) -> NegationTable:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = tuple(NegationRule(r["name"], re.compile(r["pattern"], re.IGNORECASE), r["template"])
                      for r in data["rules"])
        return NegationTable(rules=rules, fallback=data["fallback"])
    except (OSError, json.JSONDecodeError, KeyError, re.error) as e:
        raise FormatError(f"Cannot load negation rules from {path}: {e}") from e


@functools.lru_cache(maxsize=None)
def default_rules() -> NegationTable:
    return load_rules()


def _is_acronym(word: str) -> bool:
    word = word.strip(",;:()")
    return len(word) > 1 and word.isupper()


def _fill(template: str, x: str) -> str:
    first = x.split()[0] if x.split() else x
    x_lower = x if _is_acronym(first) else x[:1].lower() + x[1:]
    article = "an" if x[:1].lower() in "aeiou" else "a"
    return template.format(x=x, X=x[:1].upper() + x[1:], x_lower=x_lower, article=article)


def negate_finding(sentence: str, table: Optional[NegationTable] = None) -> str:
    """Return the opposite finding; the first character keeps its case.

    Raises:
        ValidationError: If the sentence is empty
    """
    text = sentence.strip()
    if not text:
        raise ValidationError("Cannot negate an empty sentence")
    table = table or default_rules()
    body = text[:-1].rstrip() if text.endswith(".") else text
    if not body:
        raise ValidationError("Cannot negate an empty sentence")
    rule, m = table.match(body)
    out = _fill(rule.template, m.group("x")) if rule else _fill(table.fallback, body)
    out = (out[:1].upper() if text[:1].isupper() else out[:1].lower()) + out[1:]
    return out + "."
