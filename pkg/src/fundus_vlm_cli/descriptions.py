"""Three-level fundus descriptions: normal/abnormal, disease names and clinical explanations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .assets import ABNORMAL_PREFIX, HEALTHY, DescriptionRule, RuleBook, load_rulebook
from .errors import ContractError, ValidationError


@dataclass(frozen=True)
class ParsedDescription:
    abnormal: bool
    diseases: Tuple[str, ...]
    clauses: Tuple[str, ...]


def build_description(diseases: Sequence[str], abnormal: bool = True, rulebook: Optional[RuleBook] = None) -> str:
    """
    ``Abnormal, <name>, <clause>, <name>, <clause>.`` in input order; the healthy rule
    verbatim for a normal image.
    """
    book = rulebook or load_rulebook()
    names = list(diseases)
    if not abnormal:
        if names and names != [HEALTHY]:
            raise ContractError("a normal description cannot name diseases")
        return book.healthy.text.rstrip()
    if not names:
        raise ContractError("an abnormal description needs at least one disease")
    if HEALTHY in names:
        raise ContractError("Healthy cannot be combined with an abnormal description")
    rules = book.lookup(names)
    return ABNORMAL_PREFIX + ", ".join(rule.fragment for rule in rules) + "."


def _match(body: str, pos: int, fragments: List[Tuple[str, DescriptionRule]]) -> Optional[List[DescriptionRule]]:
    if pos == len(body):
        return []
    for fragment, rule in fragments:
        end = pos + len(fragment)
        if not body.startswith(fragment, pos):
            continue
        if end == len(body):
            return [rule]
        if body.startswith(", ", end):
            rest = _match(body, end + 2, fragments)
            if rest is not None:
                return [rule] + rest
    return None


def parse_description(text: str, rulebook: Optional[RuleBook] = None) -> ParsedDescription:
    """Inverse of ``build_description`` over the bundled rule vocabulary."""
    book = rulebook or load_rulebook()
    healthy = book.healthy
    if text == healthy.text.rstrip():
        return ParsedDescription(abnormal=False, diseases=(), clauses=(healthy.clause,))
    if not text.startswith(ABNORMAL_PREFIX) or not text.endswith("."):
        raise ValidationError([("description", f"must start with 'Normal' or 'Abnormal' and end with '.': {text[:60]!r}")])
    body = text[len(ABNORMAL_PREFIX) : -1]
    fragments = sorted(
        ((rule.fragment, rule) for rule in book.by_name.values() if rule.name != HEALTHY),
        key=lambda item: -len(item[0]),
    )
    matched = _match(body, 0, fragments)
    if not matched:
        raise ValidationError([("description", f"does not decompose into known rules: {text[:60]!r}")])
    return ParsedDescription(
        abnormal=True,
        diseases=tuple(rule.name for rule in matched),
        clauses=tuple(rule.clause for rule in matched),
    )
