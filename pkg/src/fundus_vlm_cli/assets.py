"""Bundled text assets: description rules, instruction templates, dialogue prompt and sign map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Tuple

from .config import SIGN_NAMES
from .errors import RuleLookupError, ValidationError

try:  # Python 3.11+
    import tomllib  # type: ignore
except Exception:  # pragma: no cover - fallback for Python 3.10
    import tomli as tomllib  # type: ignore

logger = logging.getLogger(__name__)

HEALTHY = "Healthy"
ABNORMAL_PREFIX = "Abnormal, "
NORMAL_PREFIX = "Normal, "


def read_asset(name: str) -> str:
    return resources.files("fundus_vlm_cli").joinpath("data", name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class DescriptionRule:
    """One bundled rule line. ``clause`` has the final period removed."""

    number: int
    name: str
    clause: str
    abnormal: bool
    text: str

    @property
    def fragment(self) -> str:
        return f"{self.name}, {self.clause}"


def parse_rule_line(number: int, line: str) -> DescriptionRule:
    body = line.rstrip()
    abnormal = True
    if body.startswith(ABNORMAL_PREFIX):
        body = body[len(ABNORMAL_PREFIX) :]
    elif body.startswith(NORMAL_PREFIX):
        body = body[len(NORMAL_PREFIX) :]
        abnormal = False
    name, sep, clause = body.partition(", ")
    if not sep:
        raise ValidationError([(f"rule {number}", f"cannot split name and clause in {line!r}")])
    return DescriptionRule(number=number, name=name, clause=clause.removesuffix("."), abnormal=abnormal, text=line)


@dataclass(frozen=True)
class InstructionTemplate:
    text: str
    kind: str  # "short" | "long"


@dataclass
class RuleBook:
    rules: List[DescriptionRule]
    sign_map: Dict[str, Tuple[str, ...]]
    by_name: Dict[str, DescriptionRule] = field(init=False)

    def __post_init__(self) -> None:
        self.by_name = {}
        for rule in self.rules:
            # Hypertensive Retinopathy appears twice; the first rule owns the name.
            self.by_name.setdefault(rule.name, rule)

    @property
    def disease_names(self) -> List[str]:
        return [name for name in self.by_name if name != HEALTHY]

    @property
    def healthy(self) -> DescriptionRule:
        return self.by_name[HEALTHY]

    def rule(self, number: int) -> DescriptionRule:
        for rule in self.rules:
            if rule.number == number:
                return rule
        raise RuleLookupError([f"rule #{number}"])

    def lookup(self, names: Iterable[str]) -> List[DescriptionRule]:
        names = list(names)
        unknown = [name for name in names if name not in self.by_name]
        if unknown:
            raise RuleLookupError(unknown)
        return [self.by_name[name] for name in names]

    def signs_of(self, name: str) -> Tuple[str, ...]:
        if name not in self.by_name:
            raise RuleLookupError([name])
        return self.sign_map.get(name, ("Other",))


def _read_lines(name: str) -> List[str]:
    return [line for line in read_asset(name).split("\n") if line.strip()]


@lru_cache(maxsize=1)
def load_rulebook() -> RuleBook:
    lines = _read_lines("description_rules.txt")
    rules = [parse_rule_line(i, line) for i, line in enumerate(lines, start=1)]
    extra = _read_lines("extra_rules.txt")
    rules += [parse_rule_line(len(lines) + i, line) for i, line in enumerate(extra, start=1)]

    raw = tomllib.loads(read_asset("sign_map.toml")).get("signs", {})
    sign_map: Dict[str, Tuple[str, ...]] = {}
    problems = []
    for disease, signs in raw.items():
        bad = [s for s in signs if s not in SIGN_NAMES]
        if bad:
            problems.append((f"sign_map/{disease}", f"unknown sign categories {bad}"))
        sign_map[disease] = tuple(signs)
    if problems:
        raise ValidationError(problems)
    book = RuleBook(rules=rules, sign_map=sign_map)
    unmapped = [name for name in book.by_name if name not in sign_map]
    if unmapped:
        logger.warning("Diseases without a sign mapping default to Other: %s", ", ".join(unmapped))
    return book


@lru_cache(maxsize=1)
def load_instructions() -> Dict[str, List[InstructionTemplate]]:
    return {
        kind: [InstructionTemplate(text=line, kind=kind) for line in _read_lines(f"{kind}_instructions.txt")]
        for kind in ("short", "long")
    }


@lru_cache(maxsize=1)
def load_dialogue_prompt() -> str:
    return read_asset("dialogue_prompt.txt").rstrip("\n")
