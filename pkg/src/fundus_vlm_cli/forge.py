"""Rule-based corpus forge: fundus records with signs and dialogues, and pretrain caption dialogues."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

from tqdm import tqdm

from .assets import HEALTHY, InstructionTemplate, RuleBook, load_instructions, load_rulebook
from .config import MAX_TOKENS, OTHER_SIGN, SIGN_NAMES, ForgeSettings
from .descriptions import build_description, parse_description
from .dialogue import MAX_ANSWER_WORDS, ROUNDS, DialogueGenerator, DialogueRound, render_prompt, truncate_words
from .errors import ContractError, GeneratorError, ValidationError
from .imaging import synth_fundus_image, write_image
from .preprocess import Modality, PretrainPair, clean_caption, filter_modality, prepend_modality
from .tokenizer import tokenize
from .utils import make_rng, read_jsonl, word_count, write_jsonl

logger = logging.getLogger(__name__)

LONG_ANSWER_WORDS = 30

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class FundusRecord:
    record_id: str
    image: str
    diseases: List[str]
    abnormal: bool
    signs: List[int]
    description: str
    dialogue: List[DialogueRound] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.record_id,
            "image": self.image,
            "diseases": list(self.diseases),
            "abnormal": self.abnormal,
            "signs": list(self.signs),
            "description": self.description,
            "dialogue": [r.to_dict() for r in self.dialogue],
        }

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "FundusRecord":
        return cls(
            record_id=str(row["id"]),
            image=str(row["image"]),
            diseases=[str(d) for d in row.get("diseases", [])],
            abnormal=bool(row["abnormal"]),
            signs=[int(s) for s in row["signs"]],
            description=str(row["description"]),
            dialogue=[DialogueRound.from_dict(r) for r in row.get("dialogue", [])],
        )


@dataclass
class CaptionDialogue:
    """One pretrain sample: instruction question answered by the cleaned, modality-tagged caption."""

    record_id: str
    image: str
    question: str
    answer: str
    modality: str

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.record_id, "image": self.image, "question": self.question, "answer": self.answer, "modality": self.modality}

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "CaptionDialogue":
        return cls(
            record_id=str(row["id"]),
            image=str(row["image"]),
            question=str(row["question"]),
            answer=str(row["answer"]),
            modality=str(row.get("modality", Modality.FUNDUS.value)),
        )


# signs, instructions and dialogues -------------------------------------------------------


def derive_signs(diseases: Sequence[str], rulebook: Optional[RuleBook] = None) -> List[int]:
    """Union of the per-disease sign categories; no disease (or Healthy) sets only Other."""
    book = rulebook or load_rulebook()
    book.lookup(diseases)
    vector = [0] * len(SIGN_NAMES)
    for name in diseases:
        for sign in book.signs_of(name):
            vector[SIGN_NAMES.index(sign)] = 1
    if not any(vector):
        vector[OTHER_SIGN] = 1
    return vector


def select_instruction(answer: str, rng_seed: int, long_answer_words: int = LONG_ANSWER_WORDS) -> InstructionTemplate:
    """Long templates for answers of at least ``long_answer_words`` words, short otherwise."""
    if not answer.strip():
        raise ContractError("select_instruction needs a non-empty answer")
    kind = "long" if word_count(answer) >= long_answer_words else "short"
    templates = load_instructions()[kind]
    return templates[int(make_rng(rng_seed).integers(len(templates)))]


def build_dialogue(description: str, generator: DialogueGenerator, max_answer_words: int = MAX_ANSWER_WORDS) -> List[DialogueRound]:
    parse_description(description)
    rounds = generator.generate(render_prompt(description))
    if len(rounds) != ROUNDS:
        raise GeneratorError(f"generator returned {len(rounds)} rounds, expected {ROUNDS}")
    trimmed = []
    for r in rounds:
        if word_count(r.answer) > max_answer_words:
            logger.warning("Truncating a %d-word answer to %d words", word_count(r.answer), max_answer_words)
            r = DialogueRound(r.question, truncate_words(r.answer, max_answer_words))
        trimmed.append(r)
    return trimmed


# validation ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    record_id: str
    kind: str
    detail: str


@dataclass
class CorpusReport:
    records: int = 0
    rounds: int = 0
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and self.rounds == ROUNDS * self.records

    def invalid_ids(self) -> set:
        return {v.record_id for v in self.violations}

    def summary(self) -> str:
        kinds: Dict[str, int] = {}
        for v in self.violations:
            kinds[v.kind] = kinds.get(v.kind, 0) + 1
        detail = ", ".join(f"{k}={n}" for k, n in sorted(kinds.items())) or "none"
        return f"{self.records} records, {self.rounds} rounds, violations: {detail}"


def validate_record(record: FundusRecord, rulebook: Optional[RuleBook] = None, max_tokens: int = MAX_TOKENS) -> List[Violation]:
    book = rulebook or load_rulebook()
    found: List[Violation] = []
    rid = record.record_id
    if len(record.dialogue) != ROUNDS:
        found.append(Violation(rid, "round-count", f"{len(record.dialogue)} rounds, expected {ROUNDS}"))
    if not record.description.startswith(("Normal", "Abnormal")):
        found.append(Violation(rid, "description-prefix", "description must begin with Normal or Abnormal"))
    else:
        try:
            parsed = parse_description(record.description, book)
            if list(parsed.diseases) != [d for d in record.diseases if d != HEALTHY]:
                found.append(Violation(rid, "description-diseases", f"description names {list(parsed.diseases)}"))
        except ValidationError as exc:
            found.append(Violation(rid, "description-parse", str(exc)))
    try:
        expected = derive_signs(record.diseases, book)
        if list(record.signs) != expected:
            found.append(Violation(rid, "sign-mismatch", f"stored {record.signs}, derived {expected}"))
    except KeyError as exc:
        found.append(Violation(rid, "unknown-disease", str(exc)))
    for i, r in enumerate(record.dialogue, start=1):
        if tokenize(r.question + " " + r.answer, max_tokens).truncated:
            found.append(Violation(rid, "token-length", f"round {i} exceeds {max_tokens} tokens"))
    return found


def validate_corpus(records: Iterable[FundusRecord], max_tokens: int = MAX_TOKENS) -> CorpusReport:
    book = load_rulebook()
    report = CorpusReport()
    for record in records:
        report.records += 1
        report.rounds += len(record.dialogue)
        report.violations.extend(validate_record(record, book, max_tokens))
    return report


# corpus construction ---------------------------------------------------------------------


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1, desc: str = "Forge") -> List[R]:
    """Map over ``items`` on a thread pool; results keep input order."""
    if workers <= 1:
        return [fn(item) for item in tqdm(items, desc=desc)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc))


def sample_disease_sets(n: int, seed: int, max_diseases: int = 2, healthy_fraction: float = 0.2) -> List[List[str]]:
    book = load_rulebook()
    names = book.disease_names
    rng = make_rng(seed)
    sets: List[List[str]] = []
    for _ in range(n):
        if rng.random() < healthy_fraction:
            sets.append([])
            continue
        count = int(rng.integers(1, max_diseases + 1))
        picks = rng.choice(len(names), size=count, replace=False)
        sets.append([names[int(i)] for i in picks])
    return sets


def forge_fundus_corpus(
    out_dir: Path,
    settings: ForgeSettings,
    seed: int,
    generator: DialogueGenerator,
    image_suffix: str = ".ppm",
) -> List[FundusRecord]:
    """
    Draw disease sets, render images under ``out_dir/images`` and build descriptions,
    signs and three-round dialogues. Image paths are stored relative to ``out_dir``.
    """
    if settings.records < 0:
        raise ContractError("record count must be >= 0")
    disease_sets = sample_disease_sets(settings.records, seed, settings.max_diseases, settings.healthy_fraction)
    image_seeds = make_rng(seed + 1).integers(0, 2**31 - 1, size=settings.records)
    jobs = list(zip(range(settings.records), disease_sets, image_seeds.tolist()))

    def build(job) -> FundusRecord:
        index, diseases, image_seed = job
        record_id = f"rec-{index:05d}"
        abnormal = bool(diseases)
        signs = derive_signs(diseases)
        description = build_description(diseases, abnormal)
        image_rel = Path("images") / f"{record_id}{image_suffix}"
        write_image(out_dir / image_rel, synth_fundus_image(signs, settings.image_size, int(image_seed)))
        dialogue = build_dialogue(description, generator, settings.max_answer_words)
        return FundusRecord(
            record_id=record_id,
            image=image_rel.as_posix(),
            diseases=list(diseases) if abnormal else [HEALTHY],
            abnormal=abnormal,
            signs=signs,
            description=description,
            dialogue=dialogue,
        )

    records = ordered_map(build, jobs, settings.workers, desc="Forge records")
    logger.info("Forged %d fundus records (%d rounds)", len(records), sum(len(r.dialogue) for r in records))
    return records


def synth_pretrain_pairs(records: Sequence[FundusRecord], seed: int) -> List[PretrainPair]:
    """Caption pairs over forged images with seeded modality confidences."""
    rng = make_rng(seed)
    return [
        PretrainPair(image_ref=r.image, caption=r.description, modality=Modality.FUNDUS, confidence=float(rng.uniform(0.5, 1.0)))
        for r in records
    ]


def forge_pretrain_corpus(
    pairs: Iterable[PretrainPair],
    seed: int,
    modality_threshold: float = 0.5,
    long_answer_words: int = LONG_ANSWER_WORDS,
) -> List[CaptionDialogue]:
    """filter -> clean caption -> modality sentence -> instruction question."""
    pairs = list(pairs)
    kept = filter_modality(pairs, modality_threshold)
    logger.info("Kept %d of %d caption pairs after modality filtering", len(kept), len(pairs))
    samples: List[CaptionDialogue] = []
    for i, pair in enumerate(kept):
        answer = prepend_modality(clean_caption(pair.caption), pair.modality)
        template = select_instruction(answer, seed + i, long_answer_words)
        samples.append(
            CaptionDialogue(
                record_id=f"pair-{i:05d}",
                image=pair.image_ref,
                question=template.text,
                answer=answer,
                modality=pair.modality.value,
            )
        )
    return samples


# JSONL -----------------------------------------------------------------------------------


def write_corpus(path: Path, records: Iterable[Any]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_fundus_corpus(path: Path) -> List[FundusRecord]:
    return [FundusRecord.from_dict(row) for row in read_jsonl(path)]


def read_pretrain_corpus(path: Path) -> List[CaptionDialogue]:
    return [CaptionDialogue.from_dict(row) for row in read_jsonl(path)]


def read_pretrain_pairs(path: Path) -> List[PretrainPair]:
    return [PretrainPair.from_dict(row) for row in read_jsonl(path)]


def corpus_kind(path: Path) -> str:
    """Return "fundus" when rows carry sign vectors, "pretrain" for caption dialogues."""
    for row in read_jsonl(path):
        return "fundus" if "signs" in row else "pretrain"
    raise ContractError(f"corpus {path} is empty")
