"""
Clinical evaluation harness over JSON-lines case files.

One case per line::

    {"id": "case-0001",
     "truth": {"required": ["Diabetic Retinopathy"], "optional": ["Cataract"]},
     "predictions": {"model": [["Diabetic Retinopathy"], [...], [...]], "baseline": [...]},
     "relevance": [{"model": 4, "baseline": 3, "doctor-a": 2, "doctor-b": 1}, ...],
     "errors": {"missed": "none", "incorrect": "minor"},
     "timing": {"doctor_seconds": 100.0, "assisted_seconds": 73.0,
                "doctor_correct": false, "assisted_correct": true, "condition": "junior"}}

``relevance``, ``errors`` and ``timing`` are optional; ``predictions`` holds one
disease set per dialogue round for every responder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from .assets import HEALTHY, RuleBook, load_rulebook
from .config import SIGN_NAMES, EvalSettings
from .errors import ContractError, RuleLookupError, ValidationError
from .forge import FundusRecord, derive_signs
from .model import ModelParams
from .stats import (
    DEFAULT_RESAMPLES,
    UNDEFINED,
    Interval,
    Rate,
    bootstrap_ci,
    bootstrap_reduction_ci,
    proportion_test,
    rate,
    t_test_two_sided,
)
from .train import answer_log_likelihood, load_image
from .utils import make_rng, read_jsonl

logger = logging.getLogger(__name__)

ROUNDS = 3
RELEVANCE_RANKS = frozenset({1, 2, 3, 4})
SEVERITIES = ("none", "minor", "major")
ERROR_DIMENSIONS = ("missed", "incorrect")
SCENARIOS = ("overall", "single-disease", "multi-disease", "single-sign", "multi-sign")
MCQ_OPTIONS = 4
MCQ_QUESTION = "Which disease does this fundus image show?"
REPORT_COLUMNS = ["name", "responder", "subset", "k", "n", "value", "lower", "upper", "p_value"]


# case model ------------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    required: FrozenSet[str]
    optional: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        overlap = self.required & self.optional
        if overlap:
            raise ValidationError([("truth", f"diseases both required and optional: {sorted(overlap)}")])

    @property
    def healthy(self) -> bool:
        return self.required == {HEALTHY}

    @classmethod
    def from_dict(cls, row: Mapping[str, Any]) -> "GroundTruth":
        return cls(required=frozenset(row.get("required", [])), optional=frozenset(row.get("optional", [])))


@dataclass(frozen=True)
class AssistedRecord:
    """Paired reading of one case by a doctor alone and by the doctor with model assistance."""

    case_id: str
    doctor_seconds: float
    assisted_seconds: float
    doctor_correct: bool
    assisted_correct: bool
    condition: str = "all"

    @classmethod
    def from_dict(cls, case_id: str, row: Mapping[str, Any]) -> "AssistedRecord":
        return cls(
            case_id=case_id,
            doctor_seconds=float(row["doctor_seconds"]),
            assisted_seconds=float(row["assisted_seconds"]),
            doctor_correct=bool(row["doctor_correct"]),
            assisted_correct=bool(row["assisted_correct"]),
            condition=str(row.get("condition", "all")),
        )


@dataclass
class EvalCase:
    case_id: str
    truth: GroundTruth
    predictions: Dict[str, List[FrozenSet[str]]] = field(default_factory=dict)
    relevance: List[Dict[str, int]] = field(default_factory=list)
    errors: Optional[Dict[str, str]] = None
    timing: Optional[AssistedRecord] = None

    @classmethod
    def from_dict(cls, row: Mapping[str, Any]) -> "EvalCase":
        case_id = str(row.get("id", ""))
        if not case_id:
            raise ValidationError([("id", "every case needs a non-empty id")])
        try:
            truth = GroundTruth.from_dict(row["truth"])
            predictions = {
                str(name): [frozenset(str(d) for d in rnd) for rnd in rounds]
                for name, rounds in row.get("predictions", {}).items()
            }
            relevance = [{str(k): int(v) for k, v in rnd.items()} for rnd in row.get("relevance", [])]
            timing = AssistedRecord.from_dict(case_id, row["timing"]) if row.get("timing") else None
        except ValidationError as exc:
            raise ValidationError([(f"{case_id}.{f}", p) for f, p in exc.problems]) from exc
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError([(case_id, f"malformed case ({exc})")]) from exc
        errors = {str(k): str(v) for k, v in row["errors"].items()} if row.get("errors") else None
        return cls(case_id=case_id, truth=truth, predictions=predictions, relevance=relevance, errors=errors, timing=timing)

    def prediction(self, responder: str, round_index: int = 0) -> FrozenSet[str]:
        rounds = self.predictions.get(responder)
        if rounds is None:
            raise ValidationError([(self.case_id, f"no predictions for responder {responder!r}")])
        if round_index >= len(rounds):
            raise ValidationError([(self.case_id, f"responder {responder!r} has no round {round_index + 1}")])
        return rounds[round_index]


def read_cases(path: Path) -> List[EvalCase]:
    cases = [EvalCase.from_dict(row) for row in read_jsonl(path)]
    seen: Dict[str, int] = {}
    for case in cases:
        seen[case.case_id] = seen.get(case.case_id, 0) + 1
    duplicates = sorted(cid for cid, n in seen.items() if n > 1)
    if duplicates:
        raise ValidationError([("id", f"duplicate case ids: {duplicates}")])
    logger.info("Loaded %d evaluation cases from %s", len(cases), path)
    return cases


def responders_of(cases: Iterable[EvalCase]) -> List[str]:
    """Responder names in order of first appearance."""
    names: List[str] = []
    for case in cases:
        for name in case.predictions:
            if name not in names:
                names.append(name)
    return names


# accuracy ---------------------------------------------------------------------------------


def judge_accuracy(predicted: Iterable[str], truth: GroundTruth) -> bool:
    """Every required disease named, nothing outside required + optional."""
    answer = frozenset(predicted)
    return truth.required <= answer and answer <= truth.required | truth.optional


def round_correct(case: EvalCase, responder: str, round_index: int = 0) -> bool:
    return judge_accuracy(case.prediction(responder, round_index), case.truth)


def accuracy(cases: Sequence[EvalCase], responder: str, round_index: int = 0, confidence: float = 0.95) -> Rate:
    k = sum(round_correct(c, responder, round_index) for c in cases)
    return rate(k, len(cases), confidence)


def per_round_accuracy(cases: Sequence[EvalCase], responder: str, confidence: float = 0.95) -> List[Rate]:
    return [accuracy(cases, responder, r, confidence) for r in range(ROUNDS)]


def per_disease_accuracy(
    cases: Sequence[EvalCase],
    responder: str,
    round_index: int = 0,
    confidence: float = 0.95,
) -> Dict[str, Rate]:
    """A case counts toward every disease in its required set."""
    hits: Dict[str, List[bool]] = {}
    for case in cases:
        ok = round_correct(case, responder, round_index)
        for disease in sorted(case.truth.required):
            hits.setdefault(disease, []).append(ok)
    return {d: rate(sum(v), len(v), confidence) for d, v in sorted(hits.items())}


def _case_signs(case: EvalCase, rulebook: RuleBook) -> Optional[List[int]]:
    try:
        return derive_signs(sorted(case.truth.required - {HEALTHY}), rulebook)
    except RuleLookupError as exc:
        logger.debug("Case %s has no sign vector: %s", case.case_id, exc)
        return None


def per_sign_accuracy(
    cases: Sequence[EvalCase],
    responder: str,
    round_index: int = 0,
    confidence: float = 0.95,
    rulebook: Optional[RuleBook] = None,
) -> Dict[str, Rate]:
    """A case counts toward every sign category derived from its required diseases."""
    book = rulebook or load_rulebook()
    hits: Dict[str, List[bool]] = {name: [] for name in SIGN_NAMES}
    for case in cases:
        signs = _case_signs(case, book)
        if signs is None:
            continue
        ok = round_correct(case, responder, round_index)
        for name, flag in zip(SIGN_NAMES, signs):
            if flag:
                hits[name].append(ok)
    return {name: rate(sum(v), len(v), confidence) for name, v in hits.items()}


def misdiagnosis_rate(cases: Sequence[EvalCase], responder: str, round_index: int = 0, confidence: float = 0.95) -> Rate:
    """1 - accuracy over the cases whose ground truth is Healthy."""
    healthy = [c for c in cases if c.truth.healthy]
    if not healthy:
        raise ContractError("misdiagnosis_rate needs at least one case with Healthy ground truth")
    wrong = sum(not round_correct(c, responder, round_index) for c in healthy)
    return rate(wrong, len(healthy), confidence)


# relevance ----------------------------------------------------------------------------------


def check_relevance(case: EvalCase) -> None:
    for i, ranks in enumerate(case.relevance, start=1):
        if len(ranks) != len(RELEVANCE_RANKS) or set(ranks.values()) != RELEVANCE_RANKS:
            raise ValidationError([(case.case_id, f"round {i} relevance ranks {sorted(ranks.values())} are not a permutation of 1..4")])


@dataclass(frozen=True)
class RelevanceSummary:
    responder: str
    mean: float
    interval: Interval
    ranks: List[int]


def relevance_stats(
    cases: Sequence[EvalCase],
    resamples: int = 10_000,
    confidence: float = 0.95,
    seed: int = 0,
) -> Dict[str, RelevanceSummary]:
    """Mean relevance rank per responder over every ranked round, with a bootstrap CI."""
    ranks: Dict[str, List[int]] = {}
    for case in cases:
        check_relevance(case)
        for rnd in case.relevance:
            for name, value in rnd.items():
                ranks.setdefault(name, []).append(value)
    summaries: Dict[str, RelevanceSummary] = {}
    for name, values in ranks.items():
        interval = bootstrap_ci(values, resamples, confidence, seed)
        summaries[name] = RelevanceSummary(name, float(np.mean(values)), interval, values)
    return summaries


def relevance_by_correctness(cases: Sequence[EvalCase], responder: str) -> Dict[str, List[int]]:
    """Ranks of ``responder`` split by whether its answer in that round was correct."""
    split: Dict[str, List[int]] = {"correct": [], "incorrect": []}
    for case in cases:
        check_relevance(case)
        for r, ranks in enumerate(case.relevance):
            if responder not in ranks or r >= len(case.predictions.get(responder, [])):
                continue
            key = "correct" if round_correct(case, responder, r) else "incorrect"
            split[key].append(ranks[responder])
    return split


# correction ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionStats:
    """Round-3 counts are unconditional on the round-2 outcome."""

    overall: Rate
    round2: Rate
    round3: Rate
    round3_conditional: bool = False


def correction_stats(cases: Sequence[EvalCase], responder: str, confidence: float = 0.95) -> CorrectionStats:
    """Among cases answered wrongly in round 1: corrected in round 2, round 3, or either."""
    wrong_first = 0
    either = second = third = 0
    for case in cases:
        rounds = case.predictions.get(responder, [])
        if len(rounds) != ROUNDS:
            raise ValidationError([(case.case_id, f"responder {responder!r} has {len(rounds)} rounds, expected {ROUNDS}")])
        outcome = [judge_accuracy(p, case.truth) for p in rounds]
        if outcome[0]:
            continue
        wrong_first += 1
        second += outcome[1]
        third += outcome[2]
        either += outcome[1] or outcome[2]
    if wrong_first == 0:
        logger.warning("No case was answered wrongly in round 1 by %s; correction rates are %s", responder, UNDEFINED)
    return CorrectionStats(
        overall=rate(either, wrong_first, confidence),
        round2=rate(second, wrong_first, confidence),
        round3=rate(third, wrong_first, confidence),
    )


# multiple choice ------------------------------------------------------------------------------


@dataclass(frozen=True)
class MultipleChoiceCase:
    case_id: str
    label: str
    image: Optional[str] = None


class Responder(Protocol):
    def choose(self, case: MultipleChoiceCase, options: Sequence[str]) -> str: ...


class OracleResponder:
    def choose(self, case: MultipleChoiceCase, options: Sequence[str]) -> str:
        return case.label


class RandomResponder:
    """Uniform pick among the options from its own seeded stream."""

    def __init__(self, seed: int = 0) -> None:
        self._rng = make_rng(seed)

    def choose(self, case: MultipleChoiceCase, options: Sequence[str]) -> str:
        return options[int(self._rng.integers(len(options)))]


class CallableResponder:
    def __init__(self, fn: Callable[[MultipleChoiceCase, Sequence[str]], str]) -> None:
        self._fn = fn

    def choose(self, case: MultipleChoiceCase, options: Sequence[str]) -> str:
        return self._fn(case, options)


class ModelResponder:
    """Picks the option the model finds most likely as the answer to ``MCQ_QUESTION``."""

    def __init__(
        self,
        params: ModelParams,
        image_root: Path = Path("."),
        contrast_factor: float = 1.0,
        color_space: str = "rgb",
    ) -> None:
        self.params = params
        self.image_root = image_root
        self.contrast_factor = contrast_factor
        self.color_space = color_space

    def choose(self, case: MultipleChoiceCase, options: Sequence[str]) -> str:
        if case.image is None:
            raise ContractError(f"case {case.case_id} has no image for the model responder")
        image = load_image(self.image_root / case.image, self.contrast_factor, self.color_space)
        scores = [answer_log_likelihood(image, MCQ_QUESTION, option, self.params) for option in options]
        return options[int(np.argmax(scores))]


def mcq_cases_from_corpus(records: Iterable[FundusRecord]) -> List[MultipleChoiceCase]:
    """Single-label records (one disease, or Healthy) become multiple-choice cases."""
    cases = [MultipleChoiceCase(r.record_id, r.diseases[0], r.image) for r in records if len(r.diseases) == 1]
    logger.info("Built %d multiple-choice cases from single-label records", len(cases))
    return cases


def label_universe(rulebook: Optional[RuleBook] = None) -> List[str]:
    book = rulebook or load_rulebook()
    return list(book.disease_names) + [HEALTHY]


def build_options(label: str, universe: Sequence[str], rng: np.random.Generator) -> List[str]:
    """The correct label plus three distinct distractors, in seeded random order."""
    pool = [name for name in universe if name != label]
    picks = rng.choice(len(pool), size=MCQ_OPTIONS - 1, replace=False)
    options = [label] + [pool[int(i)] for i in picks]
    return [options[int(i)] for i in rng.permutation(MCQ_OPTIONS)]


def synth_mcq_cases(n: int, universe: Sequence[str], seed: int) -> List[MultipleChoiceCase]:
    rng = make_rng(seed)
    return [MultipleChoiceCase(f"mcq-{i:05d}", universe[int(rng.integers(len(universe)))]) for i in range(n)]


@dataclass
class MultipleChoiceResult:
    overall: Rate
    per_label: Dict[str, Rate]
    options: List[List[str]]
    picks: List[str]


def multiple_choice_eval(
    cases: Sequence[MultipleChoiceCase],
    universe: Sequence[str],
    responder: Responder,
    seed: int = 0,
    confidence: float = 0.95,
) -> MultipleChoiceResult:
    labels = list(dict.fromkeys(universe))
    if len(labels) < MCQ_OPTIONS:
        raise ContractError(f"multiple choice needs at least {MCQ_OPTIONS} distinct labels, got {len(labels)}")
    rng = make_rng(seed)
    options_all: List[List[str]] = []
    picks: List[str] = []
    hits: Dict[str, List[bool]] = {}
    for case in cases:
        if case.label not in labels:
            raise ContractError(f"case {case.case_id}: label {case.label!r} is not in the label universe")
        options = build_options(case.label, labels, rng)
        pick = responder.choose(case, options)
        if pick not in options:
            logger.warning("Case %s: responder picked %r, which is not an option", case.case_id, pick)
        options_all.append(options)
        picks.append(pick)
        hits.setdefault(case.label, []).append(pick == case.label)
    k = sum(sum(v) for v in hits.values())
    return MultipleChoiceResult(
        overall=rate(k, len(cases), confidence),
        per_label={label: rate(sum(v), len(v), confidence) for label, v in sorted(hits.items())},
        options=options_all,
        picks=picks,
    )


# error taxonomy -------------------------------------------------------------------------------


@dataclass
class TaxonomySubset:
    scenario: str
    error_free: Dict[str, Rate]
    crosstab: pd.DataFrame

    @property
    def n(self) -> int:
        return int(self.crosstab.to_numpy().sum())


def _severities(case: EvalCase) -> Dict[str, str]:
    labels = case.errors or {}
    problems = []
    for dim in ERROR_DIMENSIONS:
        if labels.get(dim) not in SEVERITIES:
            problems.append((f"{case.case_id}.errors.{dim}", f"expected one of {list(SEVERITIES)}, got {labels.get(dim)!r}"))
    if problems:
        raise ValidationError(problems)
    return {dim: labels[dim] for dim in ERROR_DIMENSIONS}


def _taxonomy(scenario: str, labelled: Sequence[Dict[str, str]], confidence: float) -> TaxonomySubset:
    counts = np.zeros((len(SEVERITIES), len(SEVERITIES)), dtype=np.int64)
    for labels in labelled:
        counts[SEVERITIES.index(labels["missed"]), SEVERITIES.index(labels["incorrect"])] += 1
    crosstab = pd.DataFrame(counts, index=pd.Index(SEVERITIES, name="missed"), columns=pd.Index(SEVERITIES, name="incorrect"))
    error_free = {dim: rate(sum(lab[dim] == "none" for lab in labelled), len(labelled), confidence) for dim in ERROR_DIMENSIONS}
    return TaxonomySubset(scenario, error_free, crosstab)


def error_taxonomy(
    cases: Sequence[EvalCase],
    confidence: float = 0.95,
    rulebook: Optional[RuleBook] = None,
) -> Dict[str, TaxonomySubset]:
    """Error-free rates and the missed x incorrect severity table, overall and per scenario."""
    book = rulebook or load_rulebook()
    groups: Dict[str, List[Dict[str, str]]] = {name: [] for name in SCENARIOS}
    for case in cases:
        labels = _severities(case)
        groups["overall"].append(labels)
        groups["single-disease" if len(case.truth.required) <= 1 else "multi-disease"].append(labels)
        signs = _case_signs(case, book)
        if signs is not None:
            groups["single-sign" if sum(signs) <= 1 else "multi-sign"].append(labels)
    return {name: _taxonomy(name, labelled, confidence) for name, labelled in groups.items()}


# assisted diagnosis ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssistedComparison:
    n: int
    time_reduction: Optional[float]
    accuracy_increase_pp: float
    doctor_accuracy: Rate
    assisted_accuracy: Rate
    time_reduction_ci: Optional[Interval] = None
    accuracy_increase_ci: Optional[Interval] = None


def _compare(records: Sequence[AssistedRecord], confidence: float, resamples: int, seed: int) -> AssistedComparison:
    n = len(records)
    doctor_times = [r.doctor_seconds for r in records]
    assisted_times = [r.assisted_seconds for r in records]
    t_doc = float(np.mean(doctor_times))
    t_both = float(np.mean(assisted_times))
    doctor = rate(sum(r.doctor_correct for r in records), n, confidence)
    assisted = rate(sum(r.assisted_correct for r in records), n, confidence)
    return AssistedComparison(
        n=n,
        time_reduction=(t_doc - t_both) / t_doc if t_doc != 0.0 else None,
        accuracy_increase_pp=100.0 * (assisted.k - doctor.k) / n,
        doctor_accuracy=doctor,
        assisted_accuracy=assisted,
        time_reduction_ci=(
            bootstrap_reduction_ci(doctor_times, assisted_times, resamples, confidence, seed) if t_doc != 0.0 else None
        ),
        accuracy_increase_ci=bootstrap_ci(
            [100.0 * (int(r.assisted_correct) - int(r.doctor_correct)) for r in records], resamples, confidence, seed
        ),
    )


def assisted_comparison(
    records: Sequence[AssistedRecord],
    confidence: float = 0.95,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> Dict[str, AssistedComparison]:
    """Time reduction (fraction of the unassisted time) and accuracy gain in percentage points, overall and per condition."""
    if not records:
        raise ContractError("assisted_comparison needs at least one paired record")
    result = {"overall": _compare(records, confidence, resamples, seed)}
    conditions = sorted({r.condition for r in records})
    if conditions != ["all"]:
        for condition in conditions:
            result[condition] = _compare([r for r in records if r.condition == condition], confidence, resamples, seed)
    return result


# report ---------------------------------------------------------------------------------------


@dataclass
class ReportRow:
    name: str
    responder: str
    subset: str
    k: Optional[int]
    n: int
    value: Optional[float]
    lower: Optional[float] = None
    upper: Optional[float] = None
    p_value: Optional[float] = None

    @classmethod
    def from_rate(cls, name: str, responder: str, subset: str, r: Rate, p_value: Optional[float] = None) -> "ReportRow":
        lower = r.interval.lower if r.interval else None
        upper = r.interval.upper if r.interval else None
        return cls(name, responder, subset, r.k, r.n, r.value, lower, upper, p_value)


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.rows], columns=REPORT_COLUMNS)

    def find(self, name: str, responder: str = "", subset: str = "") -> ReportRow:
        for row in self.rows:
            if row.name == name and row.responder == responder and row.subset == subset:
                return row
        raise KeyError((name, responder, subset))

    def summary(self) -> str:
        return summarize_frame(self.to_frame(), self.notes)

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        self.to_frame().to_csv(csv_path, index=False)
        (out_dir / "summary.txt").write_text(self.summary() + "\n", encoding="utf-8")
        logger.info("Wrote %d report rows to %s", len(self.rows), csv_path)
        return csv_path


def _fmt(value: Any) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return UNDEFINED
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def summarize_frame(frame: pd.DataFrame, notes: Sequence[str] = ()) -> str:
    lines: List[str] = []
    for name, group in frame.groupby("name", sort=False):
        lines.append(f"{name}:")
        for row in group.itertuples(index=False):
            label = " / ".join(str(x) for x in (row.responder, row.subset) if isinstance(x, str) and x)
            count = f"{int(row.k)}/{int(row.n)}" if pd.notna(row.k) else f"n={int(row.n)}"
            ci = f" [{_fmt(row.lower)}, {_fmt(row.upper)}]" if pd.notna(row.lower) else ""
            p = f" p={_fmt(row.p_value)}" if pd.notna(row.p_value) else ""
            lines.append(f"  {label or '-'}: {_fmt(row.value)}{ci} ({count}){p}")
    lines.extend(f"note: {n}" for n in notes)
    return "\n".join(lines)


def evaluate(cases: Sequence[EvalCase], settings: Optional[EvalSettings] = None, seed: int = 0) -> EvalReport:
    """Every statistic of the harness, one report row each; p-values against the reference responder."""
    settings = settings or EvalSettings()
    if not cases:
        raise ContractError("evaluate needs at least one case")
    conf = settings.confidence
    responders = list(settings.responders) or responders_of(cases)
    reference = settings.reference_responder
    if reference is not None and reference not in responders:
        raise ValidationError([("eval.reference_responder", f"{reference!r} is not among responders {responders}")])
    report = EvalReport()
    rows = report.rows

    ref_acc = accuracy(cases, reference, 0, conf) if reference else None
    for name in responders:
        acc = accuracy(cases, name, 0, conf)
        p = proportion_test(acc.k, acc.n, ref_acc.k, ref_acc.n, conf) if ref_acc and name != reference else None
        rows.append(ReportRow.from_rate("accuracy", name, "round1", acc, p))
        for r, per_round in enumerate(per_round_accuracy(cases, name, conf)[1:], start=2):
            rows.append(ReportRow.from_rate("accuracy", name, f"round{r}", per_round))
        correction = correction_stats(cases, name, conf)
        rows.append(ReportRow.from_rate("correction", name, "overall", correction.overall))
        rows.append(ReportRow.from_rate("correction", name, "round2", correction.round2))
        rows.append(ReportRow.from_rate("correction", name, "round3-unconditional", correction.round3))
        if any(c.truth.healthy for c in cases):
            rows.append(ReportRow.from_rate("misdiagnosis", name, "healthy", misdiagnosis_rate(cases, name, 0, conf)))
        for disease, r in per_disease_accuracy(cases, name, 0, conf).items():
            rows.append(ReportRow.from_rate("disease_accuracy", name, disease, r))
        for sign, r in per_sign_accuracy(cases, name, 0, conf).items():
            rows.append(ReportRow.from_rate("sign_accuracy", name, sign, r))
    report.notes.append("round-3 correction counts are unconditional on the round-2 outcome")

    if any(c.relevance for c in cases):
        relevance = relevance_stats(cases, settings.resamples, conf, seed)
        ref_ranks = relevance[reference].ranks if reference in relevance else None
        short: List[str] = []
        for name, summary in relevance.items():
            p = None
            if ref_ranks is not None and name != reference:
                if min(len(summary.ranks), len(ref_ranks)) >= 2:
                    p = t_test_two_sided(summary.ranks, ref_ranks)
                else:
                    short.append(name)
            rows.append(
                ReportRow("relevance", name, "all-rounds", None, len(summary.ranks), summary.mean, summary.interval.lower, summary.interval.upper, p)
            )
            if name in responders:
                for key, values in relevance_by_correctness(cases, name).items():
                    if not values:
                        rows.append(ReportRow("relevance", name, key, None, 0, None))
                        continue
                    ci = bootstrap_ci(values, settings.resamples, conf, seed)
                    rows.append(ReportRow("relevance", name, key, None, len(values), ci.point, ci.lower, ci.upper))
        if short:
            report.notes.append(f"relevance p-value undefined for {', '.join(short)}: fewer than two ranks in a sample")

    labelled = [c for c in cases if c.errors]
    if labelled:
        if len(labelled) < len(cases):
            report.notes.append(f"error taxonomy covers {len(labelled)} of {len(cases)} cases")
        for scenario, subset in error_taxonomy(labelled, conf).items():
            for dim, r in subset.error_free.items():
                rows.append(ReportRow.from_rate(f"error_free_{dim}", "", scenario, r))

    timed = [c.timing for c in cases if c.timing is not None]
    if timed:
        for condition, cmp in assisted_comparison(timed, conf, settings.resamples, seed).items():
            t_ci, pp_ci = cmp.time_reduction_ci, cmp.accuracy_increase_ci
            t_lower, t_upper = (t_ci.lower, t_ci.upper) if t_ci else (None, None)
            rows.append(ReportRow("time_reduction", "", condition, None, cmp.n, cmp.time_reduction, t_lower, t_upper))
            rows.append(
                ReportRow("accuracy_increase_pp", "", condition, None, cmp.n, cmp.accuracy_increase_pp, pp_ci.lower, pp_ci.upper)
            )

    logger.info("Evaluated %d cases for %d responders (%d report rows)", len(cases), len(responders), len(rows))
    return report


def render_report(path: Path) -> str:
    """Text summary of an evaluation ``report.csv`` or a training ``metrics.csv``."""
    frame = pd.read_csv(path)
    if list(frame.columns) == REPORT_COLUMNS:
        frame[["responder", "subset"]] = frame[["responder", "subset"]].fillna("")
        return summarize_frame(frame)
    if {"step", "total"} <= set(frame.columns):
        return summarize_metrics(frame)
    raise ValidationError([(str(path), "neither an evaluation report nor a training metrics log")])


def summarize_metrics(frame: pd.DataFrame, window: int = 10) -> str:
    if frame.empty:
        return "no training steps recorded"
    smoothed = frame["total"].rolling(window, min_periods=1).mean()
    lines = [f"steps: {int(frame['step'].iloc[-1])}, epochs: {int(frame['epoch'].iloc[-1])}"]
    for column in ("clip", "cls", "llm", "total"):
        series = frame[column].dropna()
        if series.empty:
            continue
        lines.append(f"{column}: first {series.iloc[0]:.4f}, last {series.iloc[-1]:.4f}, min {series.min():.4f}")
    lines.append(f"smoothed total (window {window}): {smoothed.iloc[0]:.4f} -> {smoothed.iloc[-1]:.4f}")
    if "sign_acc" in frame and frame["sign_acc"].notna().any():
        lines.append(f"sign accuracy (last): {frame['sign_acc'].dropna().iloc[-1]:.4f}")
    return "\n".join(lines)
