"""
Three-round dialogue generation for fundus descriptions.

HTTP contract shared by ``RemoteDialogueGenerator`` and ``create_dialogue_app``::

    POST /dialogue   {"prompt": "<rendered prompt>"}
    200              {"rounds": [{"question": "...", "answer": "..."}, x3]}
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Protocol

import requests
from flask import Flask, jsonify, request

from .assets import load_dialogue_prompt, load_rulebook
from .config import SIGN_NAMES
from .descriptions import parse_description
from .errors import FundusVlmError, GeneratorError, ValidationError
from .utils import word_count

logger = logging.getLogger(__name__)

KEYWORD = "[Keyword]"
ROUNDS = 3
MAX_ANSWER_WORDS = 200


@dataclass(frozen=True)
class DialogueRound:
    question: str
    answer: str

    def to_dict(self) -> Dict[str, str]:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: Dict[str, Any]) -> "DialogueRound":
        return cls(question=str(row["question"]), answer=str(row["answer"]))


class DialogueGenerator(Protocol):
    def generate(self, prompt: str) -> List[DialogueRound]: ...


def render_prompt(keyword: str, template: Optional[str] = None) -> str:
    template = template or load_dialogue_prompt()
    return template.replace(KEYWORD, keyword)


def extract_keyword(prompt: str, template: Optional[str] = None) -> str:
    """Recover the description filled into a rendered prompt."""
    template = template or load_dialogue_prompt()
    head, _, tail = template.partition(KEYWORD)
    if not prompt.startswith(head) or not prompt.endswith(tail) or len(prompt) < len(head) + len(tail):
        raise ValidationError([("prompt", "does not follow the dialogue prompt template")])
    return prompt[len(head) : len(prompt) - len(tail)]


def truncate_words(text: str, limit: int = MAX_ANSWER_WORDS) -> str:
    words = text.split()
    if len(words) <= limit:
        return text
    return " ".join(words[:limit])


def parse_rounds(payload: Any) -> List[DialogueRound]:
    rounds = payload.get("rounds") if isinstance(payload, dict) else None
    if not isinstance(rounds, list) or len(rounds) != ROUNDS:
        raise ValidationError([("rounds", f"expected {ROUNDS} question/answer rounds")])
    try:
        return [DialogueRound.from_dict(r) for r in rounds]
    except (KeyError, TypeError) as exc:
        raise ValidationError([("rounds", f"malformed round ({exc})")]) from exc


def _join(items: List[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


class TemplateDialogueGenerator:
    """Offline generator: diagnosis, evidence and advice rounds built from the description."""

    def generate(self, prompt: str) -> List[DialogueRound]:
        description = extract_keyword(prompt)
        parsed = parse_description(description)
        book = load_rulebook()
        if not parsed.abnormal:
            clause = parsed.clauses[0]
            rounds = [
                DialogueRound(
                    "What does my fundus image show?",
                    f"Normal. The fundus image looks healthy: {clause}.",
                ),
                DialogueRound(
                    "Which findings support that the image is normal?",
                    f"The examination shows the following: {clause}. No hemorrhage, exudate or vascular abnormality is visible.",
                ),
                DialogueRound(
                    "What should I do next?",
                    "No apparent retinopathy was found. Keep a routine eye examination every year, "
                    "and see an ophthalmologist sooner if your vision changes.",
                ),
            ]
        else:
            names = list(parsed.diseases)
            signs: List[str] = []
            for name in names:
                for sign in book.signs_of(name):
                    if sign not in signs:
                        signs.append(sign)
            signs.sort(key=SIGN_NAMES.index)
            evidence = "; ".join(f"for {n}, {c[0].lower() + c[1:]}" for n, c in zip(names, parsed.clauses))
            rounds = [
                DialogueRound(
                    "What does my fundus image show?",
                    f"Abnormal. The image is consistent with {_join(names)}.",
                ),
                DialogueRound(
                    "What signs in the image support this diagnosis?",
                    f"The key findings are: {evidence}. These belong to the {_join(signs)} sign categories.",
                ),
                DialogueRound(
                    "What should I do next?",
                    f"Please arrange a follow-up with an ophthalmologist to confirm {_join(names)}. "
                    "Further examinations such as optical coherence tomography or angiography may be "
                    "needed, and treatment depends on their results.",
                ),
            ]
        return [DialogueRound(r.question, truncate_words(r.answer)) for r in rounds]


class RemoteDialogueGenerator:
    """Calls an HTTP text-generation service; one retry, then GeneratorError."""

    def __init__(self, url: str, timeout: float = 60.0, session: Optional[requests.Session] = None) -> None:
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()

    def _request(self, prompt: str) -> List[DialogueRound]:
        response = self.session.post(self.url, json={"prompt": prompt}, timeout=self.timeout)
        response.raise_for_status()
        return parse_rounds(response.json())

    def generate(self, prompt: str) -> List[DialogueRound]:
        last_exc: Optional[Exception] = None
        for attempt in (1, 2):
            try:
                return self._request(prompt)
            except (requests.RequestException, ValueError) as exc:
                last_exc = exc
                logger.warning("Dialogue request to %s failed (attempt %d/2): %s", self.url, attempt, exc)
        raise GeneratorError(f"dialogue generator at {self.url} failed after retry") from last_exc


def create_dialogue_app(generator: Optional[DialogueGenerator] = None) -> Flask:
    """Reference service implementing the dialogue contract."""
    generator = generator or TemplateDialogueGenerator()
    app = Flask(__name__)

    @app.get("/health")
    def health():
        return jsonify({"status": "ok"})

    @app.post("/dialogue")
    def dialogue():
        payload = request.get_json(silent=True)
        prompt = payload.get("prompt") if isinstance(payload, dict) else None
        if not isinstance(prompt, str) or not prompt.strip():
            return jsonify({"error": "request body must be JSON with a non-empty 'prompt'"}), 400
        try:
            rounds = generator.generate(prompt)
        except ValidationError as exc:
            return jsonify({"error": str(exc)}), 422
        except FundusVlmError as exc:
            logger.error("Dialogue generation failed: %s", exc)
            return jsonify({"error": str(exc)}), 502
        return jsonify({"rounds": [r.to_dict() for r in rounds]})

    return app


def words_ok(rounds: List[DialogueRound], limit: int = MAX_ANSWER_WORDS) -> bool:
    return all(word_count(r.answer) <= limit for r in rounds)
