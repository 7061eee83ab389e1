"""Byte-level tokenizer: 256 byte ids plus BOS/EOS/PAD."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence

from .config import MAX_TOKENS

logger = logging.getLogger(__name__)

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
SPECIAL_IDS = frozenset({BOS, EOS, PAD})


@dataclass(frozen=True)
class TokenizedText:
    ids: List[int]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


class ByteTokenizer:
    """Exact, vocabulary-free tokenizer over UTF-8 bytes."""

    vocab_size = VOCAB_SIZE

    def __init__(self, max_tokens: int = MAX_TOKENS) -> None:
        if max_tokens < 2:
            raise ValueError("max_tokens must leave room for BOS and EOS")
        self.max_tokens = max_tokens

    def encode(self, text: str, bos: bool = True, eos: bool = True) -> TokenizedText:
        body = list(text.encode("utf-8"))
        budget = self.max_tokens - int(bos) - int(eos)
        truncated = len(body) > budget
        if truncated:
            logger.debug("Truncating %d-byte text to %d tokens", len(body), self.max_tokens)
            body = body[:budget]
        ids = ([BOS] if bos else []) + body + ([EOS] if eos else [])
        return TokenizedText(ids=ids, truncated=truncated)

    def decode(self, ids: Iterable[int]) -> str:
        data = bytes(i for i in ids if i not in SPECIAL_IDS and 0 <= i < 256)
        return data.decode("utf-8", errors="replace")


_default = ByteTokenizer()


def tokenize(text: str, max_tokens: int = MAX_TOKENS) -> TokenizedText:
    """bytes + BOS/EOS, capped at ``max_tokens`` with an explicit truncation flag."""
    tokenizer = _default if max_tokens == _default.max_tokens else ByteTokenizer(max_tokens)
    return tokenizer.encode(text)


def detokenize(ids: Iterable[int]) -> str:
    return _default.decode(ids)


def encode_prompt(question: str) -> List[int]:
    """BOS + question bytes + newline; the model answers after the newline."""
    return [BOS] + list((question + "\n").encode("utf-8"))


def encode_answer(answer: str) -> List[int]:
    return list(answer.encode("utf-8")) + [EOS]


def decode_answer(generated: Sequence[int]) -> str:
    """Text of generated ids up to (not including) the first EOS."""
    ids = list(generated)
    if EOS in ids:
        ids = ids[: ids.index(EOS)]
    return detokenize(ids)
