"""Word-level tokenizer over the closed grammar vocabulary, and prompt pairs."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import grammar

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
DEFAULT_CONTEXT = 32

_NON_WORD = re.compile(r"[^a-z0-9]+")


def _words(text: str) -> list[str]:
    return _NON_WORD.sub(" ", text.lower()).split()


@lru_cache(maxsize=1)
def vocabulary() -> tuple[str, ...]:
    words = sorted({w for s in grammar.all_sentences() for w in _words(s)})
    return SPECIALS + tuple(words)


@lru_cache(maxsize=1)
def _index() -> dict[str, int]:
    return {w: i for i, w in enumerate(vocabulary())}


def tokenize(text: str, context_length: int = DEFAULT_CONTEXT) -> np.ndarray:
    """BOS + word ids + EOS, padded with PAD or truncated to ``context_length``.

    Truncation keeps EOS as the final token.
    """
    idx = _index()
    ids = [BOS] + [idx.get(w, UNK) for w in _words(text)] + [EOS]
    if len(ids) > context_length:
        ids = ids[:context_length - 1] + [EOS]
    ids += [PAD] * (context_length - len(ids))
    return np.asarray(ids, dtype=np.int64)


def eos_position(ids: np.ndarray) -> np.ndarray:
    """Index of the EOS token along the last axis."""
    return np.argmax(np.asarray(ids) == EOS, axis=-1)


@dataclass(frozen=True)
class PromptPair:
    primary: str
    auxiliary: str
    primary_ids: np.ndarray
    auxiliary_ids: np.ndarray

    @classmethod
    def from_text(cls, primary: str, auxiliary: str, context_length: int = DEFAULT_CONTEXT) -> "PromptPair":
        return cls(primary, auxiliary, tokenize(primary, context_length), tokenize(auxiliary, context_length))

    @property
    def primary_mask(self) -> np.ndarray:
        return self.primary_ids != PAD

    @property
    def auxiliary_mask(self) -> np.ndarray:
        return self.auxiliary_ids != PAD

    def concatenated_ids(self) -> np.ndarray:
        """Both prompts as one sentence (the "expanded text" variant)."""
        return tokenize(f"{self.primary} {self.auxiliary}", len(self.primary_ids))
