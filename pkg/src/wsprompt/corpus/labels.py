"""Rule-based report labeler, sentence filter and label-vector helpers."""

from __future__ import annotations

import re

import numpy as np

from .vocab import DEFAULT_VOCAB, ObservationVocabulary

NEGATION_CUES: tuple[tuple[str, ...], ...] = (("no",), ("without",), ("free", "of"), ("negative", "for"))
NEGATION_WINDOW = 3

_WORD = re.compile(r"[a-z0-9]+")
_SENTENCE = re.compile(r"[^.!?]*[.!?]+|[^.!?]+$")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.findall(text) if s.strip()]


def sentence_filter(report: str, min_tokens: int = 4) -> list[str]:
    """Sentences of ``report`` with at least ``min_tokens`` whitespace tokens, in order."""
    return [s for s in split_sentences(report) if len(s.split()) >= min_tokens]


def fix_no_finding(values: np.ndarray) -> np.ndarray:
    """Enforce the No-Finding rule: set iff no other observation is positive."""
    values = np.asarray(values, dtype=np.int8).copy()
    values[0] = 0 if values[1:].any() else 1
    return values


def is_valid_label_vector(values) -> bool:
    v = np.asarray(values)
    if v.shape != (14,) or not np.isin(v, (0, 1)).all():
        return False
    return bool(v[0] == (0 if v[1:].any() else 1))


def _negated(tokens: list[str], start: int) -> bool:
    window = tokens[max(0, start - NEGATION_WINDOW):start]
    for cue in NEGATION_CUES:
        n = len(cue)
        for i in range(len(window) - n + 1):
            if tuple(window[i:i + n]) == cue:
                return True
    return False


def _mentions(tokens: list[str], phrase: tuple[str, ...]) -> list[int]:
    n = len(phrase)
    return [i for i in range(len(tokens) - n + 1) if tuple(tokens[i:i + n]) == phrase]


def extract_labels(report: str, vocab: ObservationVocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """Multi-hot LabelVector from free text.

    An observation is positive when one of its synonyms occurs in a sentence
    with no negation cue among the three preceding tokens.
    """
    values = np.zeros(len(vocab), dtype=np.int8)
    phrases = [(k, tuple(s.split())) for k, name in enumerate(vocab.names) if k > 0
               for s in vocab.synonyms[name]]
    for sentence in split_sentences(report):
        tokens = words(sentence)
        for k, phrase in phrases:
            if values[k]:
                continue
            if any(not _negated(tokens, i) for i in _mentions(tokens, phrase)):
                values[k] = 1
    return fix_no_finding(values)
