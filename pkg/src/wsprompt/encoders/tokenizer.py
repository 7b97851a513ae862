from __future__ import annotations

from typing import Iterable

import numpy as np

from ..corpus.labels import words

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")


class Tokenizer:
    """Lowercased word-level tokenizer with PAD/UNK/BOS/EOS specials."""

    def __init__(self, vocab: Iterable[str], max_len: int = 32):
        if max_len < 3:
            raise ValueError("max_len must leave room for BOS, EOS and one word")
        words_ = [w for w in vocab if w not in SPECIALS]
        self.itos: list[str] = list(SPECIALS) + sorted(set(words_))
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        self.max_len = max_len

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = (), max_len: int = 32) -> "Tokenizer":
        seen: set[str] = set()
        for t in list(texts) + list(extra):
            seen.update(words(t))
        return cls(seen, max_len=max_len)

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, text: str) -> list[int]:
        """Word ids without specials or padding."""
        return [self.stoi.get(w, UNK) for w in words(text)]

    def encode(self, text: str) -> np.ndarray:
        body = self.ids(text)[: self.max_len - 2]
        seq = [BOS, *body, EOS]
        return np.array(seq + [PAD] * (self.max_len - len(seq)), dtype=np.int64)

    def encode_batch(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))

    def is_special(self, idx: int) -> bool:
        return idx < len(SPECIALS)
