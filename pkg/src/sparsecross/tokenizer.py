"""Deterministic toy tokenizer: whitespace split over a fixed vocabulary.

Token ids 0..2 are reserved for the classification, separator, and
unknown markers; every other id maps to one vocabulary word.
"""

from __future__ import annotations

from dataclasses import dataclass

CLS_ID = 0
SEP_ID = 1
UNK_ID = 2
NUM_SPECIAL_TOKENS = 3


@dataclass(frozen=True)
class Vocabulary:
    word_ids: dict[str, int]

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        mapping = {}
        for word in words:
            if word not in mapping:
                mapping[word] = NUM_SPECIAL_TOKENS + len(mapping)
        return cls(mapping)

    @property
    def size(self) -> int:
        """Total id count including the three special tokens."""
        return NUM_SPECIAL_TOKENS + len(self.word_ids)

    def encode(self, text: str) -> list[int]:
        return [self.word_ids.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids) -> str:
        inverse = {i: w for w, i in self.word_ids.items()}
        specials = {CLS_ID: "[CLS]", SEP_ID: "[SEP]", UNK_ID: "[UNK]"}
        return " ".join(inverse.get(i, specials.get(i, "[UNK]")) for i in ids)
