"""Closed-vocabulary word tokenizer plus structural special tokens.

Instructions come from a finite grammar, so a word-level vocabulary is
exact: normalize (lowercase, strip punctuation), sort the word set, and
assign dense ids with the seven special tokens appended after the words.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPECIAL_NAMES = ("PAD", "BOS", "EOS", "BO3D", "EO3D", "BOR", "EOR")

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


class UnknownWordError(ValueError):
    def __init__(self, words: list[str]):
        self.words = words
        super().__init__(f"unknown words: {', '.join(words)}")


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; hyphens inside a
    word survive (l-shape)."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    word_to_id: dict[str, int] = field(compare=False)

    def __len__(self) -> int:
        return len(self.words) + len(SPECIAL_NAMES)

    def special(self, name: str) -> int:
        return len(self.words) + SPECIAL_NAMES.index(name)

    @property
    def pad(self) -> int:
        return self.special("PAD")

    def is_special(self, tid: int) -> bool:
        return tid >= len(self.words)

    def encode_text(self, text: str) -> list[int]:
        toks = normalize(text)
        unknown = sorted({t for t in toks if t not in self.word_to_id})
        if unknown:
            raise UnknownWordError(unknown)
        return [self.word_to_id[t] for t in toks]

    def decode_ids(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i < 0 or i >= len(self):
                raise ValueError(f"id {i} out of vocabulary")
            if self.is_special(i):
                raise ValueError(f"id {i} is the special token {SPECIAL_NAMES[i - len(self.words)]}")
            out.append(self.words[i])
        return " ".join(out)

    def to_json(self) -> str:
        return json.dumps({"words": list(self.words)}, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def build_vocab(corpus: Iterable[str]) -> Vocab:
    words: set[str] = set()
    n = 0
    for line in corpus:
        n += 1
        words.update(normalize(line))
    if n == 0:
        raise ValueError("empty corpus")
    ordered = tuple(sorted(words))
    return Vocab(ordered, {w: i for i, w in enumerate(ordered)})


def load_vocab(path: str | Path) -> Vocab:
    data = json.loads(Path(path).read_text())
    ordered = tuple(data["words"])
    return Vocab(ordered, {w: i for i, w in enumerate(ordered)})
