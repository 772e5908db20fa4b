"""Word-level caption vocabulary with start/end/pad/unk specials."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..errors import ConfigError
from ..text import tokenize

PAD, START, END, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, START, END, UNK)


@dataclass
class CaptionVocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ConfigError("vocab must start with <pad>, <s>, </s>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab contains duplicates")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id = 0
    start_id = 1
    end_id = 2
    unk_id = 3

    @classmethod
    def build(cls, captions: Iterable[str]) -> "CaptionVocab":
        words = sorted({w for c in captions for w in tokenize(c)})
        return cls(tokens=list(SPECIALS) + words)

    def encode(self, caption: str) -> list[int]:
        """<s> w1 .. wn </s> as ids; unknown words map to <unk>."""
        ids = [self.index.get(w, self.unk_id) for w in tokenize(caption)]
        return [self.start_id] + ids + [self.end_id]

    def decode_words(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            tok = self.tokens[i]
            if tok in (START, PAD):
                continue
            if tok == END:
                break
            out.append(tok)
        return out
