"""Caption tokenization and the small word lists shared across stages."""

from __future__ import annotations

import string

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

ARTICLES = frozenset({"a", "an", "the"})
CONJUNCTIONS = frozenset({"and", "while", "as", "or", "but", "then"})
PREPOSITIONS = frozenset(
    {"of", "in", "on", "at", "to", "with", "from", "by", "over", "under", "near"}
)

# caption endings that read as cut-off sentences
ENDING_BLOCKLIST = ARTICLES | CONJUNCTIONS | PREPOSITIONS

# words ignored when comparing content-word sets
STOP_WORDS = ARTICLES | CONJUNCTIONS | PREPOSITIONS | frozenset(
    {"is", "are", "it", "there", "something", "someone"}
)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()
