"""Manifest ingestion, duration filtering, blocklist dedup, and splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "valid", "test")

DURATION_MIN_S = 1.0
DURATION_MAX_S = 30.0


@dataclass
class ManifestEntry:
    id: str
    duration_s: float
    codec_path: str
    captions: list[str]
    split: str = "train"

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DataError(f"entry {self.id!r}: duration_s must be > 0")
        if self.split not in SPLITS:
            raise DataError(f"entry {self.id!r}: unknown split {self.split!r}")
        if not self.captions:
            raise DataError(f"entry {self.id!r}: captions must be non-empty")

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "duration_s": self.duration_s,
            "codec_path": self.codec_path,
            "captions": list(self.captions),
            "split": self.split,
        }

    @classmethod
    def from_row(cls, row: dict) -> "ManifestEntry":
        try:
            return cls(
                id=str(row["id"]),
                duration_s=float(row["duration_s"]),
                codec_path=str(row["codec_path"]),
                captions=[str(c) for c in row["captions"]],
                split=str(row.get("split", "train")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad manifest row: {exc}") from exc


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSONL manifest; order preserved, duplicate ids rejected.

    A leading line of the form {"__header__": {...}} is stage metadata and
    is skipped.
    """
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "__header__" in row:
                continue
            entry = ManifestEntry.from_row(row)
            if entry.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def save_manifest(entries: Iterable[ManifestEntry], path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"__header__": header}, sort_keys=True) + "\n")
        for entry in entries:
            fh.write(json.dumps(entry.to_row(), sort_keys=True) + "\n")


def load_blocklist(path) -> set[str]:
    """Newline-delimited ids; blank lines ignored."""
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def filter_duration(
    entries: Sequence[ManifestEntry],
    min_s: float = DURATION_MIN_S,
    max_s: float = DURATION_MAX_S,
) -> list[ManifestEntry]:
    """Keep entries with min_s <= duration <= max_s (bounds inclusive)."""
    if min_s > max_s:
        raise ConfigError(f"min_s {min_s} > max_s {max_s}")
    return [e for e in entries if min_s <= e.duration_s <= max_s]


def dedup_against(
    entries: Sequence[ManifestEntry], blocklist_ids: Iterable[str]
) -> list[ManifestEntry]:
    """Drop entries whose id is blocklisted; order of survivors unchanged."""
    block = set(blocklist_ids)
    return [e for e in entries if e.id not in block]


def make_splits(
    entries: Sequence[ManifestEntry],
    fractions: Sequence[float],
    seed: int,
) -> list[ManifestEntry]:
    """Assign train/valid/test labels by seeded shuffle + largest-remainder sizes.

    Returns new entries in the original order with the split field set.
    """
    if len(fractions) != 3:
        raise ConfigError("fractions must have 3 components (train, valid, test)")
    if any(f < 0 for f in fractions):
        raise ConfigError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(entries)
    quotas = [f * n for f in fractions]
    sizes = [int(q) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    short = n - sum(sizes)
    # hand leftover items to the largest fractional remainders; ties by position
    for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[:short]:
        sizes[idx] += 1
    order = np.random.default_rng(seed).permutation(n)
    assignment: dict[int, str] = {}
    cursor = 0
    for split, size in zip(SPLITS, sizes):
        for pos in order[cursor : cursor + size]:
            assignment[int(pos)] = split
        cursor += size
    out = []
    for i, e in enumerate(entries):
        out.append(
            ManifestEntry(
                id=e.id,
                duration_s=e.duration_s,
                codec_path=e.codec_path,
                captions=list(e.captions),
                split=assignment[i],
            )
        )
    return out
