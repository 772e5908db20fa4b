"""Manifest round trips, duration filter bounds, dedup, split determinism."""

import json

import numpy as np
import pytest

from capforge.dataio import (
    ManifestEntry,
    dedup_against,
    filter_duration,
    load_blocklist,
    load_manifest,
    make_splits,
    save_manifest,
)
from capforge.errors import ConfigError, DataError


def entry(i, duration=5.0, split="train"):
    return ManifestEntry(
        id=f"item{i:04d}",
        duration_s=duration,
        codec_path=f"grids/{i}.jsonl",
        captions=[f"caption {i}"],
        split=split,
    )


# --- load / save -----------------------------------------------------------


def test_empty_file_gives_empty_list(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_save_load_identity(tmp_path):
    rng = np.random.default_rng(0)
    entries = [entry(i, duration=float(rng.uniform(1, 30))) for i in range(100)]
    p = tmp_path / "m.jsonl"
    save_manifest(entries, p)
    loaded = load_manifest(p)
    assert [e.to_row() for e in loaded] == [e.to_row() for e in entries]


def test_header_line_skipped(tmp_path):
    p = tmp_path / "m.jsonl"
    save_manifest([entry(1)], p, header={"config_hash": "abc"})
    first = json.loads(p.read_text().splitlines()[0])
    assert first["__header__"]["config_hash"] == "abc"
    assert len(load_manifest(p)) == 1


def test_duplicate_id_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    rows = [entry(1).to_row(), entry(1).to_row()]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(DataError, match="item0001"):
        load_manifest(p)


def test_malformed_line_reports_lineno(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(entry(1).to_row()) + "\n{oops\n")
    with pytest.raises(DataError, match=":2"):
        load_manifest(p)


def test_blocklist_load(tmp_path):
    p = tmp_path / "block.txt"
    p.write_text("a\n\nb\n c \n")
    assert load_blocklist(p) == {"a", "b", "c"}


# --- filter_duration -------------------------------------------------------


def test_filter_keeps_only_in_range():
    entries = [entry(0, 0.5), entry(1, 10.0), entry(2, 31.0)]
    kept = filter_duration(entries)
    assert [e.id for e in kept] == ["item0001"]


def test_filter_empty_input():
    assert filter_duration([]) == []


def test_filter_bounds_inclusive():
    entries = [entry(0, 1.0), entry(1, 30.0), entry(2, 0.999), entry(3, 30.001)]
    kept = filter_duration(entries, 1.0, 30.0)
    assert [e.id for e in kept] == ["item0000", "item0001"]
    # direct predicate agrees
    assert all(1.0 <= e.duration_s <= 30.0 for e in kept)


def test_filter_idempotent():
    rng = np.random.default_rng(1)
    entries = [entry(i, float(rng.uniform(0.1, 40))) for i in range(50)]
    once = filter_duration(entries)
    twice = filter_duration(once)
    assert [e.id for e in twice] == [e.id for e in once]


def test_filter_bad_bounds():
    with pytest.raises(ConfigError):
        filter_duration([], 5.0, 2.0)


# --- dedup_against ---------------------------------------------------------


def test_dedup_empty_blocklist_is_identity():
    entries = [entry(i) for i in range(5)]
    assert dedup_against(entries, set()) == entries


def test_dedup_full_blocklist_empties():
    entries = [entry(i) for i in range(5)]
    assert dedup_against(entries, {e.id for e in entries}) == []


def test_dedup_matches_set_difference():
    entries = [entry(i) for i in range(20)]
    block = {e.id for e in entries[::3]}
    survivors = dedup_against(entries, block)
    assert [e.id for e in survivors] == [e.id for e in entries if e.id not in block]
    assert not ({e.id for e in survivors} & block)


# --- make_splits -----------------------------------------------------------


def test_splits_all_train():
    entries = [entry(i) for i in range(10)]
    out = make_splits(entries, (1.0, 0.0, 0.0), seed=0)
    assert all(e.split == "train" for e in out)


def test_splits_exact_sizes():
    entries = [entry(i) for i in range(1000)]
    out = make_splits(entries, (0.8, 0.1, 0.1), seed=5)
    counts = {s: sum(1 for e in out if e.split == s) for s in ("train", "valid", "test")}
    assert counts == {"train": 800, "valid": 100, "test": 100}


def test_splits_largest_remainder():
    entries = [entry(i) for i in range(10)]
    # quotas 4.5 / 4.5 / 1.0 -> remainders .5/.5/0, tie goes to train
    out = make_splits(entries, (0.45, 0.45, 0.10), seed=2)
    counts = {s: sum(1 for e in out if e.split == s) for s in ("train", "valid", "test")}
    assert counts == {"train": 5, "valid": 4, "test": 1}


def test_splits_deterministic_and_partition():
    entries = [entry(i) for i in range(137)]
    a = make_splits(entries, (0.7, 0.15, 0.15), seed=9)
    b = make_splits(entries, (0.7, 0.15, 0.15), seed=9)
    assert [e.split for e in a] == [e.split for e in b]
    assert [e.id for e in a] == [e.id for e in entries]  # order preserved
    assert sum(1 for e in a if e.split == "train") + sum(
        1 for e in a if e.split == "valid"
    ) + sum(1 for e in a if e.split == "test") == len(entries)


def test_splits_bad_fractions():
    with pytest.raises(ConfigError):
        make_splits([entry(0)], (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ConfigError):
        make_splits([entry(0)], (0.5, 0.6, -0.1), seed=0)
