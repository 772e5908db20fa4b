"""Caption evaluation suite.

Implements METEOR-lite (exact-match unigrams only), a CIDEr-D style
tf-idf n-gram consensus score, a pluggable SPICE slot with a bundled
content-word F1 proxy, SPIDEr and its fluency-penalized variant, a FENSE
composition over a provided sentence embedder, and a vocabulary diversity
count. Metric variants that replace heavyweight components are labeled as
such in reports ("spice_proxy", "fense_toy") and are never presented as
the originals.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from .errors import InputError, MetricError
from .text import STOP_WORDS, tokenize

__all__ = [
    "EvalCorpus",
    "EvalItem",
    "MetricConfig",
    "MetricReport",
    "ProxySpiceBackend",
    "apply_fluency_penalty",
    "cider_d",
    "evaluate",
    "fense",
    "meteor_lite",
    "spice_score",
    "spider",
    "tokenize",
    "vocab",
]


@dataclass
class EvalItem:
    item_id: str
    candidate: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise InputError(f"item {self.item_id!r} has no references")


@dataclass
class EvalCorpus:
    items: list[EvalItem]

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate item ids in corpus")


@dataclass(frozen=True)
class MetricConfig:
    ngram_order: int = 4
    sigma: float = 6.0
    fluency_penalty_factor: float = 0.1
    spider_weights: tuple[float, float] = (0.5, 0.5)


@dataclass
class MetricReport:
    corpus: dict
    items: list[dict]
    config: dict
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# METEOR-lite


def _align_unigrams(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """Greedy in-order exact alignment; returns (matches, chunks).

    A chunk extends while consecutive candidate tokens map to consecutive
    reference positions; otherwise the earliest unused match starts a new
    chunk.
    """
    used = [False] * len(ref)
    matches = 0
    chunks = 0
    last_ref = None  # ref index matched by the immediately preceding cand token
    for w in cand:
        j = None
        if (
            last_ref is not None
            and last_ref + 1 < len(ref)
            and not used[last_ref + 1]
            and ref[last_ref + 1] == w
        ):
            j = last_ref + 1
        else:
            for k, r in enumerate(ref):
                if not used[k] and r == w:
                    j = k
                    break
        if j is None:
            last_ref = None
            continue
        used[j] = True
        matches += 1
        if last_ref is None or j != last_ref + 1:
            chunks += 1
        last_ref = j
    return matches, chunks


def meteor_lite(candidate: str, references: Sequence[str]) -> float:
    """Unigram precision/recall F-score with a chunk fragmentation penalty.

    F = 10PR / (R + 9P); penalty = 0.5 * (chunks / matches)^3; the score is
    the best value over the references. No stemming or synonym matching.
    """
    cand = tokenize(candidate)
    best = 0.0
    for reference in references:
        ref = tokenize(reference)
        if not cand or not ref:
            continue
        m, chunks = _align_unigrams(cand, ref)
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(ref)
        f = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# CIDEr-D


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def cider_d(
    corpus: EvalCorpus, ngram_order: int = 4, sigma: float = 6.0
) -> tuple[list[float], float]:
    """Consensus score from clipped tf-idf n-gram cosines.

    Document frequency counts the items whose reference set contains an
    n-gram; idf = ln(n_items / df) with df floored at 1. Candidate counts
    are clipped to the max count over the item's references before
    weighting. Per n and reference, similarity is the cosine of the clipped
    candidate vector against the reference vector times a Gaussian length
    penalty exp(-(lc - lr)^2 / (2 sigma^2)); zero-norm vectors contribute 0.
    The item score is 10 times the mean over n of the mean over references.
    """
    if not corpus.items:
        raise InputError("cider_d needs a non-empty corpus")
    items = [
        (tokenize(it.candidate), [tokenize(r) for r in it.references])
        for it in corpus.items
    ]
    n_items = len(items)

    df: Counter = Counter()
    for _, refs in items:
        grams: set = set()
        for ref in refs:
            for n in range(1, ngram_order + 1):
                grams.update(_ngram_counts(ref, n).keys())
        for g in grams:
            df[g] += 1

    def idf(gram) -> float:
        return math.log(n_items / max(df.get(gram, 0), 1))

    per_item: list[float] = []
    for cand, refs in items:
        by_n: list[float] = []
        for n in range(1, ngram_order + 1):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = [_ngram_counts(r, n) for r in refs]
            max_ref: Counter = Counter()
            for rc in ref_counts:
                for g, c in rc.items():
                    max_ref[g] = max(max_ref[g], c)
            cvec = {
                g: min(c, max_ref.get(g, 0)) * idf(g)
                for g, c in cand_counts.items()
                if min(c, max_ref.get(g, 0)) > 0 and idf(g) != 0.0
            }
            cnorm = math.sqrt(sum(v * v for v in cvec.values()))
            sims: list[float] = []
            for rc, rtok in zip(ref_counts, refs):
                rvec = {g: c * idf(g) for g, c in rc.items() if idf(g) != 0.0}
                rnorm = math.sqrt(sum(v * v for v in rvec.values()))
                if cnorm == 0.0 or rnorm == 0.0:
                    sims.append(0.0)
                    continue
                if cvec == rvec:
                    # identical vectors: cosine is exactly 1, skip sqrt rounding
                    cos = 1.0
                else:
                    dot = sum(v * rvec[g] for g, v in cvec.items() if g in rvec)
                    cos = min(max(dot / (cnorm * rnorm), -1.0), 1.0)
                penalty = math.exp(-((len(cand) - len(rtok)) ** 2) / (2.0 * sigma**2))
                sims.append(cos * penalty)
            by_n.append(sum(sims) / len(sims))
        per_item.append(10.0 * sum(by_n) / len(by_n))
    return per_item, sum(per_item) / len(per_item)


# ---------------------------------------------------------------------------
# SPICE slot


class SpiceBackend(Protocol):
    name: str

    def score(self, candidate: str, references: Sequence[str]) -> float: ...


class ProxySpiceBackend:
    """F1 between candidate content words and the union over references.

    Stand-in for scene-graph SPICE; results are labeled "spice_proxy".
    """

    name = "spice_proxy"

    def score(self, candidate: str, references: Sequence[str]) -> float:
        cand = set(tokenize(candidate)) - STOP_WORDS
        ref_union: set[str] = set()
        for r in references:
            ref_union |= set(tokenize(r)) - STOP_WORDS
        if not cand or not ref_union:
            return 0.0
        inter = len(cand & ref_union)
        p = inter / len(cand)
        r = inter / len(ref_union)
        if p + r == 0.0:
            return 0.0
        return 2.0 * p * r / (p + r)


def spice_score(
    corpus: EvalCorpus, backend: SpiceBackend
) -> tuple[list[float | None], float, list[str]]:
    """Delegate per item; failures are excluded from the mean and reported."""
    values: list[float | None] = []
    warnings: list[str] = []
    for it in corpus.items:
        try:
            values.append(float(backend.score(it.candidate, it.references)))
        except Exception as exc:  # backend failure must not sink the report
            values.append(None)
            warnings.append(f"spice backend {backend.name!r} failed on {it.item_id!r}: {exc}")
    ok = [v for v in values if v is not None]
    mean = sum(ok) / len(ok) if ok else 0.0
    return values, mean, warnings


# ---------------------------------------------------------------------------
# composites


def spider(cider_item: float, spice_item: float) -> float:
    """Arithmetic mean of the two component scores."""
    return 0.5 * (cider_item + spice_item)


def apply_fluency_penalty(score: float, flags: Iterable[str], factor: float = 0.1) -> float:
    """Multiply by factor when any fluency flag is raised."""
    if not 0.0 < factor <= 1.0:
        raise InputError(f"penalty factor must be in (0, 1], got {factor}")
    return score * factor if set(flags) else score


def fense(
    candidate: str,
    references: Sequence[str],
    text_embedder: Callable[[str], "object"],
    detector: Callable[[str], set[str]],
    factor: float = 0.1,
) -> float:
    """Mean embedding cosine against the references, fluency-penalized."""
    sim = _sentence_similarity(candidate, references, text_embedder)
    return apply_fluency_penalty(sim, detector(candidate), factor)


def _sentence_similarity(candidate, references, text_embedder) -> float:
    cand = text_embedder(candidate).vector
    # clamp: unit-vector dots can exceed 1 by an ulp
    sims = [
        min(max(float(cand @ text_embedder(r).vector), -1.0), 1.0) for r in references
    ]
    return sum(sims) / len(sims)


def vocab(candidates: Iterable[str]) -> int:
    """Number of distinct tokens across the candidate captions."""
    seen: set[str] = set()
    for c in candidates:
        seen.update(tokenize(c))
    return len(seen)


# ---------------------------------------------------------------------------
# full report


def evaluate(
    corpus: EvalCorpus,
    config: MetricConfig,
    text_embedder: Callable[[str], "object"],
    detector: Callable[[str], set[str]],
    spice_backend: SpiceBackend | None = None,
    embedder_name: str = "fense_toy",
) -> MetricReport:
    """Compute every metric with shared tokenization and detector flags."""
    backend = spice_backend if spice_backend is not None else ProxySpiceBackend()
    warnings: list[str] = []

    cider_items, cider_mean = cider_d(corpus, config.ngram_order, config.sigma)
    spice_items, spice_mean, spice_warnings = spice_score(corpus, backend)
    warnings.extend(spice_warnings)

    rows: list[dict] = []
    for it, c_val, s_val in zip(corpus.items, cider_items, spice_items):
        flags = sorted(detector(it.candidate))
        meteor = meteor_lite(it.candidate, it.references)
        similarity = _sentence_similarity(it.candidate, it.references, text_embedder)
        f_val = apply_fluency_penalty(similarity, flags, config.fluency_penalty_factor)
        if s_val is None:
            sp = None
            sp_fl = None
        else:
            sp = spider(c_val, s_val)
            sp_fl = apply_fluency_penalty(sp, flags, config.fluency_penalty_factor)
        rows.append(
            {
                "id": it.item_id,
                "meteor": meteor,
                "cider_d": c_val,
                "spice": s_val,
                "spider": sp,
                "spider_fl": sp_fl,
                "fense": f_val,
                "fense_similarity": similarity,
                "fluency_flags": flags,
            }
        )

    def _mean(key: str) -> float:
        vals = [r[key] for r in rows if r[key] is not None]
        return sum(vals) / len(vals) if vals else 0.0

    corpus_values = {
        "meteor": _mean("meteor"),
        "cider_d": cider_mean,
        "spice": spice_mean,
        "spider": _mean("spider"),
        "spider_fl": _mean("spider_fl"),
        "fense": _mean("fense"),
        "vocab": vocab(it.candidate for it in corpus.items),
    }
    config_echo = {
        "ngram_order": config.ngram_order,
        "sigma": config.sigma,
        "fluency_penalty_factor": config.fluency_penalty_factor,
        "spider_weights": list(config.spider_weights),
        "spice_backend": backend.name,
        "fense_embedder": embedder_name,
    }
    return MetricReport(corpus=corpus_values, items=rows, config=config_echo, warnings=warnings)
