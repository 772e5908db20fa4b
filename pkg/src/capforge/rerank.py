"""Fluency filtering and candidate reranking.

Candidates are deduplicated, rule-flagged for fluency defects, then ordered
by an encoder score (audio-text embedding cosine), a decoder score (mean
model log-probability of the caption), or their weighted blend. Raw scores
are min-max normalized per item before weighting so the blend weights are
scale-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .decoding import Candidate
from .errors import InputError
from .text import ENDING_BLOCKLIST, tokenize
from .world import SeqEmbedding, default_content_words

RERANK_MODES = ("encoder", "decoder", "hybrid", "beam_passthrough")

FLAG_REPEATED_NGRAM = "repeated_ngram"
FLAG_INCOMPLETE_ENDING = "incomplete_ending"
FLAG_TOO_SHORT = "too_short"
FLAG_NO_CONTENT_WORD = "no_content_word"

MIN_CAPTION_TOKENS = 3
MAX_REPEAT_NGRAM = 4
REPEAT_THRESHOLD = 3

# caption words -> per-token natural-log probabilities under the model
LogprobFn = Callable[[Sequence[str]], Sequence[float]]
TextEmbedder = Callable[[str], SeqEmbedding]
FluencyDetector = Callable[[str], set[str]]


@dataclass
class RerankScores:
    encoder_score: float
    decoder_score: float
    encoder_norm: float
    decoder_norm: float
    hybrid: float
    fluency_flags: set[str]


@dataclass
class RankedCandidate:
    rank: int
    candidate: Candidate
    scores: RerankScores


def detect_fluency_errors(
    caption: str,
    content_words: frozenset[str] | None = None,
    ending_blocklist: frozenset[str] = ENDING_BLOCKLIST,
) -> set[str]:
    """Rule-based stand-in for a learned fluency classifier.

    Flags: an n-gram (n <= 4) repeated three or more times back to back; a
    final token that reads as a cut-off (article/conjunction/preposition);
    fewer than three tokens; no content word at all.
    """
    words = content_words if content_words is not None else default_content_words()
    tokens = tokenize(caption)
    flags: set[str] = set()
    for n in range(1, MAX_REPEAT_NGRAM + 1):
        for i in range(len(tokens) - REPEAT_THRESHOLD * n + 1):
            gram = tokens[i : i + n]
            if all(
                tokens[i + k * n : i + (k + 1) * n] == gram
                for k in range(1, REPEAT_THRESHOLD)
            ):
                flags.add(FLAG_REPEATED_NGRAM)
                break
        if FLAG_REPEATED_NGRAM in flags:
            break
    if tokens and tokens[-1] in ending_blocklist:
        flags.add(FLAG_INCOMPLETE_ENDING)
    if len(tokens) < MIN_CAPTION_TOKENS:
        flags.add(FLAG_TOO_SHORT)
    if not any(t in words for t in tokens):
        flags.add(FLAG_NO_CONTENT_WORD)
    return flags


def make_rule_detector(
    content_words: frozenset[str] | None = None,
    ending_blocklist: frozenset[str] = ENDING_BLOCKLIST,
) -> FluencyDetector:
    def detector(caption: str) -> set[str]:
        return detect_fluency_errors(caption, content_words, ending_blocklist)

    return detector


def encoder_score(audio_emb: SeqEmbedding, text_emb: SeqEmbedding) -> float:
    """Cosine of the clip embedding and the caption embedding."""
    if audio_emb.vector.shape != text_emb.vector.shape:
        raise InputError("embedding dimension mismatch")
    return min(max(float(audio_emb.vector @ text_emb.vector), -1.0), 1.0)


def decoder_score(logprob_fn: LogprobFn, candidate: Candidate) -> float:
    """Mean per-token log-probability of the caption under teacher forcing.

    Uses the raw (untruncated) model distribution regardless of how the
    candidate was sampled.
    """
    if not candidate.tokens:
        raise InputError("cannot score an empty caption")
    lps = list(logprob_fn(candidate.tokens))
    if len(lps) != len(candidate.tokens):
        raise InputError("scorer returned wrong number of log-probabilities")
    return sum(lps) / len(lps)


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        return [0.5] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def rank(
    candidates: Sequence[Candidate],
    audio_emb: SeqEmbedding,
    text_embedder: TextEmbedder,
    logprob_fn: LogprobFn,
    w_enc: float = 0.6,
    w_dec: float = 0.4,
    mode: str = "hybrid",
    detector: FluencyDetector | None = None,
) -> list[RankedCandidate]:
    """Dedup, filter fluency errors, normalize scores, order by mode.

    If filtering would drop everything, the candidate with the best decoder
    score survives. beam_passthrough keeps the incoming order.
    """
    if not candidates:
        raise InputError("rank needs at least one candidate")
    if mode not in RERANK_MODES:
        raise InputError(f"unknown rerank mode {mode!r}; expected one of {RERANK_MODES}")
    det = detector if detector is not None else make_rule_detector()

    unique: list[Candidate] = []
    seen: set[tuple[str, ...]] = set()
    for cand in candidates:
        key = tuple(cand.tokens)
        if key not in seen:
            seen.add(key)
            unique.append(cand)

    scored = [
        (cand, det(cand.text), decoder_score(logprob_fn, cand)) for cand in unique
    ]
    survivors = [s for s in scored if not s[1]]
    if not survivors:
        # fallback: best decoder score, ties to lexicographically first tokens
        survivors = [min(scored, key=lambda s: (-s[2], s[0].tokens))]

    enc_raw = [
        encoder_score(audio_emb, text_embedder(cand.text)) for cand, _, _ in survivors
    ]
    dec_raw = [dec for _, _, dec in survivors]
    enc_norm = _minmax(enc_raw)
    dec_norm = _minmax(dec_raw)

    rows = []
    for i, (cand, flags, _) in enumerate(survivors):
        hybrid = w_enc * enc_norm[i] + w_dec * dec_norm[i]
        rows.append(
            (
                cand,
                RerankScores(
                    encoder_score=enc_raw[i],
                    decoder_score=dec_raw[i],
                    encoder_norm=enc_norm[i],
                    decoder_norm=dec_norm[i],
                    hybrid=hybrid,
                    fluency_flags=flags,
                ),
            )
        )

    if mode == "beam_passthrough":
        ordered = rows
    else:
        key_of = {
            "encoder": lambda r: r[1].encoder_norm,
            "decoder": lambda r: r[1].decoder_norm,
            "hybrid": lambda r: r[1].hybrid,
        }[mode]
        ordered = sorted(rows, key=lambda r: (-key_of(r), -r[1].decoder_score, r[0].tokens))
    return [
        RankedCandidate(rank=i, candidate=cand, scores=scores)
        for i, (cand, scores) in enumerate(ordered)
    ]


def ranked_to_row(item_id: str, rc: RankedCandidate) -> dict:
    return {
        "item_id": item_id,
        "rank": rc.rank,
        "tokens": list(rc.candidate.tokens),
        "encoder_score": rc.scores.encoder_score,
        "decoder_score": rc.scores.decoder_score,
        "hybrid": rc.scores.hybrid,
        "flags": sorted(rc.scores.fluency_flags),
    }
