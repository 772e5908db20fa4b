"""Candidate generation: beam search and nucleus (top-p) sampling.

Both decoders drive an abstract step scorer, so they work identically
against the trained caption model and against tabulated toy models in
tests. Sampling records the log-probabilities of the truncated,
renormalized distribution it actually drew from; reranking recomputes raw
model log-probabilities separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, InputError

END_TOKEN = "</s>"


class StepScorer(Protocol):
    """Next-token model surface used by the decoders."""

    tokens: Sequence[str]  # id -> token string
    end_id: int

    def step_logits(self, prefix_ids: Sequence[int]) -> np.ndarray: ...


@dataclass
class Candidate:
    """One generated caption with the log-probabilities of its tokens.

    tokens excludes the start token and ends with the end token unless the
    rollout hit max_len (then truncated is set).
    """

    tokens: list[str]
    token_logprobs: list[float]
    sum_logprob: float
    source: str
    truncated: bool = False

    def __post_init__(self):
        if len(self.tokens) != len(self.token_logprobs):
            raise InputError("one logprob per token required")
        total = sum(self.token_logprobs)
        same_inf = math.isinf(total) and math.isinf(self.sum_logprob)
        if not same_inf and abs(self.sum_logprob - total) > 1e-9:
            raise InputError("sum_logprob does not match token_logprobs")
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise InputError("log-probabilities must be <= 0")

    @property
    def words(self) -> list[str]:
        """Caption words without the end marker."""
        if self.tokens and self.tokens[-1] == END_TOKEN:
            return self.tokens[:-1]
        return list(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - math.log(float(np.exp(z).sum()))


def nucleus_truncate(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with mass >= p, renormalized.

    Tokens tied with the boundary probability are all included, so the kept
    set does not depend on sort stability. Returns (kept ids, kept probs).
    """
    if not 0.0 < p <= 1.0:
        raise InputError(f"p must be in (0, 1], got {p}")
    if p >= 1.0:
        kept = np.arange(probs.shape[0])
        return kept, probs / probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, p, side="left"))
    cut = min(cut, probs.shape[0] - 1)
    boundary = probs[order[cut]]
    keep_mask = probs >= boundary
    kept = np.flatnonzero(keep_mask)
    kept_probs = probs[kept]
    return kept, kept_probs / kept_probs.sum()


def _step_probs(scorer: StepScorer, prefix_ids: list[int], temperature: float) -> np.ndarray:
    logits = np.asarray(scorer.step_logits(prefix_ids), dtype=np.float64)
    z = logits / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def nucleus_sample(
    scorer: StepScorer,
    p: float,
    temperature: float,
    n_candidates: int,
    max_len: int,
    seed: int | Sequence[int],
) -> list[Candidate]:
    """Independent top-p rollouts; duplicates are kept for reranking to fold.

    Each rollout r draws from its own stream derived from (seed, r), so
    rollouts can run in any order or in parallel without changing results.
    seed may be a tuple to namespace streams per pipeline item.
    """
    if temperature <= 0.0:
        raise InputError("temperature must be > 0")
    if n_candidates < 1:
        raise InputError("n_candidates must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    out: list[Candidate] = []
    for r in range(n_candidates):
        rng = np.random.default_rng(np.random.SeedSequence(entropy + [r]))
        prefix: list[int] = []
        lps: list[float] = []
        truncated = True
        for _ in range(max_len):
            probs = _step_probs(scorer, prefix, temperature)
            kept, kept_probs = nucleus_truncate(probs, p)
            idx = int(rng.choice(kept.shape[0], p=kept_probs))
            tok = int(kept[idx])
            lps.append(min(math.log(float(kept_probs[idx])), 0.0))
            prefix.append(tok)
            if tok == scorer.end_id:
                truncated = False
                break
        out.append(
            Candidate(
                tokens=[scorer.tokens[i] for i in prefix],
                token_logprobs=lps,
                sum_logprob=sum(lps),
                source="nucleus",
                truncated=truncated,
            )
        )
    return out


def beam_search(
    scorer: StepScorer,
    beam_width: int,
    max_len: int,
    length_penalty: float = 0.0,
) -> list[Candidate]:
    """Standard beam expansion on sum_logprob / len**alpha.

    Hypotheses that emit the end token retire; the rest keep expanding until
    max_len. Returns at most beam_width deduplicated candidates, best first.
    """
    if beam_width < 1:
        raise InputError("beam_width must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")

    def norm(sum_lp: float, n: int) -> float:
        return sum_lp / (n**length_penalty) if n > 0 else sum_lp

    active: list[tuple[list[int], list[float]]] = [([], [])]
    finished: list[tuple[list[int], list[float], bool]] = []
    for _ in range(max_len):
        if not active:
            break
        expansions: list[tuple[float, list[int], list[float]]] = []
        for prefix, lps in active:
            logprobs = _log_softmax(np.asarray(scorer.step_logits(prefix), dtype=np.float64))
            base = sum(lps)
            for v in range(logprobs.shape[0]):
                lp = float(logprobs[v])
                expansions.append(
                    (norm(base + lp, len(prefix) + 1), prefix + [v], lps + [lp])
                )
        expansions.sort(key=lambda e: (-e[0], [scorer.tokens[i] for i in e[1]]))
        active = []
        for score, prefix, lps in expansions[:beam_width]:
            if prefix[-1] == scorer.end_id:
                finished.append((prefix, lps, False))
            else:
                active.append((prefix, lps))
    finished.extend((prefix, lps, True) for prefix, lps in active)

    seen: set[tuple[str, ...]] = set()
    candidates: list[Candidate] = []
    for prefix, lps, truncated in finished:
        tokens = tuple(scorer.tokens[i] for i in prefix)
        if tokens in seen:
            continue
        seen.add(tokens)
        candidates.append(
            Candidate(
                tokens=list(tokens),
                token_logprobs=[min(lp, 0.0) for lp in lps],
                sum_logprob=sum(min(lp, 0.0) for lp in lps),
                source="beam",
                truncated=truncated,
            )
        )
    candidates.sort(key=lambda c: (-norm(c.sum_logprob, len(c.tokens)), c.tokens))
    return candidates[:beam_width]


def candidate_to_row(item_id: str, index: int, cand: Candidate) -> dict:
    return {
        "item_id": item_id,
        "candidate_index": index,
        "tokens": list(cand.tokens),
        "token_logprobs": list(cand.token_logprobs),
        "source": cand.source,
        "truncated": cand.truncated,
    }


def candidate_from_row(row: dict) -> tuple[str, Candidate]:
    try:
        cand = Candidate(
            tokens=[str(t) for t in row["tokens"]],
            token_logprobs=[float(x) for x in row["token_logprobs"]],
            sum_logprob=float(sum(float(x) for x in row["token_logprobs"])),
            source=str(row["source"]),
            truncated=bool(row.get("truncated", False)),
        )
        return str(row["item_id"]), cand
    except KeyError as exc:
        raise InputError(f"candidate row missing field {exc}") from exc
