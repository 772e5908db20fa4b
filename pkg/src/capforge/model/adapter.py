"""Bridges from the trained model to the decoding and reranking surfaces."""

from __future__ import annotations

import numpy as np

from ..errors import InputError
from .network import decoder_fwd, encoder_fwd, _log_softmax
from .params import ModelParams

_NEG = -1e9  # soft mask for tokens generation must never emit


class CaptionStepScorer:
    """StepScorer over one encoded clip: recomputes the prefix each step.

    The encoder memory is computed once and reused; <pad>, <s> and <unk>
    are masked out of every step distribution.
    """

    def __init__(self, params: ModelParams, enc_inputs: np.ndarray):
        enc_inputs = np.asarray(enc_inputs, dtype=np.float64)
        if enc_inputs.ndim != 2 or enc_inputs.shape[1] != params.config.hidden:
            raise InputError(f"enc_inputs must be (T+1, hidden), got {enc_inputs.shape}")
        self.params = params
        vocab = params.config.vocab
        self.tokens = list(vocab.tokens)
        self.end_id = vocab.end_id
        self._start_id = vocab.start_id
        self._banned = [vocab.pad_id, vocab.start_id, vocab.unk_id]
        self._enc_mask = np.ones((1, enc_inputs.shape[0]), dtype=bool)
        self._memory, _ = encoder_fwd(params, enc_inputs[None], self._enc_mask)

    def step_logits(self, prefix_ids) -> np.ndarray:
        prefix = np.asarray([self._start_id] + list(prefix_ids), dtype=np.int64)
        logits, _ = decoder_fwd(self.params, self._memory, self._enc_mask, prefix[None])
        out = logits[0, -1].copy()
        out[self._banned] = _NEG
        return out

    def caption_logprobs(self, words: list[str]) -> list[float]:
        """Raw per-token log-probabilities under teacher forcing.

        words may include the end marker as its last element; every real
        word must be in the vocabulary.
        """
        vocab = self.params.config.vocab
        ids = []
        for w in words:
            if w not in vocab.index:
                raise InputError(f"word {w!r} not in caption vocabulary")
            ids.append(vocab.index[w])
        if not ids:
            raise InputError("cannot score an empty caption")
        prefix = np.asarray([self._start_id] + ids[:-1], dtype=np.int64)
        logits, _ = decoder_fwd(self.params, self._memory, self._enc_mask, prefix[None])
        logp = _log_softmax(logits[0])
        return [float(logp[i, ids[i]]) for i in range(len(ids))]
