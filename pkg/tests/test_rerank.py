"""Reranking tests: rule traces, score algebra, filtering fallback properties."""

import math

import numpy as np
import pytest

from capforge.decoding import Candidate
from capforge.errors import InputError
from capforge.rerank import (
    decoder_score,
    detect_fluency_errors,
    encoder_score,
    make_rule_detector,
    rank,
    ranked_to_row,
)
from capforge.world import (
    SeqEmbedding,
    build_default_vocab,
    oracle_audio_embedding,
    oracle_text_embedding,
)
from capforge.world import Scene


def cand(words, lps=None, source="nucleus"):
    tokens = list(words) + ["</s>"]
    if lps is None:
        lps = [-0.1] * len(tokens)
    return Candidate(
        tokens=tokens, token_logprobs=lps, sum_logprob=sum(lps), source=source
    )


def unit(vec):
    v = np.asarray(vec, dtype=np.float64)
    return SeqEmbedding(vector=v / np.linalg.norm(v))


# --- fluency rules -----------------------------------------------------------


def test_flag_repeated_ngram():
    assert detect_fluency_errors("a dog barks barks barks") == {"repeated_ngram"}


def test_flag_incomplete_and_no_content():
    assert detect_fluency_errors("sound of a") == {"incomplete_ending", "no_content_word"}


def test_clean_caption_unflagged():
    assert detect_fluency_errors("rain falls on a roof") == set()


def test_flag_too_short():
    assert "too_short" in detect_fluency_errors("dog barks")
    assert "too_short" in detect_fluency_errors("")


def test_repeated_bigram_detected():
    assert "repeated_ngram" in detect_fluency_errors(
        "a dog barks dog barks dog barks today"
    )
    # two consecutive repeats only: below threshold
    assert "repeated_ngram" not in detect_fluency_errors("a dog barks barks today")


# --- encoder / decoder scores --------------------------------------------------


def test_encoder_score_identical_and_orthogonal():
    a = unit([1.0, 0.0, 0.0])
    assert encoder_score(a, unit([1.0, 0.0, 0.0])) == 1.0
    assert encoder_score(a, unit([0.0, 1.0, 0.0])) == 0.0


def test_encoder_score_partial_overlap_geometry():
    vocab = build_default_vocab(12, 16, seed=0)
    scene = Scene(events=[(0, 0, 4), (1, 0, 4)], duration_s=1.0, frame_rate_hz=4.0, n_frames=4)
    audio = oracle_audio_embedding(scene, vocab)
    text = oracle_text_embedding("a dog barks", vocab)
    assert encoder_score(audio, text) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_encoder_score_dimension_mismatch():
    with pytest.raises(InputError):
        encoder_score(unit([1.0, 0.0]), unit([1.0, 0.0, 0.0]))


def test_decoder_score_certain_model():
    fn = lambda tokens: [0.0] * len(tokens)
    assert decoder_score(fn, cand(["a", "dog", "barks"])) == 0.0


def test_decoder_score_hand_arithmetic():
    c = Candidate(
        tokens=["dog", "</s>"],
        token_logprobs=[-0.01, -0.01],
        sum_logprob=-0.02,
        source="beam",
    )
    fn = lambda tokens: [math.log(0.5), math.log(0.25)]
    assert decoder_score(fn, c) == pytest.approx((math.log(0.5) + math.log(0.25)) / 2, abs=1e-12)
    assert decoder_score(fn, c) == pytest.approx(-1.0397207708399179, abs=1e-9)


def test_decoder_score_independent_of_source():
    fn = lambda tokens: [-0.3] * len(tokens)
    a = cand(["rain", "falls"], source="nucleus")
    b = cand(["rain", "falls"], source="beam")
    assert decoder_score(fn, a) == decoder_score(fn, b)


def test_decoder_score_empty_rejected():
    c = Candidate(tokens=[], token_logprobs=[], sum_logprob=0.0, source="beam")
    with pytest.raises(InputError):
        decoder_score(lambda tokens: [], c)


# --- rank ---------------------------------------------------------------------


def embedder_table(table):
    def embed(text):
        return table[text]

    return embed


def no_flags(caption):
    return set()


def test_rank_pure_encoder_and_decoder_orderings():
    audio = unit([1.0, 0.0, 0.0])
    c1, c2, c3 = cand(["one"]), cand(["two"]), cand(["three"])
    table = {
        "one": unit([1.0, 0.0, 0.0]),     # enc 1.0
        "two": unit([0.0, 1.0, 0.0]),     # enc 0.0
        "three": unit([1.0, 1.0, 0.0]),   # enc ~0.707
    }
    dec = {("one",): -3.0, ("two",): -1.0, ("three",): -2.0}
    fn = lambda tokens: [dec[tuple(tokens[:-1])]] * len(tokens)
    enc_order = rank([c1, c2, c3], audio, embedder_table(table), fn, 1.0, 0.0, "encoder", no_flags)
    assert [rc.candidate.words for rc in enc_order] == [["one"], ["three"], ["two"]]
    dec_order = rank([c1, c2, c3], audio, embedder_table(table), fn, 0.0, 1.0, "decoder", no_flags)
    assert [rc.candidate.words for rc in dec_order] == [["two"], ["three"], ["one"]]


def test_rank_hybrid_hand_fixture():
    # normalized (enc, dec): c1 (1.0, 0.0), c2 (0.0, 1.0), c3 (0.5, 0.8)
    # hybrids with (0.6, 0.4): 0.6, 0.4, 0.62 -> order c3, c1, c2
    audio = unit([1.0, 0.0])
    c1, c2, c3 = cand(["c1"]), cand(["c2"]), cand(["c3"])
    table = {
        "c1": unit([1.0, 0.0]),
        "c2": unit([0.0, 1.0]),
        "c3": unit([1.0, math.sqrt(3.0)]),  # cosine 0.5
    }
    dec = {("c1",): -1.0, ("c2",): 0.0, ("c3",): -0.2}
    fn = lambda tokens: [dec[tuple(tokens[:-1])]] * len(tokens)
    ranked = rank([c1, c2, c3], audio, embedder_table(table), fn, 0.6, 0.4, "hybrid", no_flags)
    assert [rc.candidate.words for rc in ranked] == [["c3"], ["c1"], ["c2"]]
    hybrids = {rc.candidate.words[0]: rc.scores.hybrid for rc in ranked}
    assert hybrids["c1"] == pytest.approx(0.6, abs=1e-9)
    assert hybrids["c2"] == pytest.approx(0.4, abs=1e-9)
    assert hybrids["c3"] == pytest.approx(0.62, abs=1e-9)
    for rc in ranked:
        assert rc.scores.hybrid == pytest.approx(
            0.6 * rc.scores.encoder_norm + 0.4 * rc.scores.decoder_norm, abs=1e-9
        )


def test_rank_dedups_and_is_permutation():
    audio = unit([1.0, 0.0])
    table = {"a dog": unit([1.0, 0.0]), "rain": unit([0.0, 1.0])}
    fn = lambda tokens: [-0.5] * len(tokens)
    cands = [cand(["a", "dog"]), cand(["rain"]), cand(["a", "dog"])]
    ranked = rank(cands, audio, embedder_table(table), fn, detector=no_flags)
    texts = [rc.candidate.text for rc in ranked]
    assert sorted(texts) == ["a dog", "rain"]
    assert [rc.rank for rc in ranked] == [0, 1]


def test_rank_drops_flagged_keeps_clean():
    audio = unit([1.0, 0.0])
    table = {"a dog barks": unit([1.0, 0.0]), "of the": unit([0.0, 1.0])}
    fn = lambda tokens: [-0.5] * len(tokens)
    det = lambda text: {"incomplete_ending"} if text == "of the" else set()
    ranked = rank(
        [cand(["of", "the"]), cand(["a", "dog", "barks"])],
        audio,
        embedder_table(table),
        fn,
        detector=det,
    )
    assert [rc.candidate.text for rc in ranked] == ["a dog barks"]


def test_rank_fallback_when_all_flagged():
    audio = unit([1.0, 0.0])
    table = {"bad one": unit([1.0, 0.0]), "bad two": unit([0.0, 1.0])}
    dec = {("bad", "one"): -2.0, ("bad", "two"): -1.0}
    fn = lambda tokens: [dec[tuple(tokens[:-1])]] * len(tokens)
    det = lambda text: {"too_short"}
    ranked = rank(
        [cand(["bad", "one"]), cand(["bad", "two"])],
        audio,
        embedder_table(table),
        fn,
        detector=det,
    )
    assert len(ranked) == 1
    assert ranked[0].candidate.text == "bad two"  # better decoder score


def test_rank_fallback_never_empty_fuzz():
    rng = np.random.default_rng(8)
    audio = unit([1.0, 0.0])
    fn = lambda tokens: [-0.5] * len(tokens)
    embed = lambda text: unit([1.0, 1.0])
    flags_pool = ["repeated_ngram", "incomplete_ending", "too_short", "no_content_word"]
    for _ in range(100):
        n = int(rng.integers(1, 8))
        cands = [cand([f"w{i}", f"x{int(rng.integers(0, 3))}"]) for i in range(n)]
        flagged = {
            c.text: {flags_pool[j] for j in rng.choice(4, size=int(rng.integers(0, 4)), replace=False)}
            for c in cands
        }
        det = lambda text: flagged[text]
        ranked = rank(cands, audio, embed, fn, detector=det)
        assert len(ranked) >= 1
        in_texts = {c.text for c in cands}
        assert all(rc.candidate.text in in_texts for rc in ranked)


def test_rank_single_candidate_every_mode():
    audio = unit([1.0, 0.0])
    embed = lambda text: unit([1.0, 0.0])
    fn = lambda tokens: [-0.2] * len(tokens)
    c = cand(["a", "dog", "barks"])
    for mode in ("encoder", "decoder", "hybrid", "beam_passthrough"):
        ranked = rank([c], audio, embed, fn, mode=mode, detector=no_flags)
        assert len(ranked) == 1
        assert ranked[0].candidate.text == "a dog barks"
        # constant score columns normalize to 0.5
        assert ranked[0].scores.encoder_norm == 0.5
        assert ranked[0].scores.decoder_norm == 0.5


def test_rank_hybrid_invariant_under_affine_rescaling():
    audio = unit([1.0, 0.0])
    table = {
        "one": unit([1.0, 0.0]),
        "two": unit([0.0, 1.0]),
        "three": unit([1.0, 1.0]),
    }
    cands = [cand(["one"]), cand(["two"]), cand(["three"])]
    dec = {("one",): -3.0, ("two",): -1.0, ("three",): -2.0}
    # hybrids: one 0.6, two 0.4, three 0.6/sqrt(2) + 0.2 ~ 0.624
    for scale, shift in ((1.0, 0.0), (7.5, 2.0), (0.3, -11.0)):
        fn = lambda tokens: [dec[tuple(tokens[:-1])] * scale + shift] * len(tokens)
        ranked = rank(cands, audio, embedder_table(table), fn, detector=no_flags)
        assert [rc.candidate.text for rc in ranked] == ["three", "one", "two"]


def test_rank_beam_passthrough_preserves_order():
    audio = unit([1.0, 0.0])
    embed = lambda text: unit([0.0, 1.0])
    fn = lambda tokens: [-0.2] * len(tokens)
    cands = [cand(["z", "last", "word"], source="beam"), cand(["a", "first", "word"], source="beam")]
    ranked = rank(cands, audio, embed, fn, mode="beam_passthrough", detector=no_flags)
    assert [rc.candidate.text for rc in ranked] == ["z last word", "a first word"]


def test_rank_rejects_bad_input():
    with pytest.raises(InputError):
        rank([], unit([1.0]), lambda t: unit([1.0]), lambda t: [], mode="hybrid")
    with pytest.raises(InputError):
        rank([cand(["x"])], unit([1.0]), lambda t: unit([1.0]), lambda t: [-0.1, -0.1], mode="bogus")


def test_ranked_row_shape():
    audio = unit([1.0, 0.0])
    embed = lambda text: unit([1.0, 0.0])
    fn = lambda tokens: [-0.2] * len(tokens)
    ranked = rank([cand(["a", "dog", "barks"])], audio, embed, fn, detector=no_flags)
    row = ranked_to_row("item1", ranked[0])
    assert row["item_id"] == "item1"
    assert row["rank"] == 0
    assert row["tokens"] == ["a", "dog", "barks", "</s>"]
    assert row["flags"] == []


def test_default_detector_uses_world_words():
    det = make_rule_detector()
    assert det("a dog barks") == set()
    assert "no_content_word" in det("sound of it all")
