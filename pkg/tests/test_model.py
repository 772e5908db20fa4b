"""Model tests: masking, composition, losses, gradient checks, training."""

import math

import numpy as np
import pytest

from capforge.errors import InputError, TrainingError
from capforge.model import (
    CaptionVocab,
    MaskedExample,
    ModelConfig,
    ModelParams,
    TrainConfig,
    TrainItem,
    TrainStage,
    apply_mcm_mask,
    compose_inputs,
    forward,
    grad_check,
    init_params,
    joint_loss,
    loss_and_grads,
    mask_item,
    train,
)


def tiny_vocab():
    return CaptionVocab.build(["a dog barks", "rain falls", "wind blows"])


def tiny_config(**over):
    vocab = tiny_vocab()
    base = dict(
        n_q=2,
        codebook_size=4,
        seq_emb_dim=3,
        vocab_tokens=tuple(vocab.tokens),
        hidden=8,
        heads=2,
        enc_layers=1,
        dec_layers=1,
        ffn_dim=16,
    )
    base.update(over)
    return ModelConfig(**base)


def random_item(cfg, rng, t=None, n_words=3):
    vocab = cfg.vocab
    t = int(rng.integers(3, 9)) if t is None else t
    codes = rng.integers(0, cfg.codebook_size, size=(cfg.n_q, t))
    emb = rng.normal(size=cfg.seq_emb_dim)
    emb /= np.linalg.norm(emb)
    words = rng.choice(vocab.tokens[4:], size=n_words)
    ids = [vocab.start_id] + [vocab.index[w] for w in words] + [vocab.end_id]
    return TrainItem(codes=codes, seq_emb=emb, caption_ids=np.asarray(ids))


# --- apply_mcm_mask ----------------------------------------------------------


def test_mask_ratio_zero_is_identity():
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 4, size=(2, 10))
    masked, cols = apply_mcm_mask(codes, 0.0, rng, mask_code=4)
    np.testing.assert_array_equal(masked, codes)
    assert cols.size == 0


def test_mask_ratio_one_masks_everything():
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 4, size=(3, 7))
    masked, cols = apply_mcm_mask(codes, 1.0, rng, mask_code=4)
    assert (masked == 4).all()
    assert cols.tolist() == list(range(7))


def test_mask_count_and_reproducibility():
    codes = np.arange(20).reshape(2, 10) % 4
    m1, c1 = apply_mcm_mask(codes, 0.3, np.random.default_rng(5), mask_code=4)
    m2, c2 = apply_mcm_mask(codes, 0.3, np.random.default_rng(5), mask_code=4)
    assert c1.size == 3  # round(0.3 * 10)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(m1, m2)
    assert (m1[:, c1] == 4).all()
    keep = [t for t in range(10) if t not in c1]
    np.testing.assert_array_equal(m1[:, keep], codes[:, keep])


def test_mask_leaves_original_untouched():
    codes = np.zeros((2, 6), dtype=np.int64)
    snapshot = codes.copy()
    apply_mcm_mask(codes, 0.5, np.random.default_rng(1), mask_code=4)
    np.testing.assert_array_equal(codes, snapshot)


def test_mask_labels_are_premask_codes():
    rng = np.random.default_rng(3)
    cfg = tiny_config()
    item = random_item(cfg, rng, t=8)
    ex = mask_item(item, 0.5, np.random.default_rng(7), cfg.mask_code)
    np.testing.assert_array_equal(ex.mcm_targets, item.codes[:, ex.mcm_cols])
    assert (ex.mcm_targets < cfg.codebook_size).all()


# --- compose_inputs ----------------------------------------------------------


def test_compose_zero_params_gives_zero():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    for k in params.arrays:
        params.arrays[k][:] = 0.0
    codes = np.zeros((2, 5), dtype=np.int64)
    emb = np.zeros(3)
    out = compose_inputs(params, codes, emb)
    assert out.shape == (6, 8)
    # positions are still added at t >= 1; zero the tables to silence them?
    # no: positional rows are fixed, so only position 0 is exactly zero here
    np.testing.assert_array_equal(out[0], np.zeros(8))


def test_compose_length_and_hand_fixture():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(2)
    codes = rng.integers(0, 4, size=(2, 3))
    emb = rng.normal(size=3)
    out = compose_inputs(params, codes, emb)
    assert out.shape == (4, 8)
    t0 = params.arrays["code_emb_0"][codes[0, 0]]
    t1 = params.arrays["code_emb_1"][codes[1, 0]]
    pos = params.positional(4)[1]
    np.testing.assert_allclose(out[1], t0 + t1 + pos, atol=1e-12)
    proj = emb @ params.arrays["seq_proj_w"] + params.arrays["seq_proj_b"]
    np.testing.assert_allclose(out[0], proj, atol=1e-12)


def test_compose_rejects_bad_code():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    codes = np.full((2, 3), cfg.mask_code + 1)
    from capforge.errors import DataError

    with pytest.raises(DataError):
        compose_inputs(params, codes, np.zeros(3))


# --- forward -----------------------------------------------------------------


def test_forward_zero_weights_uniform_softmax():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    for k in params.arrays:
        params.arrays[k][:] = 0.0
    enc = compose_inputs(params, np.zeros((2, 4), dtype=np.int64), np.zeros(3))
    vocab = cfg.vocab
    logits, _ = forward(params, enc, [vocab.start_id, 5])
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(p, np.full_like(p, 1.0 / vocab.size), atol=1e-12)


def test_forward_mcm_logits_permute_with_columns():
    cfg = tiny_config()
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 4, size=(2, 6))
    emb = rng.normal(size=3)
    emb /= np.linalg.norm(emb)
    enc = compose_inputs(params, codes, emb)
    _, mcm_a = forward(params, enc, [cfg.vocab.start_id], mcm_cols=np.array([1, 4]))
    _, mcm_b = forward(params, enc, [cfg.vocab.start_id], mcm_cols=np.array([4, 1]))
    for q in range(cfg.n_q):
        np.testing.assert_allclose(mcm_a[q][[0, 1]], mcm_b[q][[1, 0]], atol=1e-12)


def test_forward_batch_of_one_matches_unbatched():
    cfg = tiny_config()
    params = init_params(cfg, seed=9)
    rng = np.random.default_rng(1)
    a = mask_item(random_item(cfg, rng, t=5), 0.4, np.random.default_rng(2), cfg.mask_code)
    b = mask_item(random_item(cfg, rng, t=8), 0.4, np.random.default_rng(3), cfg.mask_code)
    solo, _ = loss_and_grads(params, [a], 1.0, want_grads=False)
    dup, _ = loss_and_grads(params, [a, a], 1.0, want_grads=False)
    assert solo.total == pytest.approx(dup.total, abs=1e-12)
    # mixed-length batch: total CE is the token-weighted mean of the parts
    la, _ = loss_and_grads(params, [a], 1.0, want_grads=False)
    lb, _ = loss_and_grads(params, [b], 1.0, want_grads=False)
    lab, _ = loss_and_grads(params, [a, b], 1.0, want_grads=False)
    na, nb = a.target_ids.shape[0], b.target_ids.shape[0]
    want_cap = (la.caption_ce * na + lb.caption_ce * nb) / (na + nb)
    assert lab.caption_ce == pytest.approx(want_cap, abs=1e-12)


# --- joint_loss --------------------------------------------------------------


def test_joint_loss_lambda_zero():
    logits = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    targets = np.array([2, 0])
    mcm = [np.array([[0.3, 0.7]])]
    mcm_t = np.array([[1]])
    total, cap, m = joint_loss(logits, targets, mcm, mcm_t, mcm_weight=0.0)
    assert total == cap
    assert m > 0.0  # still reported


def test_joint_loss_uniform_logits():
    v = 5
    logits = np.zeros((3, v))
    targets = np.array([0, 3, 4])
    total, cap, m = joint_loss(logits, targets, [], np.zeros((0, 0)), 1.0)
    assert cap == pytest.approx(math.log(v), abs=1e-12)
    assert m == 0.0
    assert total == cap


def test_joint_loss_hand_fixture():
    logits = np.array([[0.2, -0.1, 0.4], [1.0, 0.0, -1.0]])
    targets = np.array([2, 1])
    # hand softmax + log
    want = 0.0
    for i, t in enumerate(targets):
        z = logits[i] - logits[i].max()
        p = np.exp(z) / np.exp(z).sum()
        want += -math.log(p[t])
    want /= 2
    _, cap, _ = joint_loss(logits, targets, [], np.zeros((0, 0)), 1.0)
    assert cap == pytest.approx(want, abs=1e-9)


def test_joint_loss_additivity():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    targets = rng.integers(0, 6, size=4)
    mcm = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    mcm_t = rng.integers(0, 4, size=(2, 3))
    lam = 0.7
    total, cap, m = joint_loss(logits, targets, mcm, mcm_t, lam)
    assert total - lam * m == pytest.approx(cap, abs=1e-12)


# --- gradient check ----------------------------------------------------------


@pytest.fixture(scope="module")
def grad_fixture():
    cfg = tiny_config()
    params = init_params(cfg, seed=11)
    rng = np.random.default_rng(21)
    items = [random_item(cfg, rng, t=5), random_item(cfg, rng, t=7)]
    batch = [
        mask_item(items[0], 0.4, np.random.default_rng(31), cfg.mask_code),
        mask_item(items[1], 0.3, np.random.default_rng(32), cfg.mask_code),
    ]
    return params, batch


def test_grad_check_lambda_one(grad_fixture):
    params, batch = grad_fixture
    err = grad_check(params, batch, mcm_weight=1.0, eps=1e-4, seed=0)
    assert err < 1e-5


def test_grad_check_lambda_zero(grad_fixture):
    params, batch = grad_fixture
    err = grad_check(params, batch, mcm_weight=0.0, eps=1e-4, seed=0)
    assert err < 1e-5


def test_lambda_zero_mcm_grads_exactly_zero(grad_fixture):
    params, batch = grad_fixture
    _, grads = loss_and_grads(params, batch, mcm_weight=0.0)
    for q in range(params.config.n_q):
        assert (grads[f"mcm_w_{q}"] == 0.0).all()
        assert (grads[f"mcm_b_{q}"] == 0.0).all()


def test_duplicated_item_leaves_gradient_unchanged(grad_fixture):
    params, batch = grad_fixture
    _, g1 = loss_and_grads(params, [batch[0]], 1.0)
    _, g2 = loss_and_grads(params, [batch[0], batch[0]], 1.0)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


# --- training ----------------------------------------------------------------


def make_items(cfg, n, seed):
    rng = np.random.default_rng(seed)
    return [random_item(cfg, rng) for _ in range(n)]


def test_train_lr_zero_keeps_params():
    cfg = tiny_config()
    items = make_items(cfg, 8, seed=0)
    params, trace = train(
        cfg,
        [TrainStage("train", items, steps=5)],
        TrainConfig(lr=0.0, batch_size=4, seed=3),
    )
    fresh = init_params(cfg, seed=3)
    for k in fresh.arrays:
        np.testing.assert_array_equal(params.arrays[k], fresh.arrays[k])
    assert len(trace) == 5


def test_train_reduces_caption_ce():
    cfg = tiny_config()
    items = make_items(cfg, 24, seed=1)
    params, trace = train(
        cfg,
        [TrainStage("train", items, steps=200)],
        TrainConfig(lr=3e-3, batch_size=8, seed=5),
    )
    first = np.mean([r.caption_ce for r in trace[:10]])
    last = np.mean([r.caption_ce for r in trace[-10:]])
    assert last < first


def test_train_two_stage_schedule_logs_boundary():
    cfg = tiny_config()
    a = make_items(cfg, 8, seed=2)
    b = make_items(cfg, 8, seed=3)
    _, trace = train(
        cfg,
        [TrainStage("pretrain", a, steps=4), TrainStage("finetune", b, steps=4)],
        TrainConfig(lr=1e-3, batch_size=4, seed=1),
    )
    stages = [r.stage for r in trace]
    assert stages == ["pretrain"] * 4 + ["finetune"] * 4
    assert [r.step for r in trace] == list(range(8))


def test_train_divergence_raises():
    # Adam updates are scale-free and LayerNorm renormalizes activations, so
    # the loss only goes non-finite once parameters overflow inside attention
    cfg = tiny_config()
    items = make_items(cfg, 8, seed=4)
    with pytest.raises(TrainingError) as exc:
        train(
            cfg,
            [TrainStage("train", items, steps=30)],
            TrainConfig(lr=1e80, grad_clip=0.0, batch_size=8, seed=2),
        )
    assert exc.value.step is not None


def test_train_deterministic():
    cfg = tiny_config()
    items = make_items(cfg, 10, seed=6)
    p1, t1 = train(cfg, [TrainStage("s", items, 6)], TrainConfig(lr=1e-3, seed=9))
    p2, t2 = train(cfg, [TrainStage("s", items, 6)], TrainConfig(lr=1e-3, seed=9))
    for k in p1.arrays:
        np.testing.assert_array_equal(p1.arrays[k], p2.arrays[k])
    assert [r.total for r in t1] == [r.total for r in t2]


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, seed=13)
    path = tmp_path / "model.npz"
    params.save(path, extra_meta={"config_hash": "sha"})
    clone = ModelParams.load(path)
    assert clone.config == params.config
    for k in params.arrays:
        np.testing.assert_array_equal(clone.arrays[k], params.arrays[k])


def test_forward_requires_start_token():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    enc = compose_inputs(params, np.zeros((2, 2), dtype=np.int64), np.zeros(3))
    with pytest.raises(InputError):
        forward(params, enc, [5, 6])
