"""Encoder-decoder caption network with hand-derived gradients.

Input composition: position 0 carries the projected sequence embedding,
positions 1..T carry the per-codebook embedding sum for each grid column
plus a fixed sinusoidal position row. A pre-norm transformer encoder reads
the composed sequence; a pre-norm decoder with causal self-attention and
cross-attention emits caption logits; per-codebook linear heads read the
encoder output at masked columns for code prediction.

Everything is float64 and deterministic. Backward passes are written out
explicitly so they can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, InputError
from .params import ModelParams

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# batch container


@dataclass
class MaskedExample:
    """One training example after MCM masking.

    codes may contain the mask code (== codebook_size); mcm_targets holds
    the pre-mask codes of the masked columns, so labels never see the mask.
    """

    codes: np.ndarray  # (n_q, T) int
    seq_emb: np.ndarray  # (e,)
    prefix_ids: np.ndarray  # (P,) int, starts with <s>
    target_ids: np.ndarray  # (P,) int, ends with </s>
    mcm_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mcm_targets: np.ndarray | None = None  # (n_q, M)


@dataclass
class _Batch:
    codes: np.ndarray  # (B, n_q, Tm)
    enc_mask: np.ndarray  # (B, Tm+1) bool
    seq_emb: np.ndarray  # (B, e)
    prefix: np.ndarray  # (B, Pm)
    targets: np.ndarray  # (B, Pm)
    target_valid: np.ndarray  # (B, Pm) bool
    mcm_rows: np.ndarray  # (Mtot,) batch index
    mcm_cols: np.ndarray  # (Mtot,) grid column
    mcm_targets: np.ndarray  # (n_q, Mtot)


def build_batch(params: ModelParams, examples: list[MaskedExample]) -> _Batch:
    cfg = params.config
    if not examples:
        raise InputError("empty batch")
    n_q = cfg.n_q
    t_max = max(ex.codes.shape[1] for ex in examples)
    p_max = max(ex.prefix_ids.shape[0] for ex in examples)
    b = len(examples)
    codes = np.zeros((b, n_q, t_max), dtype=np.int64)
    enc_mask = np.zeros((b, t_max + 1), dtype=bool)
    seq_emb = np.zeros((b, cfg.seq_emb_dim))
    prefix = np.full((b, p_max), cfg.vocab.pad_id, dtype=np.int64)
    targets = np.full((b, p_max), cfg.vocab.pad_id, dtype=np.int64)
    rows, cols, tgts = [], [], []
    for i, ex in enumerate(examples):
        if ex.codes.shape[0] != n_q:
            raise InputError(f"example {i}: expected {n_q} code rows")
        if ex.codes.size and ex.codes.max() > cfg.mask_code:
            raise DataError(f"example {i}: code index above mask code {cfg.mask_code}")
        t_i = ex.codes.shape[1]
        codes[i, :, :t_i] = ex.codes
        enc_mask[i, : t_i + 1] = True
        seq_emb[i] = ex.seq_emb
        p_i = ex.prefix_ids.shape[0]
        prefix[i, :p_i] = ex.prefix_ids
        targets[i, :p_i] = ex.target_ids
        if ex.mcm_cols.size:
            rows.extend([i] * ex.mcm_cols.size)
            cols.extend(int(c) for c in ex.mcm_cols)
            tgts.append(ex.mcm_targets)
    mcm_targets = (
        np.concatenate(tgts, axis=1) if tgts else np.zeros((n_q, 0), dtype=np.int64)
    )
    return _Batch(
        codes=codes,
        enc_mask=enc_mask,
        seq_emb=seq_emb,
        prefix=prefix,
        targets=targets,
        target_valid=targets != cfg.vocab.pad_id,
        mcm_rows=np.asarray(rows, dtype=np.int64),
        mcm_cols=np.asarray(cols, dtype=np.int64),
        mcm_targets=mcm_targets,
    )


# ---------------------------------------------------------------------------
# primitives


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache, grads, g_name, b_name):
    xhat, inv, g = cache
    lead = tuple(range(dy.ndim - 1))
    grads[g_name] += (dy * xhat).sum(axis=lead)
    grads[b_name] += dy.sum(axis=lead)
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _gelu_fwd(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def _gelu_bwd(dy, cache):
    x, x2, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _linear_bwd(dy, x, w, grads, w_name, b_name):
    h_in = x.shape[-1]
    h_out = dy.shape[-1]
    grads[w_name] += x.reshape(-1, h_in).T @ dy.reshape(-1, h_out)
    grads[b_name] += dy.reshape(-1, h_out).sum(axis=0)
    return dy @ w.T


def _attn_fwd(arrays, prefix, heads, q_in, kv_in, key_mask=None, causal=False):
    wq, bq = arrays[f"{prefix}_wq"], arrays[f"{prefix}_bq"]
    wk, bk = arrays[f"{prefix}_wk"], arrays[f"{prefix}_bk"]
    wv, bv = arrays[f"{prefix}_wv"], arrays[f"{prefix}_bv"]
    wo, bo = arrays[f"{prefix}_wo"], arrays[f"{prefix}_bo"]
    big_q = q_in @ wq + bq
    big_k = kv_in @ wk + bk
    big_v = kv_in @ wv + bv
    b, lq, h = big_q.shape
    lk = big_k.shape[1]
    dh = h // heads
    q = big_q.reshape(b, lq, heads, dh).transpose(0, 2, 1, 3)
    k = big_k.reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    v = big_v.reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    if key_mask is not None:
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    if causal:
        allow = np.tril(np.ones((lq, lk), dtype=bool))
        scores = np.where(allow, scores, -np.inf)
    m = scores.max(-1, keepdims=True)
    e = np.exp(scores - m)
    attn = e / e.sum(-1, keepdims=True)
    ctx = attn @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, lq, h)
    out = merged @ wo + bo
    cache = (q_in, kv_in, q, k, v, attn, merged, prefix, heads)
    return out, cache


def _attn_bwd(dout, cache, arrays, grads):
    q_in, kv_in, q, k, v, attn, merged, prefix, heads = cache
    wq, wk, wv, wo = (arrays[f"{prefix}_w{n}"] for n in "qkvo")
    b, lq, h = dout.shape
    lk = kv_in.shape[1]
    dh = h // heads
    dmerged = _linear_bwd(dout, merged, wo, grads, f"{prefix}_wo", f"{prefix}_bo")
    dctx = dmerged.reshape(b, lq, heads, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
    draw = dscores / math.sqrt(dh)
    dq = draw @ k
    dk = draw.transpose(0, 1, 3, 2) @ q
    dbig_q = dq.transpose(0, 2, 1, 3).reshape(b, lq, h)
    dbig_k = dk.transpose(0, 2, 1, 3).reshape(b, lk, h)
    dbig_v = dv.transpose(0, 2, 1, 3).reshape(b, lk, h)
    dq_in = _linear_bwd(dbig_q, q_in, wq, grads, f"{prefix}_wq", f"{prefix}_bq")
    dkv_in = _linear_bwd(dbig_k, kv_in, wk, grads, f"{prefix}_wk", f"{prefix}_bk")
    dkv_in += _linear_bwd(dbig_v, kv_in, wv, grads, f"{prefix}_wv", f"{prefix}_bv")
    return dq_in, dkv_in


# ---------------------------------------------------------------------------
# composition


def compose_batch(params: ModelParams, batch: _Batch):
    cfg = params.config
    arrays = params.arrays
    b, n_q, t_max = batch.codes.shape
    x = np.zeros((b, t_max + 1, cfg.hidden))
    x[:, 0, :] = batch.seq_emb @ arrays["seq_proj_w"] + arrays["seq_proj_b"]
    for q in range(n_q):
        x[:, 1:, :] += arrays[f"code_emb_{q}"][batch.codes[:, q, :]]
    if t_max:
        x[:, 1:, :] += params.positional(t_max + 1)[1:][None, :, :]
    x *= batch.enc_mask[:, :, None]
    return x


def compose_batch_bwd(params: ModelParams, batch: _Batch, dx, grads):
    dx = dx * batch.enc_mask[:, :, None]
    d0 = dx[:, 0, :]
    grads["seq_proj_w"] += batch.seq_emb.T @ d0
    grads["seq_proj_b"] += d0.sum(axis=0)
    dcols = dx[:, 1:, :]
    for q in range(params.config.n_q):
        np.add.at(grads[f"code_emb_{q}"], batch.codes[:, q, :], dcols)


def compose_inputs(params: ModelParams, codes: np.ndarray, seq_emb: np.ndarray) -> np.ndarray:
    """Single-sequence encoder input: (T+1, hidden)."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] != params.config.n_q:
        raise InputError(f"codes must be (n_q, T), got {codes.shape}")
    if codes.size and codes.max() > params.config.mask_code:
        raise DataError("code index above the mask code")
    seq_emb = np.asarray(seq_emb, dtype=np.float64)
    if seq_emb.shape != (params.config.seq_emb_dim,):
        raise InputError("sequence embedding has wrong dimension")
    ex = MaskedExample(
        codes=codes,
        seq_emb=seq_emb,
        prefix_ids=np.array([params.config.vocab.start_id]),
        target_ids=np.array([params.config.vocab.end_id]),
    )
    batch = build_batch(params, [ex])
    return compose_batch(params, batch)[0]


# ---------------------------------------------------------------------------
# encoder / decoder stacks


def encoder_fwd(params: ModelParams, x, enc_mask):
    arrays = params.arrays
    heads = params.config.heads
    caches = []
    for l in range(params.config.enc_layers):
        p = f"enc{l}"
        u, c_ln1 = _ln_fwd(x, arrays[f"{p}_ln1_g"], arrays[f"{p}_ln1_b"])
        a, c_att = _attn_fwd(arrays, f"{p}_self", heads, u, u, key_mask=enc_mask)
        x1 = x + a
        v, c_ln2 = _ln_fwd(x1, arrays[f"{p}_ln2_g"], arrays[f"{p}_ln2_b"])
        f1 = v @ arrays[f"{p}_ffn_w1"] + arrays[f"{p}_ffn_b1"]
        g, c_gelu = _gelu_fwd(f1)
        f2 = g @ arrays[f"{p}_ffn_w2"] + arrays[f"{p}_ffn_b2"]
        x = x1 + f2
        caches.append((c_ln1, c_att, c_ln2, c_gelu, v, g))
    memory, c_lnf = _ln_fwd(x, arrays["enc_lnf_g"], arrays["enc_lnf_b"])
    return memory, (caches, c_lnf)


def encoder_bwd(params: ModelParams, dmemory, cache, grads):
    arrays = params.arrays
    caches, c_lnf = cache
    dx = _ln_bwd(dmemory, c_lnf, grads, "enc_lnf_g", "enc_lnf_b")
    for l in reversed(range(params.config.enc_layers)):
        p = f"enc{l}"
        c_ln1, c_att, c_ln2, c_gelu, v, g = caches[l]
        df2 = dx
        dg = _linear_bwd(df2, g, arrays[f"{p}_ffn_w2"], grads, f"{p}_ffn_w2", f"{p}_ffn_b2")
        df1 = _gelu_bwd(dg, c_gelu)
        dv = _linear_bwd(df1, v, arrays[f"{p}_ffn_w1"], grads, f"{p}_ffn_w1", f"{p}_ffn_b1")
        dx1 = dx + _ln_bwd(dv, c_ln2, grads, f"{p}_ln2_g", f"{p}_ln2_b")
        da = dx1
        dq_in, dkv_in = _attn_bwd(da, c_att, arrays, grads)
        du = dq_in + dkv_in
        dx = dx1 + _ln_bwd(du, c_ln1, grads, f"{p}_ln1_g", f"{p}_ln1_b")
    return dx


def decoder_fwd(params: ModelParams, memory, enc_mask, prefix):
    arrays = params.arrays
    cfg = params.config
    heads = cfg.heads
    b, p_max = prefix.shape
    d = arrays["cap_emb"][prefix] + params.positional(p_max)[None, :, :]
    caches = []
    x = d
    for l in range(cfg.dec_layers):
        p = f"dec{l}"
        u, c_ln1 = _ln_fwd(x, arrays[f"{p}_ln1_g"], arrays[f"{p}_ln1_b"])
        a, c_self = _attn_fwd(arrays, f"{p}_self", heads, u, u, causal=True)
        x1 = x + a
        v, c_ln2 = _ln_fwd(x1, arrays[f"{p}_ln2_g"], arrays[f"{p}_ln2_b"])
        c, c_cross = _attn_fwd(arrays, f"{p}_cross", heads, v, memory, key_mask=enc_mask)
        x2 = x1 + c
        w, c_ln3 = _ln_fwd(x2, arrays[f"{p}_ln3_g"], arrays[f"{p}_ln3_b"])
        f1 = w @ arrays[f"{p}_ffn_w1"] + arrays[f"{p}_ffn_b1"]
        g, c_gelu = _gelu_fwd(f1)
        f2 = g @ arrays[f"{p}_ffn_w2"] + arrays[f"{p}_ffn_b2"]
        x = x2 + f2
        caches.append((c_ln1, c_self, c_ln2, c_cross, c_ln3, c_gelu, w, g))
    dec_out, c_lnf = _ln_fwd(x, arrays["dec_lnf_g"], arrays["dec_lnf_b"])
    logits = dec_out @ arrays["cap_head_w"] + arrays["cap_head_b"]
    return logits, (caches, c_lnf, dec_out, prefix)


def decoder_bwd(params: ModelParams, dlogits, cache, grads):
    """Returns d(memory). Accumulates all decoder parameter gradients."""
    arrays = params.arrays
    caches, c_lnf, dec_out, prefix = cache
    ddec_out = _linear_bwd(dlogits, dec_out, arrays["cap_head_w"], grads, "cap_head_w", "cap_head_b")
    dx = _ln_bwd(ddec_out, c_lnf, grads, "dec_lnf_g", "dec_lnf_b")
    dmemory = None
    for l in reversed(range(params.config.dec_layers)):
        p = f"dec{l}"
        c_ln1, c_self, c_ln2, c_cross, c_ln3, c_gelu, w, g = caches[l]
        dg = _linear_bwd(dx, g, arrays[f"{p}_ffn_w2"], grads, f"{p}_ffn_w2", f"{p}_ffn_b2")
        df1 = _gelu_bwd(dg, c_gelu)
        dw = _linear_bwd(df1, w, arrays[f"{p}_ffn_w1"], grads, f"{p}_ffn_w1", f"{p}_ffn_b1")
        dx2 = dx + _ln_bwd(dw, c_ln3, grads, f"{p}_ln3_g", f"{p}_ln3_b")
        dq_in, dmem_l = _attn_bwd(dx2, c_cross, arrays, grads)
        dmemory = dmem_l if dmemory is None else dmemory + dmem_l
        dx1 = dx2 + _ln_bwd(dq_in, c_ln2, grads, f"{p}_ln2_g", f"{p}_ln2_b")
        dq_s, dkv_s = _attn_bwd(dx1, c_self, arrays, grads)
        dx = dx1 + _ln_bwd(dq_s + dkv_s, c_ln1, grads, f"{p}_ln1_g", f"{p}_ln1_b")
    np.add.at(grads["cap_emb"], prefix, dx)
    return dmemory


def mcm_fwd(params: ModelParams, memory, batch: _Batch):
    gathered = memory[batch.mcm_rows, batch.mcm_cols + 1]  # (Mtot, h)
    logits = [
        gathered @ params.arrays[f"mcm_w_{q}"] + params.arrays[f"mcm_b_{q}"]
        for q in range(params.config.n_q)
    ]
    return logits, gathered


def mcm_bwd(params: ModelParams, dlogits_list, gathered, batch: _Batch, dmemory, grads):
    h = params.config.hidden
    dgathered = np.zeros_like(gathered)
    for q, dlq in enumerate(dlogits_list):
        grads[f"mcm_w_{q}"] += gathered.T @ dlq
        grads[f"mcm_b_{q}"] += dlq.sum(axis=0)
        dgathered += dlq @ params.arrays[f"mcm_w_{q}"].T
    np.add.at(dmemory, (batch.mcm_rows, batch.mcm_cols + 1), dgathered)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(logits):
    m = logits.max(-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def joint_loss(
    caption_logits: np.ndarray,
    caption_targets: np.ndarray,
    mcm_logits: list[np.ndarray],
    mcm_targets: np.ndarray,
    mcm_weight: float,
) -> tuple[float, float, float]:
    """total = caption CE + weight * MCM CE, both token-averaged natural logs.

    caption_logits (P, V) with targets (P,); mcm_logits is one (M, K) array
    per codebook with targets (n_q, M). With no masked cells the MCM term
    is zero.
    """
    logp = _log_softmax(np.asarray(caption_logits, dtype=np.float64))
    targets = np.asarray(caption_targets, dtype=np.int64)
    if targets.shape[0] != logp.shape[0]:
        raise InputError("one caption target per position required")
    cap_ce = float(-logp[np.arange(targets.shape[0]), targets].mean()) if targets.size else 0.0
    n_cells = sum(int(l.shape[0]) for l in mcm_logits)
    if n_cells == 0:
        mcm_ce = 0.0
    else:
        total = 0.0
        for q, lq in enumerate(mcm_logits):
            lp = _log_softmax(np.asarray(lq, dtype=np.float64))
            tq = np.asarray(mcm_targets[q], dtype=np.int64)
            total += float(-lp[np.arange(tq.shape[0]), tq].sum())
        mcm_ce = total / n_cells
    return cap_ce + mcm_weight * mcm_ce, cap_ce, mcm_ce


@dataclass
class LossBreakdown:
    total: float
    caption_ce: float
    mcm_ce: float


def loss_and_grads(
    params: ModelParams,
    examples: list[MaskedExample],
    mcm_weight: float,
    want_grads: bool = True,
) -> tuple[LossBreakdown, dict[str, np.ndarray] | None]:
    """Joint loss over a batch; gradients for every parameter if requested.

    Caption CE averages over non-pad target positions of the whole batch;
    MCM CE averages over all masked cells across codebooks and items.
    """
    batch = build_batch(params, examples)
    x = compose_batch(params, batch)
    memory, enc_cache = encoder_fwd(params, x, batch.enc_mask)
    cap_logits, dec_cache = decoder_fwd(params, memory, batch.enc_mask, batch.prefix)
    mcm_logits, gathered = mcm_fwd(params, memory, batch)

    valid = batch.target_valid
    n_valid = int(valid.sum())
    logp = _log_softmax(cap_logits)
    b_idx, p_idx = np.nonzero(valid)
    cap_ce = float(-logp[b_idx, p_idx, batch.targets[b_idx, p_idx]].sum() / n_valid)

    n_q = params.config.n_q
    m_tot = batch.mcm_cols.shape[0]
    if m_tot:
        mcm_sum = 0.0
        mcm_logps = []
        for q in range(n_q):
            lp = _log_softmax(mcm_logits[q])
            mcm_logps.append(lp)
            mcm_sum += float(-lp[np.arange(m_tot), batch.mcm_targets[q]].sum())
        mcm_ce = mcm_sum / (n_q * m_tot)
    else:
        mcm_ce = 0.0
    losses = LossBreakdown(
        total=cap_ce + mcm_weight * mcm_ce, caption_ce=cap_ce, mcm_ce=mcm_ce
    )
    if not want_grads:
        return losses, None

    grads = params.zeros_like()
    dcap = np.exp(logp)
    dcap[b_idx, p_idx, batch.targets[b_idx, p_idx]] -= 1.0
    dcap *= valid[:, :, None] / n_valid
    dmemory = decoder_bwd(params, dcap, dec_cache, grads)
    if m_tot:
        dmcm = []
        for q in range(n_q):
            dq = np.exp(mcm_logps[q])
            dq[np.arange(m_tot), batch.mcm_targets[q]] -= 1.0
            dq *= mcm_weight / (n_q * m_tot)
            dmcm.append(dq)
        mcm_bwd(params, dmcm, gathered, batch, dmemory, grads)
    dx = encoder_bwd(params, dmemory, enc_cache, grads)
    compose_batch_bwd(params, batch, dx, grads)
    return losses, grads


# ---------------------------------------------------------------------------
# single-item public surface


def forward(
    params: ModelParams,
    enc_inputs: np.ndarray,
    prefix_ids: np.ndarray,
    mcm_cols: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Caption logits (P, V) and per-codebook MCM logits at masked columns.

    enc_inputs is one composed sequence of shape (T+1, hidden); the MCM
    columns index grid columns 0..T-1.
    """
    enc_inputs = np.asarray(enc_inputs, dtype=np.float64)
    if enc_inputs.ndim != 2 or enc_inputs.shape[1] != params.config.hidden:
        raise InputError(f"enc_inputs must be (T+1, hidden), got {enc_inputs.shape}")
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    if prefix_ids.ndim != 1 or prefix_ids.size == 0:
        raise InputError("prefix must be a non-empty id sequence")
    if prefix_ids[0] != params.config.vocab.start_id:
        raise InputError("prefix must begin with the start token")
    s = enc_inputs.shape[0]
    enc_mask = np.ones((1, s), dtype=bool)
    memory, _ = encoder_fwd(params, enc_inputs[None], enc_mask)
    logits, _ = decoder_fwd(params, memory, enc_mask, prefix_ids[None])
    cols = np.asarray(mcm_cols if mcm_cols is not None else [], dtype=np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= s - 1):
        raise InputError("mcm column out of range")
    gathered = memory[0, cols + 1]
    mcm_logits = [
        gathered @ params.arrays[f"mcm_w_{q}"] + params.arrays[f"mcm_b_{q}"]
        for q in range(params.config.n_q)
    ]
    return logits[0], mcm_logits
