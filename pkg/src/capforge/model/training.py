"""Training loop, MCM masking, Adam updates, and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, TrainingError
from .network import LossBreakdown, MaskedExample, loss_and_grads
from .params import ModelConfig, ModelParams, init_params


@dataclass
class TrainItem:
    """One (grid, clip embedding, caption) pair before masking."""

    codes: np.ndarray  # (n_q, T) original codes, all < K
    seq_emb: np.ndarray  # (e,)
    caption_ids: np.ndarray  # (L,) <s> w... </s>


@dataclass
class TrainStage:
    name: str
    items: list[TrainItem]
    steps: int


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    mcm_ratio: float = 0.15
    mcm_weight: float = 1.0
    grad_clip: float = 1.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.mcm_ratio <= 1.0:
            raise InputError("mcm_ratio must be in [0, 1]")
        if self.mcm_weight < 0.0:
            raise InputError("mcm_weight must be >= 0")


@dataclass
class TraceRow:
    step: int
    stage: str
    total: float
    caption_ce: float
    mcm_ce: float


def apply_mcm_mask(
    codes: np.ndarray, ratio: float, rng: np.random.Generator, mask_code: int
) -> tuple[np.ndarray, np.ndarray]:
    """Replace round(ratio*T) whole columns with the mask code.

    Returns (masked copy, sorted masked column indices); the input grid is
    left untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"mask ratio must be in [0, 1], got {ratio}")
    codes = np.asarray(codes)
    t = codes.shape[1]
    n_mask = int(round(ratio * t))
    masked = codes.copy()
    if n_mask == 0:
        return masked, np.zeros(0, dtype=np.int64)
    cols = np.sort(rng.choice(t, size=n_mask, replace=False)).astype(np.int64)
    masked[:, cols] = mask_code
    return masked, cols


def mask_item(
    item: TrainItem, ratio: float, rng: np.random.Generator, mask_code: int
) -> MaskedExample:
    masked, cols = apply_mcm_mask(item.codes, ratio, rng, mask_code)
    return MaskedExample(
        codes=masked,
        seq_emb=item.seq_emb,
        prefix_ids=item.caption_ids[:-1],
        target_ids=item.caption_ids[1:],
        mcm_cols=cols,
        mcm_targets=item.codes[:, cols],
    )


class Adam:
    def __init__(self, params: ModelParams, config: TrainConfig):
        self.cfg = config
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        if cfg.grad_clip > 0.0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1**self.t
        b2c = 1.0 - cfg.adam_beta2**self.t
        for k in sorted(params.arrays):
            g = grads[k]
            self.m[k] = cfg.adam_beta1 * self.m[k] + (1.0 - cfg.adam_beta1) * g
            self.v[k] = cfg.adam_beta2 * self.v[k] + (1.0 - cfg.adam_beta2) * (g * g)
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + cfg.adam_eps)
            params.arrays[k] -= cfg.lr * update


def train(
    model_config: ModelConfig,
    stages: list[TrainStage],
    config: TrainConfig,
) -> tuple[ModelParams, list[TraceRow]]:
    """Run the stage schedule; deterministic for a fixed seed.

    Every step samples a batch, masks it, and takes one clipped Adam step.
    Raises TrainingError with the failing step if the loss goes non-finite.
    """
    if not stages or any(not s.items for s in stages):
        raise InputError("every training stage needs items")
    params = init_params(model_config, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(params, config)
    trace: list[TraceRow] = []
    step = 0
    for stage in stages:
        items = stage.items
        for _ in range(stage.steps):
            idx = rng.choice(len(items), size=min(config.batch_size, len(items)), replace=False)
            batch = [
                mask_item(items[i], config.mcm_ratio, rng, model_config.mask_code)
                for i in idx
            ]
            # overflow surfaces as a non-finite loss, which the guard below
            # turns into a TrainingError; the raw warnings are just noise
            with np.errstate(over="ignore", invalid="ignore"):
                losses, grads = loss_and_grads(params, batch, config.mcm_weight)
            if not math.isfinite(losses.total):
                raise TrainingError(
                    f"non-finite loss at step {step} (stage {stage.name!r})", step=step
                )
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(params, grads)
            trace.append(
                TraceRow(
                    step=step,
                    stage=stage.name,
                    total=losses.total,
                    caption_ce=losses.caption_ce,
                    mcm_ce=losses.mcm_ce,
                )
            )
            step += 1
    return params, trace


def grad_check(
    params: ModelParams,
    batch: list[MaskedExample],
    mcm_weight: float,
    eps: float = 1e-4,
    max_coords_per_tensor: int = 24,
    seed: int = 0,
) -> float:
    """Max guarded relative error between analytic and central-difference grads.

    For every parameter tensor a deterministic sample of coordinates is
    perturbed by +-eps. The error denominator is floored at 1e-3 so
    near-zero coordinates are compared absolutely; coordinates with real
    magnitude are compared relatively.
    """
    _, grads = loss_and_grads(params, batch, mcm_weight)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params.arrays):
        arr = params.arrays[name]
        flat = arr.reshape(-1)
        size = flat.shape[0]
        if size <= max_coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords_per_tensor, replace=False))
        g_flat = grads[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up, _ = loss_and_grads(params, batch, mcm_weight, want_grads=False)
            flat[c] = orig - eps
            dn, _ = loss_and_grads(params, batch, mcm_weight, want_grads=False)
            flat[c] = orig
            fd = (up.total - dn.total) / (2.0 * eps)
            a = float(g_flat[c])
            err = abs(a - fd) / max(1e-3, abs(a) + abs(fd))
            worst = max(worst, err)
    return worst


def mcm_accuracy(
    params: ModelParams,
    items: list[TrainItem],
    ratio: float,
    seed: int,
) -> float:
    """Top-1 accuracy of masked-code prediction over all levels and cells."""
    from .network import build_batch, compose_batch, encoder_fwd, mcm_fwd

    rng = np.random.default_rng(seed)
    hits = 0
    cells = 0
    for item in items:
        ex = mask_item(item, ratio, rng, params.config.mask_code)
        if ex.mcm_cols.size == 0:
            continue
        batch = build_batch(params, [ex])
        x = compose_batch(params, batch)
        memory, _ = encoder_fwd(params, x, batch.enc_mask)
        logits, _ = mcm_fwd(params, memory, batch)
        for q in range(params.config.n_q):
            pred = logits[q].argmax(axis=1)
            hits += int((pred == batch.mcm_targets[q]).sum())
            cells += pred.shape[0]
    if cells == 0:
        raise InputError("no masked cells; increase ratio or sequence lengths")
    return hits / cells
