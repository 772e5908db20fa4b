"""Model configuration, parameter initialization, and checkpoint I/O.

All parameters live in one name->array dict in float64. The sinusoidal
position table is derived, not trained, and is rebuilt on demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..artifacts import save_npz
from ..errors import ConfigError, DataError
from .vocab import CaptionVocab

CHECKPOINT_FORMAT = "capforge-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    n_q: int
    codebook_size: int  # K; the mask code is index K in every table
    seq_emb_dim: int
    vocab_tokens: tuple[str, ...]
    hidden: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError("hidden must be divisible by heads")
        if min(self.n_q, self.codebook_size, self.seq_emb_dim) < 1:
            raise ConfigError("n_q, codebook_size, seq_emb_dim must be >= 1")

    @property
    def vocab(self) -> CaptionVocab:
        return CaptionVocab(tokens=list(self.vocab_tokens))

    @property
    def mask_code(self) -> int:
        return self.codebook_size


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _attn_block(rng, prefix: str, h: int) -> dict[str, np.ndarray]:
    out = {}
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}_w{name}"] = _xavier(rng, h, h)
        out[f"{prefix}_b{name}"] = np.zeros(h)
    return out


def init_params(config: ModelConfig, seed: int) -> "ModelParams":
    rng = np.random.default_rng(seed)
    h, f = config.hidden, config.ffn_dim
    arrays: dict[str, np.ndarray] = {}
    for q in range(config.n_q):
        arrays[f"code_emb_{q}"] = rng.normal(0.0, 0.02, size=(config.codebook_size + 1, h))
    arrays["cap_emb"] = rng.normal(0.0, 0.02, size=(len(config.vocab_tokens), h))
    arrays["seq_proj_w"] = _xavier(rng, config.seq_emb_dim, h)
    arrays["seq_proj_b"] = np.zeros(h)
    for l in range(config.enc_layers):
        p = f"enc{l}"
        arrays[f"{p}_ln1_g"] = np.ones(h)
        arrays[f"{p}_ln1_b"] = np.zeros(h)
        arrays.update(_attn_block(rng, f"{p}_self", h))
        arrays[f"{p}_ln2_g"] = np.ones(h)
        arrays[f"{p}_ln2_b"] = np.zeros(h)
        arrays[f"{p}_ffn_w1"] = _xavier(rng, h, f)
        arrays[f"{p}_ffn_b1"] = np.zeros(f)
        arrays[f"{p}_ffn_w2"] = _xavier(rng, f, h)
        arrays[f"{p}_ffn_b2"] = np.zeros(h)
    arrays["enc_lnf_g"] = np.ones(h)
    arrays["enc_lnf_b"] = np.zeros(h)
    for l in range(config.dec_layers):
        p = f"dec{l}"
        arrays[f"{p}_ln1_g"] = np.ones(h)
        arrays[f"{p}_ln1_b"] = np.zeros(h)
        arrays.update(_attn_block(rng, f"{p}_self", h))
        arrays[f"{p}_ln2_g"] = np.ones(h)
        arrays[f"{p}_ln2_b"] = np.zeros(h)
        arrays.update(_attn_block(rng, f"{p}_cross", h))
        arrays[f"{p}_ln3_g"] = np.ones(h)
        arrays[f"{p}_ln3_b"] = np.zeros(h)
        arrays[f"{p}_ffn_w1"] = _xavier(rng, h, f)
        arrays[f"{p}_ffn_b1"] = np.zeros(f)
        arrays[f"{p}_ffn_w2"] = _xavier(rng, f, h)
        arrays[f"{p}_ffn_b2"] = np.zeros(h)
    arrays["dec_lnf_g"] = np.ones(h)
    arrays["dec_lnf_b"] = np.zeros(h)
    arrays["cap_head_w"] = _xavier(rng, h, len(config.vocab_tokens))
    arrays["cap_head_b"] = np.zeros(len(config.vocab_tokens))
    for q in range(config.n_q):
        arrays[f"mcm_w_{q}"] = _xavier(rng, h, config.codebook_size)
        arrays[f"mcm_b_{q}"] = np.zeros(config.codebook_size)
    return ModelParams(config=config, arrays=arrays)


def sinusoidal_positions(n: int, h: int) -> np.ndarray:
    """Fixed sin/cos position table, rows 0..n-1."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(h // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / h)
    table = np.zeros((n, h))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    _pos_cache: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)

    def positional(self, n: int) -> np.ndarray:
        if self._pos_cache.shape[0] < n or self._pos_cache.shape[1] != self.config.hidden:
            self._pos_cache = sinusoidal_positions(max(n, 64), self.config.hidden)
        return self._pos_cache[:n]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config, arrays={k: v.copy() for k, v in self.arrays.items()})

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": {
                "n_q": self.config.n_q,
                "codebook_size": self.config.codebook_size,
                "seq_emb_dim": self.config.seq_emb_dim,
                "vocab_tokens": list(self.config.vocab_tokens),
                "hidden": self.config.hidden,
                "heads": self.config.heads,
                "enc_layers": self.config.enc_layers,
                "dec_layers": self.config.dec_layers,
                "ffn_dim": self.config.ffn_dim,
            },
        }
        if extra_meta:
            meta["extra"] = extra_meta
        blob = dict(self.arrays)
        blob["__meta__"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
        )
        save_npz(path, blob)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as blob:
            try:
                meta = json.loads(bytes(blob["__meta__"]).decode())
            except (KeyError, ValueError) as exc:
                raise DataError(f"checkpoint {path} has no readable metadata") from exc
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise DataError(f"unsupported checkpoint format {meta.get('format')!r}")
            cfg = meta["config"]
            config = ModelConfig(
                n_q=cfg["n_q"],
                codebook_size=cfg["codebook_size"],
                seq_emb_dim=cfg["seq_emb_dim"],
                vocab_tokens=tuple(cfg["vocab_tokens"]),
                hidden=cfg["hidden"],
                heads=cfg["heads"],
                enc_layers=cfg["enc_layers"],
                dec_layers=cfg["dec_layers"],
                ffn_dim=cfg["ffn_dim"],
            )
            arrays = {k: blob[k].astype(np.float64) for k in blob.files if k != "__meta__"}
        expected = set(init_params(config, seed=0).arrays)
        if set(arrays) != expected:
            raise DataError("checkpoint parameter set does not match its config")
        return cls(config=config, arrays=arrays)
