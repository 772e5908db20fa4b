"""Residual vector quantizer over synthetic feature frames.

A stack of k-means codebooks where level q is fitted on the residuals left
by levels 0..q-1. Encoding picks the nearest centroid per level and
subtracts it; decoding sums the selected centroids. There is no waveform
stage: the quantizer operates directly on real-valued feature frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError

KMEANS_MAX_ITERS = 25
KMEANS_REL_TOL = 1e-6

# Named configurations mirroring the codec variants under study. The two
# 32-codebook presets differ only in name at this scale; they exist so runs
# can be labeled by the variant they stand in for.
PRESETS: dict[str, dict] = {
    "encodec16": {"n_q": 16, "K": 1024, "frame_rate_hz": 75.0},
    "encodec8": {"n_q": 8, "K": 1024, "frame_rate_hz": 75.0},
    "encodec32": {"n_q": 32, "K": 1024, "frame_rate_hz": 75.0},
    "dac32": {"n_q": 32, "K": 1024, "frame_rate_hz": 75.0},
}


@dataclass(frozen=True)
class CodecConfig:
    """Shape of a residual quantizer: codebook count, size, frame geometry."""

    n_q: int
    K: int
    d: int
    frame_rate_hz: float
    name: str = "custom"

    def __post_init__(self):
        if not 1 <= self.n_q <= 64:
            raise ConfigError(f"n_q must be in 1..64, got {self.n_q}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.frame_rate_hz <= 0:
            raise ConfigError(f"frame_rate_hz must be > 0, got {self.frame_rate_hz}")

    @classmethod
    def from_preset(cls, name: str, d: int) -> "CodecConfig":
        if name not in PRESETS:
            raise ConfigError(
                f"unknown codec preset {name!r}; known: {sorted(PRESETS)}"
            )
        p = PRESETS[name]
        return cls(n_q=p["n_q"], K=p["K"], d=d, frame_rate_hz=p["frame_rate_hz"], name=name)


@dataclass
class FeatureSeq:
    """T x d matrix of real feature frames plus the rate they were rendered at."""

    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InputError(f"frames must be 2-D (T x d), got shape {self.frames.shape}")
        if self.frame_rate_hz <= 0:
            raise InputError("frame_rate_hz must be > 0")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


@dataclass
class CodecGrid:
    """n_q x T matrix of codebook indices for one sequence."""

    codes: np.ndarray
    config: CodecConfig

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise DataError(f"codes must be 2-D (n_q x T), got shape {self.codes.shape}")
        if self.codes.shape[0] != self.config.n_q:
            raise DataError(
                f"grid has {self.codes.shape[0]} rows, config expects {self.config.n_q}"
            )
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.config.K):
            raise DataError("code index out of range [0, K)")

    @property
    def T(self) -> int:
        return self.codes.shape[1]


@dataclass
class RvqCodec:
    """Fitted residual quantizer: one (K x d) centroid array per level."""

    codebooks: list[np.ndarray]
    config: CodecConfig
    train_mse_by_level: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.codebooks) != self.config.n_q:
            raise ConfigError(
                f"{len(self.codebooks)} codebooks for n_q={self.config.n_q}"
            )
        for q, cb in enumerate(self.codebooks):
            cb = np.asarray(cb, dtype=np.float64)
            if cb.shape != (self.config.K, self.config.d):
                raise ConfigError(
                    f"codebook {q} has shape {cb.shape}, "
                    f"expected ({self.config.K}, {self.config.d})"
                )
            self.codebooks[q] = cb


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the lowest index."""
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; the ||x||^2 term is constant per row.
    d2 = -2.0 * points @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
    return np.argmin(d2, axis=1)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all points coincide with chosen centroids; reuse uniformly
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm with k-means++ init and farthest-point reseeding."""
    centroids = _kmeans_pp_init(points, k, rng)
    prev_mse = np.inf
    for _ in range(KMEANS_MAX_ITERS):
        assign = _nearest(points, centroids)
        # reseed empty clusters with the point farthest from its centroid
        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            errs = ((points - centroids[assign]) ** 2).sum(axis=1)
            order = np.argsort(-errs)
            taken = 0
            for c in empty:
                while taken < order.size and errs[order[taken]] <= 0.0:
                    taken += 1
                if taken >= order.size:
                    break  # no distinct point left; cluster stays empty
                p = order[taken]
                centroids[c] = points[p]
                assign[p] = c
                taken += 1
        # update step: every non-empty cluster moves to its mean
        for c in range(k):
            members = points[assign == c]
            if members.shape[0]:
                centroids[c] = members.mean(axis=0)
        mse = float(((points - centroids[_nearest(points, centroids)]) ** 2).sum(axis=1).mean())
        if prev_mse < np.inf and prev_mse > 0 and (prev_mse - mse) / prev_mse < KMEANS_REL_TOL:
            break
        if mse == 0.0:
            break
        prev_mse = mse
    return centroids


def fit_rvq(corpus: Sequence[FeatureSeq], config: CodecConfig, seed: int) -> RvqCodec:
    """Fit codebooks greedily: level q runs k-means on the residuals of 0..q-1.

    Requires at least K frames in total. Records the training MSE after each
    level, which is non-increasing by construction.
    """
    seqs = list(corpus)
    if not seqs or sum(s.T for s in seqs) == 0:
        raise InputError("cannot fit a codec on an empty corpus")
    for s in seqs:
        if s.d != config.d:
            raise InputError(f"corpus dimension {s.d} != config d {config.d}")
    points = np.concatenate([s.frames for s in seqs], axis=0)
    if points.shape[0] < config.K:
        raise ConfigError(
            f"corpus has {points.shape[0]} frames but K={config.K}; "
            "need at least K frames to fit a codebook"
        )
    rng = np.random.default_rng(seed)
    residual = points.copy()
    codebooks = []
    mse_by_level = []
    for _ in range(config.n_q):
        cb = _lloyd(residual, config.K, rng)
        codebooks.append(cb)
        residual = residual - cb[_nearest(residual, cb)]
        mse_by_level.append(float((residual**2).sum(axis=1).mean()))
    return RvqCodec(codebooks=codebooks, config=config, train_mse_by_level=mse_by_level)


def encode(codec: RvqCodec, seq: FeatureSeq) -> CodecGrid:
    """Quantize a sequence: per level pick the nearest centroid to the residual."""
    if seq.d != codec.config.d:
        raise InputError(f"sequence dimension {seq.d} != codec d {codec.config.d}")
    codes = np.empty((codec.config.n_q, seq.T), dtype=np.int64)
    residual = seq.frames.copy()
    for q, cb in enumerate(codec.codebooks):
        if residual.shape[0]:
            idx = _nearest(residual, cb)
            residual = residual - cb[idx]
        else:
            idx = np.empty(0, dtype=np.int64)
        codes[q] = idx
    return CodecGrid(codes=codes, config=codec.config)


def decode(codec: RvqCodec, grid: CodecGrid) -> FeatureSeq:
    """Reconstruct frames as the per-timestep sum of selected centroids."""
    if grid.config.n_q != codec.config.n_q or grid.config.K != codec.config.K:
        raise DataError("grid config does not match codec config")
    if grid.codes.size and grid.codes.max() >= codec.config.K:
        raise DataError("grid contains an out-of-range index")
    frames = np.zeros((grid.T, codec.config.d), dtype=np.float64)
    for q, cb in enumerate(codec.codebooks):
        frames += cb[grid.codes[q]]
    return FeatureSeq(frames=frames, frame_rate_hz=codec.config.frame_rate_hz)


def reconstruction_mse(codec: RvqCodec, corpus: Iterable[FeatureSeq]) -> float:
    """Mean over frames of the squared Euclidean error of decode(encode(x))."""
    total = 0.0
    n = 0
    seen = False
    for seq in corpus:
        seen = True
        rec = decode(codec, encode(codec, seq))
        total += float(((seq.frames - rec.frames) ** 2).sum())
        n += seq.T
    if not seen or n == 0:
        raise InputError("reconstruction_mse needs a non-empty corpus")
    return total / n


# ---------------------------------------------------------------------------
# serialization


def codec_to_json(codec: RvqCodec) -> dict:
    return {
        "format": "capforge-rvq-v1",
        "config": {
            "n_q": codec.config.n_q,
            "K": codec.config.K,
            "d": codec.config.d,
            "frame_rate_hz": codec.config.frame_rate_hz,
            "name": codec.config.name,
        },
        # row-major (K*d) centroid array per level
        "codebooks": [cb.reshape(-1).tolist() for cb in codec.codebooks],
        "train_mse_by_level": codec.train_mse_by_level,
    }


def codec_from_json(obj: dict) -> RvqCodec:
    try:
        cfg = obj["config"]
        config = CodecConfig(
            n_q=cfg["n_q"],
            K=cfg["K"],
            d=cfg["d"],
            frame_rate_hz=cfg["frame_rate_hz"],
            name=cfg.get("name", "custom"),
        )
        codebooks = [
            np.asarray(flat, dtype=np.float64).reshape(config.K, config.d)
            for flat in obj["codebooks"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed codec blob: {exc}") from exc
    return RvqCodec(
        codebooks=codebooks,
        config=config,
        train_mse_by_level=list(obj.get("train_mse_by_level", [])),
    )


def save_codec(codec: RvqCodec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(codec_to_json(codec), fh, sort_keys=True)
        fh.write("\n")


def load_codec(path) -> RvqCodec:
    with open(path, encoding="utf-8") as fh:
        return codec_from_json(json.load(fh))


def grid_to_row(item_id: str, grid: CodecGrid) -> dict:
    return {
        "id": item_id,
        "n_q": grid.config.n_q,
        "T": grid.T,
        "codes": grid.codes.tolist(),
    }


def grid_from_row(row: dict, config: CodecConfig) -> tuple[str, CodecGrid]:
    try:
        codes = np.asarray(row["codes"], dtype=np.int64)
        if codes.shape != (row["n_q"], row["T"]):
            raise DataError(
                f"grid row {row.get('id')!r}: codes shape {codes.shape} "
                f"!= declared ({row['n_q']}, {row['T']})"
            )
        return str(row["id"]), CodecGrid(codes=codes, config=config)
    except KeyError as exc:
        raise DataError(f"grid row missing field {exc}") from exc
