"""Multi-modal tokens: scaled interarrival | one-hot event type | one-hot stop flag."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .trace import Event, Generation, Stream, TraceDataset, interarrivals

log = logging.getLogger(__name__)


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    generation: Generation
    scaler_min: float
    scaler_max: float

    def __post_init__(self):
        object.__setattr__(self, "generation", Generation.parse(self.generation))
        if not self.scaler_min <= self.scaler_max:
            raise ValueError("scaler_min must not exceed scaler_max")

    @property
    def vocab_size(self) -> int:
        return self.generation.vocab_size

    @property
    def d_token(self) -> int:
        return 1 + self.vocab_size + 2

    def to_dict(self) -> dict:
        return {
            "generation": self.generation.value,
            "scaler_min": self.scaler_min,
            "scaler_max": self.scaler_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(d["generation"], float(d["scaler_min"]), float(d["scaler_max"]))


def fit_scaler(dataset: TraceDataset) -> TokenizerConfig:
    if len(dataset) == 0:
        raise ValueError("cannot fit the scaler on an empty dataset")
    lo, hi = math.inf, -math.inf
    for s in dataset.streams:
        for dt in interarrivals(s):
            v = math.log1p(dt)
            lo = min(lo, v)
            hi = max(hi, v)
    return TokenizerConfig(dataset.generation, lo, hi)


def scale(t, cfg: TokenizerConfig):
    """Map seconds to [0, 1] through ``log(1+t)`` and min-max scaling."""
    span = cfg.scaler_max - cfg.scaler_min
    if span == 0:
        return np.zeros_like(t, dtype=np.float64) if isinstance(t, np.ndarray) else 0.0
    x = (np.log1p(t) - cfg.scaler_min) / span
    return np.clip(x, 0.0, 1.0) if isinstance(x, np.ndarray) else min(max(float(x), 0.0), 1.0)


def unscale(x, cfg: TokenizerConfig):
    span = cfg.scaler_max - cfg.scaler_min
    x = np.clip(x, 0.0, 1.0) if isinstance(x, np.ndarray) else min(max(float(x), 0.0), 1.0)
    t = np.expm1(x * span + cfg.scaler_min)
    # expm1 of a value just below zero can dip under 0 by rounding
    return np.maximum(t, 0.0) if isinstance(t, np.ndarray) else max(float(t), 0.0)


def encode_stream(stream: Stream, cfg: TokenizerConfig, for_training: bool = False) -> np.ndarray:
    """Token matrix of shape ``(len(stream), d_token)``.

    With ``for_training`` the stream must have at least two events, since a
    single-token stream gives no next-token target.
    """
    n = len(stream)
    if for_training and n < 2:
        raise TokenError(f"stream {stream.ue_id!r} has length 1 and cannot be used for training")
    V = cfg.vocab_size
    gaps = np.asarray(interarrivals(stream), dtype=np.float64)
    tok = np.zeros((n, cfg.d_token), dtype=np.float64)
    if cfg.scaler_max > cfg.scaler_min:
        raw = (np.log1p(gaps) - cfg.scaler_min) / (cfg.scaler_max - cfg.scaler_min)
        n_out = int(np.count_nonzero((raw > 1.0) | (raw < 0.0)))
        if n_out:
            log.warning("stream %s: %d interarrival(s) outside the fitted range were clamped", stream.ue_id, n_out)
        tok[:, 0] = np.clip(raw, 0.0, 1.0)
    tok[0, 0] = 0.0
    idx = [cfg.generation.index(e.event_type) for e in stream.events]
    tok[np.arange(n), 1 + np.asarray(idx)] = 1.0
    tok[:, 1 + V] = 1.0
    tok[-1, 1 + V] = 0.0
    tok[-1, 2 + V] = 1.0
    return tok


def count_clamped(stream: Stream, cfg: TokenizerConfig) -> int:
    if cfg.scaler_max == cfg.scaler_min:
        return 0
    v = np.log1p(np.asarray(interarrivals(stream)))
    return int(np.count_nonzero((v > cfg.scaler_max) | (v < cfg.scaler_min)))


def _check_onehot(block: np.ndarray, k: int, name: str) -> int:
    ones = np.flatnonzero(block == 1.0)
    zeros = np.count_nonzero(block == 0.0)
    if len(ones) != 1 or zeros != len(block) - 1:
        raise TokenError(f"token {k}: malformed one-hot {name} block {block.tolist()}")
    return int(ones[0])


def decode_stream(tokens: np.ndarray, cfg: TokenizerConfig, start_time: float = 0.0,
                  ue_id: str = "ue", device_type: str = "phone") -> Stream:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.d_token or len(tokens) == 0:
        raise TokenError(f"expected a non-empty (L, {cfg.d_token}) token matrix, got {tokens.shape}")
    V = cfg.vocab_size
    events = []
    t = float(start_time)
    for k, row in enumerate(tokens):
        x = row[0]
        if not (0.0 <= x <= 1.0):
            raise TokenError(f"token {k}: scaled interarrival {x} outside [0, 1]")
        e = _check_onehot(row[1:1 + V], k, "event type")
        _check_onehot(row[1 + V:], k, "stop flag")
        if k > 0:
            t += unscale(float(x), cfg)
        events.append(Event(t, cfg.generation.events[e]))
    return Stream(ue_id, device_type, tuple(events))
