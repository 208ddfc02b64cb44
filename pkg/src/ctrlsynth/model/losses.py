from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import LossWeights, ModelConfig
from .network import HeadOutputs, sigmoid

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class Targets:
    """Next-token targets aligned with model positions; ``mask`` marks real positions."""

    event: np.ndarray  # (B, L) int
    x: np.ndarray  # (B, L) float, scaled interarrival
    stop: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) bool


class LossParts(NamedTuple):
    event: float
    arrival: float
    stop: float

    def total(self, w: LossWeights) -> float:
        return w.w_event * self.event + w.w_arrival * self.arrival + w.w_stop * self.stop


def targets_from_tokens(tokens: np.ndarray, mask: np.ndarray, vocab_size: int) -> Targets:
    """Targets for position k are the fields of token k+1 (``tokens`` already shifted)."""
    V = vocab_size
    return Targets(
        event=tokens[..., 1:1 + V].argmax(-1),
        x=tokens[..., 0],
        stop=tokens[..., 1 + V:].argmax(-1),
        mask=mask.astype(bool),
    )


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _ce(logits, target, mask, n):
    lsm = _log_softmax(logits)
    nll = -np.take_along_axis(lsm, target[..., None], -1)[..., 0]
    value = float((nll * mask).sum() / n)
    grad = np.exp(lsm)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1)
    grad *= (mask / n)[..., None]
    return value, grad


def gaussian_nll(x, mu, sigma):
    return HALF_LOG_2PI + np.log(sigma) + (x - mu) ** 2 / (2 * sigma**2)


def loss_and_grads(out: HeadOutputs, tgt: Targets, w: LossWeights, cfg: ModelConfig):
    """Mixed loss averaged over unmasked positions, plus gradients w.r.t. raw head outputs.

    Returns ``(total, parts, (d_event, d_arrival_raw, d_stop))``.
    """
    mask = tgt.mask.astype(out.event_logits.dtype)
    n = max(float(mask.sum()), 1.0)
    ce_e, d_event = _ce(out.event_logits, tgt.event, mask, n)
    ce_s, d_stop = _ce(out.stop_logits, tgt.stop, mask, n)
    x = tgt.x.astype(out.arrival.dtype)
    d_raw = np.zeros_like(out.arrival_raw)
    if cfg.distribution_head:
        mu, sigma = out.arrival[..., 0], out.arrival[..., 1]
        if np.any(sigma[tgt.mask] <= 0):
            raise FloatingPointError("non-positive predicted standard deviation")
        r = x - mu
        inv_var = 1.0 / (sigma * sigma)
        arr = float((gaussian_nll(x, mu, sigma) * mask).sum() / n)
        d_raw[..., 0] = -r * inv_var * mask / n
        dsig = (1.0 / sigma - r * r * inv_var / sigma) * mask / n
        d_raw[..., 1] = dsig * sigmoid(out.arrival_raw[..., 1])
    else:
        r = out.arrival[..., 0] - x
        arr = float((r * r * mask).sum() / n)
        d_raw[..., 0] = 2.0 * r * mask / n
    parts = LossParts(ce_e, arr, ce_s)
    return (
        parts.total(w),
        parts,
        (w.w_event * d_event, w.w_arrival * d_raw, w.w_stop * d_stop),
    )


def loss(out: HeadOutputs, tgt: Targets, w: LossWeights, cfg: ModelConfig) -> float:
    return loss_and_grads(out, tgt, w, cfg)[0]
