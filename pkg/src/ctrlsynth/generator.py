"""Autoregressive stream synthesis from a trained checkpoint.

Each stream owns a random generator seeded from ``(seed, index)``.  Streams
are decoded in batches that share a key/value cache, but every random
draw comes from the stream's own generator, so a stream's content does not
depend on which other streams are generated with it (up to float32
round-off in the batched arithmetic).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model.checkpoint import Checkpoint
from .model.network import DecodeState
from .smm import random_ue_id
from .tokenizer import unscale
from .trace import Event, Stream, TraceDataset


def _softmax(z: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(-1, keepdims=True)


def _draw(p: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right")), len(p) - 1)


def _rngs(seeds: Sequence) -> list[np.random.Generator]:
    return [np.random.default_rng(np.random.SeedSequence(s)) for s in seeds]


def generate_batch(ckpt: Checkpoint, seeds: Sequence, device_type: Optional[str] = None,
                   temperature: float = 1.0, max_len: Optional[int] = None) -> list[Stream]:
    """One stream per entry of ``seeds`` (an int or a tuple of ints each)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cfg = ckpt.model_config
    tok_cfg = ckpt.tokenizer_config
    V = cfg.vocab_size
    limit = min(max_len or cfg.max_context, cfg.max_context)
    device_type = device_type or ckpt.device_type
    init_events = [e for e in tok_cfg.generation.events]
    init_p = np.array([ckpt.initial_distribution.get(e, 0.0) for e in init_events], dtype=np.float64)
    if init_p.sum() <= 0:
        raise ValueError("checkpoint has an empty initial-event distribution")

    rngs = _rngs(seeds)
    n = len(rngs)
    ue_ids = [random_ue_id(r) for r in rngs]
    ev_idx = [[_draw(init_p, r.random())] for r in rngs]
    gaps: list[list[float]] = [[0.0] for _ in range(n)]

    active = np.arange(n)
    state = DecodeState(ckpt.params, cfg, n)
    token = np.zeros((n, cfg.d_token), np.float32)
    token[np.arange(n), 1 + np.array([e[0] for e in ev_idx])] = 1.0
    token[:, 1 + V] = 1.0
    while len(active) and state.length < limit:
        if state.length + 1 >= limit:
            break
        out = state.step(token)
        p_ev = _softmax(out.event_logits, temperature)
        p_stop = _softmax(out.stop_logits, temperature)
        arr = np.asarray(out.arrival, dtype=np.float64)
        nxt = np.zeros((len(active), cfg.d_token), np.float32)
        keep = []
        for row, i in enumerate(active):
            r = rngs[i]
            e = _draw(p_ev[row], r.random())
            if cfg.distribution_head:
                x = arr[row, 0] + arr[row, 1] * r.standard_normal()
            else:
                x = arr[row, 0]
            x = min(max(float(x), 0.0), 1.0)
            stop = _draw(p_stop[row], r.random())
            ev_idx[i].append(e)
            gaps[i].append(x)
            nxt[row, 0] = x
            nxt[row, 1 + e] = 1.0
            nxt[row, 1 + V + stop] = 1.0
            if stop == 0:
                keep.append(row)
        keep = np.asarray(keep, dtype=int)
        if len(keep) < len(active):
            state.select(keep)
            active = active[keep]
            nxt = nxt[keep]
        token = nxt

    events_vocab = tok_cfg.generation.events
    streams = []
    for i in range(n):
        t = 0.0
        evs = [Event(0.0, events_vocab[ev_idx[i][0]])]
        for x, e in zip(gaps[i][1:], ev_idx[i][1:]):
            t += unscale(x, tok_cfg)
            evs.append(Event(t, events_vocab[e]))
        streams.append(Stream(ue_ids[i], device_type, tuple(evs)))
    return streams


def generate_stream(ckpt: Checkpoint, seed, device_type: Optional[str] = None,
                    temperature: float = 1.0) -> Stream:
    return generate_batch(ckpt, [seed], device_type, temperature)[0]


def generate_dataset(ckpt: Checkpoint, n_streams: int, device_type: Optional[str] = None,
                     seed: int = 0, temperature: float = 1.0, batch_size: int = 256) -> TraceDataset:
    if n_streams < 1:
        raise ValueError("n_streams must be at least 1")
    streams: list[Stream] = []
    for start in range(0, n_streams, batch_size):
        seeds = [(int(seed), i) for i in range(start, min(start + batch_size, n_streams))]
        streams += generate_batch(ckpt, seeds, device_type, temperature)
    return TraceDataset(ckpt.generation, tuple(streams))
