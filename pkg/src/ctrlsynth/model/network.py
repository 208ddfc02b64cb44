"""Decoder-only transformer over multi-modal tokens, with a hand-written backward pass.

Layout: linear token projection + learned positions, ``n_blocks`` pre-norm
blocks (causal multi-head attention, GELU feed-forward), a final layer
norm and three parallel two-layer heads (event logits, interarrival
parameters, stop logits).

Parameters live in a flat ``dict[str, ndarray]``; the dtype of the arrays
decides the arithmetic precision (float32 for training, float64 for the
finite-difference check).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ModelConfig

LN_EPS = 1e-5
HEADS = ("event", "arrival", "stop")
_GELU_C = math.sqrt(2.0 / math.pi)


def head_out_dim(cfg: ModelConfig, head: str) -> int:
    return {"event": cfg.vocab_size, "arrival": cfg.arrival_dim, "stop": 2}[head]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "in.w": (cfg.d_token, d),
        "in.b": (d,),
        "pos": (cfg.max_context, d),
    }
    for i in range(cfg.n_blocks):
        p = f"b{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wqkv": (d, 3 * d), p + "attn.bqkv": (3 * d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, h), p + "mlp.b1": (h,),
            p + "mlp.w2": (h, d), p + "mlp.b2": (d,),
        })
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    for name in HEADS:
        k = head_out_dim(cfg, name)
        shapes.update({
            f"head.{name}.w1": (d, cfg.head_hidden), f"head.{name}.b1": (cfg.head_hidden,),
            f"head.{name}.w2": (cfg.head_hidden, k), f"head.{name}.b2": (k,),
        })
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_blocks)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "bqkv", "bo"):
            arr = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# -- primitives ----------------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_bwd(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _linear_grads(x, dy, grads, wname, bname):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] = x2.T @ d2
    grads[bname] = d2.sum(0)


# -- forward / backward ------------------------------------------------------

@dataclass
class HeadOutputs:
    event_logits: np.ndarray  # (B, L, V)
    arrival: np.ndarray  # (B, L, 2) = (mu, sigma), or (B, L, 1) scalar
    stop_logits: np.ndarray  # (B, L, 2)
    arrival_raw: Optional[np.ndarray] = None  # pre-softplus head output

    @property
    def mu(self):
        return self.arrival[..., 0]

    @property
    def sigma(self):
        return self.arrival[..., 1] if self.arrival.shape[-1] == 2 else None


def causal_mask(L: int, dtype) -> np.ndarray:
    m = np.triu(np.ones((L, L), dtype=bool), 1)
    return np.where(m, -np.inf, 0.0).astype(dtype)


def _attention(a, params, p, cfg, mask):
    B, L, d = a.shape
    H, dh = cfg.n_heads, cfg.head_dim
    qkv = a @ params[p + "attn.wqkv"] + params[p + "attn.bqkv"]
    qkv = qkv.reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + mask
    s = s - s.max(-1, keepdims=True)
    pr = np.exp(s)
    pr /= pr.sum(-1, keepdims=True)
    o = (pr @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = o @ params[p + "attn.wo"] + params[p + "attn.bo"]
    return out, (a, q, k, v, pr, o)


def _attention_bwd(dout, params, p, cfg, cache, grads):
    a, q, k, v, pr, o = cache
    B, L, d = a.shape
    H, dh = cfg.n_heads, cfg.head_dim
    _linear_grads(o, dout, grads, p + "attn.wo", p + "attn.bo")
    do = (dout @ params[p + "attn.wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    dpr = do @ v.transpose(0, 1, 3, 2)
    dv = pr.transpose(0, 1, 3, 2) @ do
    ds = pr * (dpr - (dpr * pr).sum(-1, keepdims=True))
    ds *= 1.0 / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * d)
    _linear_grads(a, dqkv, grads, p + "attn.wqkv", p + "attn.bqkv")
    return dqkv @ params[p + "attn.wqkv"].T


def _head(hf, params, name):
    z = hf @ params[f"head.{name}.w1"] + params[f"head.{name}.b1"]
    act, t = _gelu(z)
    out = act @ params[f"head.{name}.w2"] + params[f"head.{name}.b2"]
    return out, (z, t, act)


def _head_bwd(dout, hf, params, name, cache, grads):
    z, t, act = cache
    _linear_grads(act, dout, grads, f"head.{name}.w2", f"head.{name}.b2")
    dz = _gelu_bwd(dout @ params[f"head.{name}.w2"].T, z, t)
    _linear_grads(hf, dz, grads, f"head.{name}.w1", f"head.{name}.b1")
    return dz @ params[f"head.{name}.w1"].T


def arrival_params(raw: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if not cfg.distribution_head:
        return raw
    return np.stack([raw[..., 0], softplus(raw[..., 1]) + cfg.sigma_floor], axis=-1)


def trunk(params, cfg: ModelConfig, tokens: np.ndarray, caches: Optional[list] = None):
    B, L, _ = tokens.shape
    if L > cfg.max_context:
        raise ValueError(f"sequence length {L} exceeds max_context={cfg.max_context}")
    dtype = params["in.w"].dtype
    x = tokens.astype(dtype, copy=False)
    mask = causal_mask(L, dtype)
    h = x @ params["in.w"] + params["in.b"] + params["pos"][:L]
    for i in range(cfg.n_blocks):
        p = f"b{i}."
        a, ln1 = _layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        att, acache = _attention(a, params, p, cfg, mask)
        h = h + att
        m, ln2 = _layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        z1 = m @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        act, t = _gelu(z1)
        h = h + act @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        if caches is not None:
            caches.append((ln1, acache, ln2, m, z1, t, act))
    hf, lnf = _layernorm(h, params["lnf.g"], params["lnf.b"])
    if caches is not None:
        caches.append((x, lnf))
    return hf


def forward(params, cfg: ModelConfig, tokens: np.ndarray, keep_cache: bool = False):
    """Head outputs for every position of ``tokens`` (shape ``(B, L, d_token)`` or ``(L, d_token)``).

    Returns ``HeadOutputs`` or, with ``keep_cache``, ``(HeadOutputs, cache)``.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    if tokens.shape[-1] != cfg.d_token:
        raise ValueError(f"tokens have width {tokens.shape[-1]}, model expects {cfg.d_token}")
    caches: Optional[list] = [] if keep_cache else None
    hf = trunk(params, cfg, tokens, caches)
    outs, hcaches = {}, {}
    for name in HEADS:
        outs[name], hcaches[name] = _head(hf, params, name)
    raw = outs["arrival"]
    res = HeadOutputs(outs["event"], arrival_params(raw, cfg), outs["stop"], raw)
    if squeeze:
        res = HeadOutputs(res.event_logits[0], res.arrival[0], res.stop_logits[0], raw[0])
    if keep_cache:
        if squeeze:
            raise ValueError("keep_cache requires batched (3-D) input")
        return res, (caches, hf, hcaches)
    return res


def backward(params, cfg: ModelConfig, cache, d_event, d_arrival_raw, d_stop) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. the raw head outputs."""
    caches, hf, hcaches = cache
    grads: dict[str, np.ndarray] = {}
    dhf = np.zeros_like(hf)
    for name, dout in (("event", d_event), ("arrival", d_arrival_raw), ("stop", d_stop)):
        dhf += _head_bwd(dout, hf, params, name, hcaches[name], grads)
    x, lnf = caches[-1]
    dh, grads["lnf.g"], grads["lnf.b"] = _layernorm_bwd(dhf, params["lnf.g"], lnf)
    for i in reversed(range(cfg.n_blocks)):
        p = f"b{i}."
        ln1, acache, ln2, m, z1, t, act = caches[i]
        _linear_grads(act, dh, grads, p + "mlp.w2", p + "mlp.b2")
        dz1 = _gelu_bwd(dh @ params[p + "mlp.w2"].T, z1, t)
        _linear_grads(m, dz1, grads, p + "mlp.w1", p + "mlp.b1")
        dm = dz1 @ params[p + "mlp.w1"].T
        dx, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_bwd(dm, params[p + "ln2.g"], ln2)
        dh = dh + dx
        da = _attention_bwd(dh, params, p, cfg, acache, grads)
        dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_bwd(da, params[p + "ln1.g"], ln1)
        dh = dh + dx
    L = x.shape[1]
    gpos = np.zeros_like(params["pos"])
    gpos[:L] = dh.sum(0)
    grads["pos"] = gpos
    _linear_grads(x, dh, grads, "in.w", "in.b")
    return grads


# -- incremental decoding -----------------------------------------------------

class DecodeState:
    """Key/value cache for step-by-step decoding of a batch of sequences."""

    def __init__(self, params, cfg: ModelConfig, batch: int):
        self.params = params
        self.cfg = cfg
        self.length = 0
        cap = min(64, cfg.max_context)
        dtype = params["in.w"].dtype
        shape = (batch, cfg.n_heads, cap, cfg.head_dim)
        self.k = [np.zeros(shape, dtype) for _ in range(cfg.n_blocks)]
        self.v = [np.zeros(shape, dtype) for _ in range(cfg.n_blocks)]

    def _grow(self):
        cap = self.k[0].shape[2]
        new = min(2 * cap, self.cfg.max_context)
        for lst in (self.k, self.v):
            for i, arr in enumerate(lst):
                big = np.zeros(arr.shape[:2] + (new,) + arr.shape[3:], arr.dtype)
                big[:, :, :cap] = arr
                lst[i] = big

    def select(self, keep: np.ndarray) -> None:
        """Drop finished sequences, keeping batch rows ``keep``."""
        self.k = [a[keep] for a in self.k]
        self.v = [a[keep] for a in self.v]

    def step(self, token: np.ndarray) -> HeadOutputs:
        """Feed one token per sequence (shape ``(B, d_token)``); outputs for that position."""
        cfg, params = self.cfg, self.params
        pos = self.length
        if pos >= cfg.max_context:
            raise ValueError("decode state is full")
        if pos >= self.k[0].shape[2]:
            self._grow()
        B = token.shape[0]
        H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        h = token.astype(params["in.w"].dtype) @ params["in.w"] + params["in.b"] + params["pos"][pos]
        for i in range(cfg.n_blocks):
            p = f"b{i}."
            a, _ = _layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
            qkv = (a @ params[p + "attn.wqkv"] + params[p + "attn.bqkv"]).reshape(B, 3, H, dh)
            self.k[i][:, :, pos] = qkv[:, 1]
            self.v[i][:, :, pos] = qkv[:, 2]
            kk = self.k[i][:, :, : pos + 1]
            vv = self.v[i][:, :, : pos + 1]
            s = np.einsum("bhd,bhld->bhl", qkv[:, 0], kk) * (1.0 / math.sqrt(dh))
            s = s - s.max(-1, keepdims=True)
            pr = np.exp(s)
            pr /= pr.sum(-1, keepdims=True)
            o = np.einsum("bhl,bhld->bhd", pr, vv).reshape(B, d)
            h = h + o @ params[p + "attn.wo"] + params[p + "attn.bo"]
            m, _ = _layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
            act, _ = _gelu(m @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
            h = h + act @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        hf, _ = _layernorm(h, params["lnf.g"], params["lnf.b"])
        outs = {name: _head(hf, params, name)[0] for name in HEADS}
        self.length += 1
        raw = outs["arrival"]
        return HeadOutputs(outs["event"], arrival_params(raw, cfg), outs["stop"], raw)
