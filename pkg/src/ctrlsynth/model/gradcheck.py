"""Finite-difference check of the analytic gradients."""
from __future__ import annotations

import numpy as np

from .config import LossWeights, ModelConfig
from .losses import Targets, loss_and_grads
from .network import backward, forward


def analytic_grads(params, cfg: ModelConfig, tokens: np.ndarray, tgt: Targets, w: LossWeights):
    out, cache = forward(params, cfg, tokens, keep_cache=True)
    total, _, d = loss_and_grads(out, tgt, w, cfg)
    return total, backward(params, cfg, cache, *d)


def grad_check(params, cfg: ModelConfig, tokens: np.ndarray, tgt: Targets, w: LossWeights,
               step: float = 1e-4, floor: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 whatever the dtype of ``params``.  The relative error of
    one entry is ``|a - n| / max(|a| + |n|, floor)``.  The floor turns the
    test into an absolute one for tiny gradients: with a loss of order 10
    and ``step=1e-4`` a central difference carries roundoff near 1e-10, which
    is all the attention key bias ever shows since its true gradient is
    exactly zero (softmax ignores a per-query shift).  With the default
    floor such pure-noise entries stay near 1e-5 while any gradient above
    1e-5 is compared relatively.
    """
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    tokens = np.asarray(tokens, dtype=np.float64)
    _, ga = analytic_grads(p64, cfg, tokens, tgt, w)

    def f():
        out = forward(p64, cfg, tokens, keep_cache=True)[0]
        return loss_and_grads(out, tgt, w, cfg)[0]

    worst = 0.0
    for name, arr in p64.items():
        flat = arr.reshape(-1)
        g = ga[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * step)
            err = abs(g[i] - num) / max(abs(g[i]) + abs(num), floor)
            worst = max(worst, err)
    return float(worst)


def random_problem(cfg: ModelConfig, seed: int = 0, batch: int = 2, length: int = 6):
    """A small random ``(params, tokens, targets)`` problem for :func:`grad_check`.

    Parameters get N(0, 0.3) noise on top of the usual init so every path
    carries a non-trivial gradient; the last row is partly masked.
    """
    from .losses import targets_from_tokens
    from .network import init_params

    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed, np.float64)
    p = {k: v + rng.normal(0, 0.3, v.shape) for k, v in p.items()}
    V = cfg.vocab_size
    B, L = batch, length
    rows, cols = np.arange(B)[:, None], np.arange(L + 1)[None]
    tok = np.zeros((B, L + 1, cfg.d_token))
    tok[..., 0] = rng.random((B, L + 1))
    tok[rows, cols, 1 + rng.integers(0, V, (B, L + 1))] = 1.0
    tok[rows, cols, 1 + V + rng.integers(0, 2, (B, L + 1))] = 1.0
    mask = np.ones((B, L), bool)
    if B > 1:
        mask[-1, (2 * L) // 3:] = False
    return p, tok[:, :-1], targets_from_tokens(tok[:, 1:], mask, V)
