"""Teacher-forced training and fine-tuning."""
from __future__ import annotations

import logging
import math
import time
from typing import Callable, Optional

import numpy as np

from ..tokenizer import encode_stream
from ..trace import TraceDataset
from .checkpoint import Checkpoint
from .config import LossWeights, TrainConfig
from .losses import LossParts, loss_and_grads, targets_from_tokens
from .network import backward, forward
from .optim import AdamState, adam_update, clip_by_global_norm

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def prepare_sequences(dataset: TraceDataset, ckpt: Checkpoint) -> list[np.ndarray]:
    """Token matrices for training; drops length-1 streams and streams longer than the context."""
    cfg = ckpt.model_config
    out = []
    dropped_short = dropped_long = 0
    for s in dataset.streams:
        if len(s) < 2:
            dropped_short += 1
            continue
        if len(s) > cfg.max_context:
            dropped_long += 1
            continue
        out.append(encode_stream(s, ckpt.tokenizer_config, for_training=True).astype(np.float32))
    if dropped_short or dropped_long:
        log.info("dropped %d length-1 and %d over-length streams", dropped_short, dropped_long)
    return out


def make_batch(seqs: list[np.ndarray], vocab_size: int):
    """Inputs are tokens[:-1] and targets tokens[1:], right-padded to a common length."""
    L = max(len(s) for s in seqs) - 1
    d = seqs[0].shape[1]
    x = np.zeros((len(seqs), L, d), np.float32)
    y = np.zeros((len(seqs), L, d), np.float32)
    mask = np.zeros((len(seqs), L), bool)
    # padded target rows still need valid one-hots for argmax
    y[:, :, 1] = 1.0
    y[:, :, 1 + vocab_size] = 1.0
    for i, s in enumerate(seqs):
        n = len(s) - 1
        x[i, :n] = s[:-1]
        y[i, :n] = s[1:]
        mask[i, :n] = True
    return x, targets_from_tokens(y, mask, vocab_size)


def batch_order(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar-length sequences."""
    perm = rng.permutation(len(lengths))
    chunk = batch_size * 16
    batches = []
    for start in range(0, len(perm), chunk):
        part = perm[start:start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches += [part[i:i + batch_size] for i in range(0, len(part), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def dataset_loss(ckpt: Checkpoint, seqs: list[np.ndarray], weights: LossWeights,
                 batch_size: int = 64) -> tuple[float, LossParts]:
    """Token-weighted mean loss over ``seqs`` (no parameter update)."""
    cfg = ckpt.model_config
    order = np.argsort([len(s) for s in seqs], kind="stable")
    tot = np.zeros(3)
    n_tok = 0
    for i in range(0, len(order), batch_size):
        batch = [seqs[j] for j in order[i:i + batch_size]]
        x, tgt = make_batch(batch, cfg.vocab_size)
        out = forward(ckpt.params, cfg, x)
        _, parts, _ = loss_and_grads(out, tgt, weights, cfg)
        n = int(tgt.mask.sum())
        tot += np.array(parts) * n
        n_tok += n
    parts = LossParts(*(tot / max(n_tok, 1)))
    return parts.total(weights), parts


def _run(ckpt: Checkpoint, dataset: TraceDataset, tcfg: TrainConfig, validation: Optional[TraceDataset],
         callback: Optional[Callable[[int, dict], None]], stage: str) -> list[Checkpoint]:
    cfg = ckpt.model_config
    seqs = prepare_sequences(dataset, ckpt)
    if not seqs:
        raise TrainingError("no trainable streams (need length >= 2 and <= max_context)")
    val_seqs = prepare_sequences(validation, ckpt) if validation is not None else None
    lengths = np.array([len(s) for s in seqs])
    rng = np.random.default_rng(tcfg.seed)
    work = ckpt.copy()
    opt = work.optimizer if work.optimizer is not None else AdamState.zeros_like(work.params)
    start_epoch = ckpt.epoch
    history = list(ckpt.metadata.get("history", [])) if stage == "train" else []
    out = []
    total_steps = _total_steps(lengths, tcfg)
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        tot, n_tok = 0.0, 0
        for b, idx in enumerate(batch_order(lengths, tcfg.batch_size, rng)):
            x, tgt = make_batch([seqs[i] for i in idx], cfg.vocab_size)
            outputs, cache = forward(work.params, cfg, x, keep_cache=True)
            loss_value, _, d = loss_and_grads(outputs, tgt, tcfg.weights, cfg)
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at epoch {start_epoch + epoch}, batch {b}")
            grads = backward(work.params, cfg, cache, *d)
            clip_by_global_norm(grads, tcfg.grad_clip)
            adam_update(work.params, grads, opt, tcfg.lr_at(step, total_steps), tcfg.beta1, tcfg.beta2,
                        tcfg.eps, tcfg.weight_decay)
            step += 1
            n = int(tgt.mask.sum())
            tot += loss_value * n
            n_tok += n
        rec = {"epoch": start_epoch + epoch, "stage": stage, "train_loss": tot / n_tok}
        if val_seqs:
            rec["val_loss"] = dataset_loss(work, val_seqs, tcfg.weights)[0]
        history.append(rec)
        log.info("%s epoch %d (%.1fs): %s", stage, rec["epoch"], time.perf_counter() - t0,
                 ", ".join(f"{k}={v:.4f}" for k, v in rec.items() if isinstance(v, float)))
        if callback is not None:
            callback(epoch, rec)
        if epoch % tcfg.ckpt_every == 0:
            work.epoch = start_epoch + epoch
            work.optimizer = opt
            work.metadata = dict(work.metadata, history=list(history), stage=stage)
            out.append(work.copy())
    return out


def _total_steps(lengths: np.ndarray, tcfg: TrainConfig) -> int:
    # batch_order chunks before batching, so count batches per chunk
    chunk = tcfg.batch_size * 16
    n = len(lengths)
    per_epoch = sum(math.ceil(min(chunk, n - s) / tcfg.batch_size) for s in range(0, n, chunk))
    return per_epoch * tcfg.epochs


def train(ckpt: Checkpoint, dataset: TraceDataset, tcfg: TrainConfig,
          validation: Optional[TraceDataset] = None, callback=None) -> list[Checkpoint]:
    """Train from ``ckpt``; returns one checkpoint every ``ckpt_every`` epochs."""
    _check_compatible(ckpt, dataset)
    if tcfg.epochs == 0:
        return [ckpt]
    return _run(ckpt, dataset, tcfg, validation, callback, "train")


def finetune(ckpt: Checkpoint, dataset: TraceDataset, tcfg: TrainConfig,
             validation: Optional[TraceDataset] = None, callback=None) -> list[Checkpoint]:
    """Continue training ``ckpt`` on a new dataset with a fresh optimizer state."""
    _check_compatible(ckpt, dataset)
    if tcfg.epochs == 0:
        return [ckpt]
    start = ckpt.copy()
    start.optimizer = None
    start.metadata = dict(start.metadata, finetuned_from_epoch=ckpt.epoch)
    return _run(start, dataset, tcfg, validation, callback, "finetune")


def _check_compatible(ckpt: Checkpoint, dataset: TraceDataset) -> None:
    if ckpt.generation is not dataset.generation:
        raise ValueError(
            f"checkpoint is for {ckpt.generation.value} but the dataset is {dataset.generation.value}"
        )
    if ckpt.model_config.vocab_size != dataset.generation.vocab_size:
        raise ValueError("checkpoint event vocabulary does not match the dataset")
