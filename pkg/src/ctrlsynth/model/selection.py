"""Checkpoint selection by fidelity rank sums."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ..fidelity import FidelityReport, full_report
from ..statemachine import StateMachineDef, build_state_machine
from ..trace import TraceDataset
from .checkpoint import Checkpoint


def ranking_metrics(report: FidelityReport) -> dict[str, Optional[float]]:
    """The scalar metrics used for ranking; lower is better for all of them."""
    m = {
        "event_violations": report.event_violation_rate,
        "stream_violations": report.stream_violation_rate,
    }
    m.update({f"sojourn_{k}": v for k, v in report.sojourn_ks.items()})
    m.update({f"flow_length_{k}": v for k, v in report.flow_length_ks.items()})
    m["breakdown_max_abs"] = max(abs(v) for v in report.breakdown_diff.values())
    return m


def rank_sums(metrics: Sequence[dict]) -> np.ndarray:
    """Sum over metrics of per-metric ranks (1 = best, ties share the lowest rank).

    A missing metric ranks last; a metric missing everywhere is skipped.
    """
    sums = np.zeros(len(metrics))
    for key in metrics[0]:
        vals = [m.get(key) for m in metrics]
        if all(v is None for v in vals):
            continue
        col = np.array([math.inf if v is None else v for v in vals], dtype=np.float64)
        sums += rankdata(col, method="min")
    return sums


def pick(epochs: Sequence[int], sums: Sequence[float], top_fraction: float = 0.2) -> int:
    """Index of the earliest checkpoint among the top fraction by rank sum."""
    n = len(sums)
    k = max(1, math.ceil(top_fraction * n))
    order = sorted(range(n), key=lambda i: (sums[i], epochs[i]))
    top = order[:k]
    return min(top, key=lambda i: (epochs[i], i))


def select_checkpoint(checkpoints: Sequence[Checkpoint], validation: TraceDataset,
                      n_samples: int = 1000, seed: int = 0, sm: Optional[StateMachineDef] = None,
                      top_fraction: float = 0.2):
    """Returns ``(best_checkpoint, rows)`` where each row holds one checkpoint's metrics."""
    from ..generator import generate_dataset

    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(checkpoints) == 1:
        return checkpoints[0], [{"epoch": checkpoints[0].epoch}]
    sm = sm or build_state_machine(validation.generation)
    metrics = []
    for ck in checkpoints:
        synth = generate_dataset(ck, n_samples, seed=seed)
        metrics.append(ranking_metrics(full_report(validation, synth, sm)))
    sums = rank_sums(metrics)
    epochs = [ck.epoch for ck in checkpoints]
    best = pick(epochs, sums, top_fraction)
    rows = [dict(m, epoch=e, rank_sum=float(s)) for m, e, s in zip(metrics, epochs, sums)]
    return checkpoints[best], rows
