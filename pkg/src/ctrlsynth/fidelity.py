"""Fidelity metrics between a reference trace and a synthesized trace."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .statemachine import CONNECTED, IDLE, SOJOURN_STATES, StateMachineDef, replay, validate_dataset
from .trace import TraceDataset, event_counts, interarrivals


class MetricError(ValueError):
    pass


def max_y_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic, evaluated at every sample point."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("max y-distance needs two non-empty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def per_ue_average_sojourns(dataset: TraceDataset, sm: StateMachineDef) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {CONNECTED: [], IDLE: []}
    for s in dataset.streams:
        r = replay(s, sm)
        for state in SOJOURN_STATES:
            d = r.sojourns[state]
            if d:
                out[state].append(math.fsum(d) / len(d))
    return out


def sojourn_distance(real: TraceDataset, synth: TraceDataset, sm: StateMachineDef) -> dict[str, Optional[float]]:
    """Per-state distance; ``None`` when either side has no completed sojourn."""
    if len(real) == 0 or len(synth) == 0:
        raise MetricError("sojourn distance needs two non-empty datasets")
    ra = per_ue_average_sojourns(real, sm)
    sa = per_ue_average_sojourns(synth, sm)
    return {
        st: (max_y_distance(ra[st], sa[st]) if ra[st] and sa[st] else None)
        for st in SOJOURN_STATES
    }


def flow_lengths(dataset: TraceDataset, key: str = "all") -> list[int]:
    if key == "all":
        return [len(s) for s in dataset.streams]
    return [sum(1 for e in s.events if e.event_type == key) for s in dataset.streams]


def flow_length_keys(dataset: TraceDataset) -> tuple[str, ...]:
    # 5G renames the connection release event
    release = "S1_CONN_REL" if "S1_CONN_REL" in dataset.generation.events else "AN_REL"
    return ("all", "SRV_REQ", release)


def flow_length_distance(real: TraceDataset, synth: TraceDataset) -> dict[str, float]:
    if len(real) == 0 or len(synth) == 0:
        raise MetricError("flow-length distance needs two non-empty datasets")
    return {
        k: max_y_distance(flow_lengths(real, k), flow_lengths(synth, k))
        for k in flow_length_keys(real)
    }


def event_shares(dataset: TraceDataset) -> dict[str, float]:
    c = event_counts(dataset.streams)
    total = sum(c.values())
    if total == 0:
        raise MetricError("dataset has no events")
    return {e: c.get(e, 0) / total for e in dataset.generation.events}


def breakdown_diff(real: TraceDataset, synth: TraceDataset) -> dict[str, float]:
    r = event_shares(real)
    s = event_shares(synth)
    return {e: s[e] - r[e] for e in real.generation.events}


# -- memorization -------------------------------------------------------------

def _ngrams(dataset: TraceDataset, n: int):
    """Yield (event-type tuple, interarrival window) for every intra-stream window."""
    for s in dataset.streams:
        if len(s) < n:
            continue
        types = s.event_types
        gaps = interarrivals(s)
        for k in range(len(s) - n + 1):
            yield tuple(types[k:k + n]), gaps[k:k + n]


class NgramIndex:
    """Real n-grams grouped by event-type sequence, sorted by first interarrival."""

    def __init__(self, real: TraceDataset, n: int):
        groups = defaultdict(list)
        for key, gaps in _ngrams(real, n):
            groups[key].append(gaps)
        self.n = n
        self.groups = {}
        for key, rows in groups.items():
            arr = np.asarray(rows, dtype=np.float64)
            arr = arr[np.argsort(arr[:, 0], kind="stable")]
            self.groups[key] = arr

    def repeats(self, key, gaps: np.ndarray, eps: float) -> bool:
        arr = self.groups.get(key)
        if arr is None:
            return False
        first = arr[:, 0]
        g0 = gaps[0]
        if g0 == 0.0:
            lo, hi = np.searchsorted(first, 0.0, "left"), np.searchsorted(first, 0.0, "right")
        else:
            # widened by a hair; the exact ratio test below decides
            lo = np.searchsorted(first, g0 / (1 + eps) * (1 - 1e-12), "left")
            hi = np.searchsorted(first, g0 / (1 - eps) * (1 + 1e-12), "right")
        if hi <= lo:
            return False
        cand = arr[lo:hi]
        return bool(np.any(np.all(_within(gaps[None, :], cand, eps), axis=1)))


def _within(gen: np.ndarray, real: np.ndarray, eps: float) -> np.ndarray:
    """Elementwise ``(1-eps) < gen/real < (1+eps)``; a zero matches only a zero."""
    zero = real == 0.0
    safe = np.where(zero, 1.0, real)
    ratio = gen / safe
    ok = (ratio > 1 - eps) & (ratio < 1 + eps)
    return np.where(zero, gen == 0.0, ok)


def memorization(real: TraceDataset, synth: TraceDataset, n: int, eps: float,
                 index: Optional[NgramIndex] = None) -> float:
    """Fraction of synthesized n-grams with at least one repeat in ``real``."""
    if n < 1:
        raise MetricError("n must be at least 1")
    if not 0.0 < eps < 1.0:
        raise MetricError("relative tolerance must lie in (0, 1)")
    index = index if index is not None and index.n == n else NgramIndex(real, n)
    total = hits = 0
    for key, gaps in _ngrams(synth, n):
        total += 1
        if index.repeats(key, np.asarray(gaps, dtype=np.float64), eps):
            hits += 1
    if total == 0:
        raise MetricError(f"synthesized dataset has no {n}-grams")
    return hits / total


# -- report -------------------------------------------------------------------

@dataclass
class FidelityReport:
    event_violation_rate: float
    stream_violation_rate: float
    sojourn_ks: dict  # state -> distance or None
    flow_length_ks: dict
    breakdown_diff: dict
    memorization: dict = field(default_factory=dict)  # "n=<n>,eps=<eps>" -> fraction
    violation_breakdown: dict = field(default_factory=dict)  # "label,event" -> count

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FidelityReport":
        import jsonschema

        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FidelityReport":
        return cls.from_dict(json.loads(text))

    def format_table(self) -> str:
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.3f}%"

        rows = [
            ("event violations", pct(self.event_violation_rate)),
            ("streams with violations", pct(self.stream_violation_rate)),
        ]
        rows += [(f"sojourn max-y ({k})", pct(v)) for k, v in self.sojourn_ks.items()]
        rows += [(f"flow length max-y ({k})", pct(v)) for k, v in self.flow_length_ks.items()]
        rows += [(f"breakdown diff {k}", f"{100 * v:+.3f}%") for k, v in self.breakdown_diff.items()]
        rows += [(f"memorization {k}", pct(v)) for k, v in self.memorization.items()]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows) + "\n"


_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_OPT_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["event_violation_rate", "stream_violation_rate", "sojourn_ks",
                 "flow_length_ks", "breakdown_diff", "memorization"],
    "additionalProperties": False,
    "properties": {
        "event_violation_rate": _RATE,
        "stream_violation_rate": _RATE,
        "sojourn_ks": {"type": "object", "additionalProperties": _OPT_RATE},
        "flow_length_ks": {"type": "object", "additionalProperties": _RATE},
        "breakdown_diff": {"type": "object",
                           "additionalProperties": {"type": "number", "minimum": -1, "maximum": 1}},
        "memorization": {"type": "object", "additionalProperties": _RATE},
        "violation_breakdown": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
    },
}


def memo_key(n: int, eps: float) -> str:
    return f"n={n},eps={eps:g}"


def full_report(real: TraceDataset, synth: TraceDataset, sm: StateMachineDef,
                memo: Iterable[tuple[int, float]] = ()) -> FidelityReport:
    if real.generation is not synth.generation:
        raise MetricError("real and synthesized datasets have different generations")
    metrics = {}
    for name, fn in (
        ("semantic violation", lambda: validate_dataset(synth, sm)),
        ("sojourn time", lambda: sojourn_distance(real, synth, sm)),
        ("flow length", lambda: flow_length_distance(real, synth)),
        ("event breakdown", lambda: breakdown_diff(real, synth)),
    ):
        try:
            metrics[name] = fn()
        except ValueError as exc:
            raise MetricError(f"{name}: {exc}") from exc
    mem = {}
    for n, eps in memo:
        try:
            mem[memo_key(n, eps)] = memorization(real, synth, n, eps)
        except ValueError as exc:
            raise MetricError(f"memorization (n={n}, eps={eps}): {exc}") from exc
    viol = metrics["semantic violation"]
    return FidelityReport(
        event_violation_rate=viol.event_violation_rate,
        stream_violation_rate=viol.stream_violation_rate,
        sojourn_ks=metrics["sojourn time"],
        flow_length_ks=metrics["flow length"],
        breakdown_diff=metrics["event breakdown"],
        memorization=mem,
        violation_breakdown={f"{lab},{e}": c for (lab, e), c in sorted(viol.per_pair_breakdown.items())},
    )
