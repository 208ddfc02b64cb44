"""Semi-Markov baseline generator (one model per device type).

The model is a Markov chain over the UE states of the state machine, where
each ``(state, event)`` edge carries an empirical holding-time sample set.
It doubles as a ground-truth source: a hand-authored model can be written
as a small JSON document (see :func:`model_from_spec`) and simulated.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .statemachine import StateMachineDef, UEState, build_state_machine, walk
from .trace import DEVICE_TYPES, Event, Generation, Stream, TraceDataset, interarrivals

log = logging.getLogger(__name__)

FORMAT_TAG = "ctrlsynth.smm"
FORMAT_VERSION = 1


@dataclass
class SemiMarkovModel:
    generation: Generation
    # state -> [(event, dest, prob)], restricted to legal edges
    transitions: dict
    # (state, event) -> sorted float64 array of holding times in seconds
    sojourns: dict
    # bootstrap event -> prob; the event fixes the initial state
    initial: dict
    stop_prob: float
    device_type: str = "phone"
    window: Optional[float] = None
    uniform_fallback: list = field(default_factory=list)

    def __post_init__(self):
        self.generation = Generation.parse(self.generation)
        for s, edges in self.transitions.items():
            total = math.fsum(p for _, _, p in edges)
            if edges and abs(total - 1.0) > 1e-9:
                raise ValueError(f"transition probabilities out of {s} sum to {total}")
        for key, arr in self.sojourns.items():
            if len(arr) and np.min(arr) < 0:
                raise ValueError(f"negative sojourn sample on edge {key}")
        if not 0.0 <= self.stop_prob <= 1.0:
            raise ValueError(f"stop probability must lie in [0, 1], got {self.stop_prob}")
        if self.initial and abs(math.fsum(self.initial.values()) - 1.0) > 1e-9:
            raise ValueError("initial distribution does not sum to 1")

    def edge_probability(self, state: UEState, event: str) -> float:
        for e, _, p in self.transitions.get(state, ()):
            if e == event:
                return p
        return 0.0

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "generation": self.generation.value,
            "device_type": self.device_type,
            "stop_prob": self.stop_prob,
            "window": self.window,
            "initial": dict(self.initial),
            "uniform_fallback": [str(s) for s in self.uniform_fallback],
            "states": {
                str(s): [
                    {
                        "event": e,
                        "dest": str(d),
                        "prob": p,
                        "sojourn": [float(x) for x in self.sojourns.get((s, e), ())],
                    }
                    for e, d, p in edges
                ]
                for s, edges in self.transitions.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SemiMarkovModel":
        if doc.get("format") != FORMAT_TAG:
            raise ValueError("not a fitted semi-Markov model document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        transitions, sojourns = {}, {}
        for s_txt, edges in doc["states"].items():
            s = UEState.parse(s_txt)
            transitions[s] = [(ed["event"], UEState.parse(ed["dest"]), float(ed["prob"])) for ed in edges]
            for ed in edges:
                sojourns[(s, ed["event"])] = np.sort(np.asarray(ed["sojourn"], dtype=np.float64))
        return cls(
            generation=doc["generation"],
            transitions=transitions,
            sojourns=sojourns,
            initial={k: float(v) for k, v in doc["initial"].items()},
            stop_prob=float(doc["stop_prob"]),
            device_type=doc.get("device_type", "phone"),
            window=doc.get("window"),
            uniform_fallback=[UEState.parse(s) for s in doc.get("uniform_fallback", [])],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    def describe(self) -> str:
        lines = [
            f"semi-Markov model ({self.generation.value}, {self.device_type})",
            f"  stop probability per step: {self.stop_prob:.6g}"
            + (f", window {self.window:g}s" if self.window else ""),
            "  initial events: "
            + ", ".join(f"{e}={p:.4f}" for e, p in self.initial.items() if p > 0),
        ]
        for s, edges in self.transitions.items():
            flag = "  [uniform fallback]" if s in self.uniform_fallback else ""
            lines.append(f"  {s}{flag}")
            for e, d, p in edges:
                arr = self.sojourns.get((s, e), np.empty(0))
                stats = (
                    f"n={len(arr)} median={np.median(arr):.4g}s" if len(arr) else "no samples"
                )
                lines.append(f"    --{e}--> {d}  p={p:.4f}  sojourn {stats}")
        return "\n".join(lines) + "\n"


def load_model(path) -> SemiMarkovModel:
    """Load either a fitted model document or a hand-authored spec."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") == FORMAT_TAG:
        return SemiMarkovModel.from_dict(doc)
    return model_from_spec(doc)


def fit_smm(dataset: TraceDataset, sm: StateMachineDef, device_type: Optional[str] = None) -> SemiMarkovModel:
    if len(dataset) == 0:
        raise ValueError("cannot fit a semi-Markov model on an empty dataset")
    if sm.generation is not dataset.generation:
        raise ValueError("state machine and dataset generations differ")
    counts: dict = defaultdict(Counter)
    samples: dict = defaultdict(list)
    initial: Counter = Counter()
    for s in dataset.streams:
        boot, steps = walk(s, sm)
        if boot is None:
            continue
        initial[s.events[boot[1]].event_type] += 1
        gaps = interarrivals(s)
        for st in steps:
            if st.dest is None:
                continue
            counts[st.source][st.event] += 1
            samples[(st.source, st.event)].append(gaps[st.index])

    transitions, sojourns, fallback = {}, {}, []
    for state in sm.states:
        edges = sm.outgoing(state)
        c = counts.get(state)
        total = sum(c.values()) if c else 0
        if total == 0:
            fallback.append(state)
            log.warning("state %s has no observed transitions; using uniform edges", state)
            transitions[state] = [(e, d, 1.0 / len(edges)) for e, d in edges]
        else:
            transitions[state] = [(e, d, c[e] / total) for e, d in edges if c[e] > 0]
        for e, _ in edges:
            if (state, e) in samples:
                sojourns[(state, e)] = np.sort(np.asarray(samples[(state, e)], dtype=np.float64))

    if not initial:
        raise ValueError("no stream contains a bootstrap event; nothing to fit")
    n_boot = sum(initial.values())
    mean_len = float(np.mean([len(s) for s in dataset.streams]))
    if device_type is None:
        device_type = Counter(s.device_type for s in dataset.streams).most_common(1)[0][0]
    return SemiMarkovModel(
        generation=dataset.generation,
        transitions=transitions,
        sojourns=sojourns,
        initial={e: initial[e] / n_boot for e in dataset.generation.events if initial[e]},
        stop_prob=1.0 / mean_len,
        device_type=device_type,
        uniform_fallback=fallback,
    )


def sample_ecdf(samples: np.ndarray, u: float) -> float:
    """Inverse of the empirical CDF of sorted ``samples`` at ``u`` in [0, 1)."""
    n = len(samples)
    return float(samples[min(int(u * n), n - 1)])


def stream_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def random_ue_id(rng: np.random.Generator) -> str:
    return rng.bytes(16).hex()


def _walk_stream(model: SemiMarkovModel, sm: StateMachineDef, rng, max_len: int, edge_cache: dict) -> Stream:
    ue_id = random_ue_id(rng)
    init_events = list(model.initial)
    init_p = np.array([model.initial[e] for e in init_events])
    first = init_events[int(rng.choice(len(init_events), p=init_p))]
    state = sm.bootstrap[first]
    t = 0.0
    events = [Event(0.0, first)]
    while len(events) < max_len:
        if rng.random() < model.stop_prob:
            break
        edges = edge_cache.get(state)
        if edges is None:
            edges = model.transitions.get(state, [])
            probs = np.cumsum([p for _, _, p in edges])
            edge_cache[state] = edges = (edges, probs)
        edge_list, cum = edges
        if not edge_list:
            break
        j = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(edge_list) - 1)
        e, dest, _ = edge_list[j]
        hold = model.sojourns.get((state, e))
        u = rng.random()
        dt = sample_ecdf(hold, u) if hold is not None and len(hold) else 0.0
        if model.window is not None and t + dt > model.window:
            break
        t += dt
        events.append(Event(t, e))
        state = dest
    return Stream(ue_id, model.device_type, tuple(events))


def generate_smm(model: SemiMarkovModel, n_streams: int, max_len: int, seed: int,
                 sm: Optional[StateMachineDef] = None) -> TraceDataset:
    """Random walks on ``model``; stream ``i`` depends only on ``(seed, i)``."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    sm = sm or build_state_machine(model.generation)
    cache: dict = {}
    streams = tuple(
        _walk_stream(model, sm, stream_rng(seed, i), max_len, cache) for i in range(n_streams)
    )
    return TraceDataset(model.generation, streams)


# -- hand-authored specs -------------------------------------------------------

SPEC_SCHEMA = {
    "type": "object",
    "required": ["generation", "initial", "states"],
    "properties": {
        "generation": {"type": "string"},
        "device_type": {"enum": list(DEVICE_TYPES)},
        "stop_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "window": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "samples_per_edge": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "initial": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "states": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "required": ["p", "sojourn"],
                    "properties": {
                        "p": {"type": "number", "minimum": 0},
                        "sojourn": {
                            "oneOf": [
                                {"type": "number", "minimum": 0},
                                {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                                {
                                    "type": "object",
                                    "required": ["lognormal"],
                                    "properties": {
                                        "lognormal": {
                                            "type": "object",
                                            "required": ["median", "sigma"],
                                            "properties": {
                                                "median": {"type": "number", "exclusiveMinimum": 0},
                                                "sigma": {"type": "number", "minimum": 0},
                                            },
                                        }
                                    },
                                },
                            ]
                        },
                    },
                },
            },
        },
    },
}


def model_from_spec(spec: dict) -> SemiMarkovModel:
    """Build a model from a hand-authored JSON spec.

    ``states`` maps a state name (``CONNECTED/SRV_REQ_S``) to outgoing
    events, each with a weight ``p`` (normalised per state) and a
    ``sojourn`` that is a constant, an explicit sample list, or
    ``{"lognormal": {"median": m, "sigma": s}}``.  Lognormal edges are
    expanded into ``samples_per_edge`` quantile points so the model stays
    purely empirical.  ``window`` optionally truncates every stream at a
    capture horizon in seconds.
    """
    import jsonschema

    jsonschema.validate(spec, SPEC_SCHEMA)
    g = Generation.parse(spec["generation"])
    sm = build_state_machine(g)
    n_samp = int(spec.get("samples_per_edge", 2000))
    transitions, sojourns = {}, {}
    for s_txt, edges in spec["states"].items():
        state = UEState.parse(s_txt)
        if state not in sm.states:
            raise ValueError(f"unknown {g.value} state {s_txt!r}")
        weights = {e: float(v["p"]) for e, v in edges.items()}
        total = math.fsum(weights.values())
        if total <= 0:
            raise ValueError(f"state {s_txt!r} has no positive edge weight")
        out = []
        for e, v in edges.items():
            dest = sm.next_state(state, e)
            if dest is None:
                raise ValueError(f"edge {s_txt} --{e}--> is not in the {g.value} transition table")
            if weights[e] > 0:
                out.append((e, dest, weights[e] / total))
            sojourns[(state, e)] = _expand_sojourn(v["sojourn"], n_samp)
        transitions[state] = out
    for s in sm.states:
        transitions.setdefault(s, [])
    init_total = math.fsum(spec["initial"].values())
    initial = {}
    for e, p in spec["initial"].items():
        if e not in sm.bootstrap:
            raise ValueError(f"initial event {e!r} is not a bootstrap event")
        if p > 0:
            initial[e] = p / init_total
    window = spec.get("window")
    return SemiMarkovModel(
        generation=g,
        transitions=transitions,
        sojourns=sojourns,
        initial=initial,
        stop_prob=float(spec.get("stop_prob", 0.0)),
        device_type=spec.get("device_type", "phone"),
        window=float(window) if window is not None else None,
    )


def _expand_sojourn(desc, n: int) -> np.ndarray:
    if isinstance(desc, (int, float)):
        return np.array([float(desc)])
    if isinstance(desc, list):
        return np.sort(np.asarray(desc, dtype=np.float64))
    from scipy.stats import norm

    ln = desc["lognormal"]
    q = (np.arange(n) + 0.5) / n
    return np.sort(float(ln["median"]) * np.exp(float(ln["sigma"]) * norm.ppf(q)))
