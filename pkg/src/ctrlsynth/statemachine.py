"""Two-level UE state machines (4G and 5G) and trace replay.

States are ``(top_level, sub_state)`` pairs.  Replaying a stream fixes the
initial state at the first event whose destination does not depend on the
source state, then walks the transition table.  An event with no entry in
the table is a violation: it is counted and the machine stays put.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

from .trace import Generation, Stream, TraceDataset

DEREGISTERED = "DEREGISTERED"
CONNECTED = "CONNECTED"
IDLE = "IDLE"
TOP_LEVEL = (DEREGISTERED, CONNECTED, IDLE)
SOJOURN_STATES = (CONNECTED, IDLE)

SUB_STATES = {
    Generation.LTE: {
        CONNECTED: ("SRV_REQ_S", "HO_S", "TAU_S_CONN"),
        IDLE: ("S1_REL_S_1", "S1_REL_S_2", "TAU_S_IDLE"),
    },
    Generation.NR: {
        CONNECTED: ("SRV_REQ_S", "HO_S"),
        IDLE: ("AN_REL_S",),
    },
}


class UEState(NamedTuple):
    top_level: str
    sub_state: Optional[str] = None

    def __str__(self) -> str:
        return self.top_level if self.sub_state is None else f"{self.top_level}/{self.sub_state}"

    @classmethod
    def parse(cls, text: str) -> "UEState":
        top, _, sub = text.partition("/")
        return cls(top, sub or None)


def _check_state(state: UEState, generation: Generation) -> None:
    if state.top_level == DEREGISTERED:
        if state.sub_state is not None:
            raise ValueError(f"{DEREGISTERED} has no sub-state, got {state}")
        return
    subs = SUB_STATES[generation].get(state.top_level)
    if subs is None or state.sub_state not in subs:
        raise ValueError(f"invalid {generation.value} UE state {state}")


def all_states(generation: Generation) -> list[UEState]:
    out = [UEState(DEREGISTERED)]
    for top in (CONNECTED, IDLE):
        out += [UEState(top, s) for s in SUB_STATES[generation][top]]
    return out


def report_label(state: UEState) -> str:
    """Label used when aggregating violations for reporting.

    Connected sub-states collapse to CONNECTED and the two S1 release
    sub-states to S1_REL_S; other states keep their own name.
    """
    if state.top_level == CONNECTED:
        return CONNECTED
    if state.sub_state in ("S1_REL_S_1", "S1_REL_S_2"):
        return "S1_REL_S"
    return state.sub_state or state.top_level


@dataclass(frozen=True)
class StateMachineDef:
    generation: Generation
    transitions: dict  # (UEState, event) -> UEState
    bootstrap: dict  # event -> destination UEState

    def next_state(self, state: UEState, event: str) -> Optional[UEState]:
        return self.transitions.get((state, event))

    def outgoing(self, state: UEState) -> list[tuple[str, UEState]]:
        """Legal ``(event, destination)`` edges leaving ``state`` in vocabulary order."""
        out = []
        for e in self.generation.events:
            d = self.transitions.get((state, e))
            if d is not None:
                out.append((e, d))
        return out

    @property
    def states(self) -> list[UEState]:
        return all_states(self.generation)

    def format_table(self) -> str:
        lines = [f"# {self.generation.value} transition table: state, event -> state|VIOLATION"]
        for s in self.states:
            for e in self.generation.events:
                d = self.transitions.get((s, e))
                lines.append(f"{s}, {e} -> {d if d is not None else 'VIOLATION'}")
        return "\n".join(lines) + "\n"


def build_state_machine(generation: "str | Generation") -> StateMachineDef:
    g = Generation.parse(generation)
    if g is Generation.LTE:
        attach, detach, release = "ATCH", "DTCH", "S1_CONN_REL"
    else:
        attach, detach, release = "REGISTER", "DEREGISTER", "AN_REL"
    conn = {s: UEState(CONNECTED, s) for s in SUB_STATES[g][CONNECTED]}
    idle = {s: UEState(IDLE, s) for s in SUB_STATES[g][IDLE]}
    dereg = UEState(DEREGISTERED)
    srv = conn["SRV_REQ_S"]
    first_idle = idle["S1_REL_S_1"] if g is Generation.LTE else idle["AN_REL_S"]

    t: dict = {(dereg, attach): srv}
    for s in conn.values():
        t[(s, release)] = first_idle
        t[(s, detach)] = dereg
        t[(s, "HO")] = conn["HO_S"]
    for s in idle.values():
        t[(s, "SRV_REQ")] = srv
        t[(s, detach)] = dereg
    if g is Generation.LTE:
        for s in conn.values():
            t[(s, "TAU")] = conn["TAU_S_CONN"]
        for s in idle.values():
            t[(s, "TAU")] = idle["TAU_S_IDLE"]
        t[(idle["TAU_S_IDLE"], release)] = idle["S1_REL_S_2"]

    for (s, e), d in t.items():
        _check_state(s, g)
        _check_state(d, g)
        g.index(e)

    bootstrap = {attach: srv, detach: dereg, "SRV_REQ": srv, "HO": conn["HO_S"]}
    return StateMachineDef(g, t, bootstrap)


def bootstrap_state(stream: Stream, sm: StateMachineDef) -> Optional[tuple[UEState, int]]:
    for k, ev in enumerate(stream.events):
        dest = sm.bootstrap.get(ev.event_type)
        if dest is not None:
            return dest, k
    return None


class Step(NamedTuple):
    index: int
    source: UEState
    event: str
    dest: Optional[UEState]  # None marks a violation


def walk(stream: Stream, sm: StateMachineDef) -> tuple[Optional[tuple[UEState, int]], Iterator[Step]]:
    """Bootstrap ``stream`` and iterate over the steps after the bootstrap event."""
    boot = bootstrap_state(stream, sm)

    def steps():
        if boot is None:
            return
        state, b = boot
        evs = stream.events
        for k in range(b + 1, len(evs)):
            e = evs[k].event_type
            d = sm.transitions.get((state, e))
            yield Step(k, state, e, d)
            if d is not None:
                state = d

    return boot, steps()


@dataclass
class ReplayResult:
    bootstrap_index: Optional[int]
    violating_event_count: int = 0
    total_counted_events: int = 0
    per_pair_violations: Counter = field(default_factory=Counter)
    sojourns: dict = field(default_factory=lambda: {CONNECTED: [], IDLE: []})


def replay(stream: Stream, sm: StateMachineDef) -> ReplayResult:
    boot, steps = walk(stream, sm)
    if boot is None:
        return ReplayResult(None)
    state, b = boot
    res = ReplayResult(b, total_counted_events=len(stream) - b)
    ts = stream.events
    entered_at = ts[b].timestamp
    for step in steps:
        if step.dest is None:
            res.violating_event_count += 1
            res.per_pair_violations[(step.source, step.event)] += 1
            continue
        if step.dest.top_level != state.top_level:
            if state.top_level in res.sojourns:
                res.sojourns[state.top_level].append(ts[step.index].timestamp - entered_at)
            entered_at = ts[step.index].timestamp
        state = step.dest
    return res


class ViolationSummary(NamedTuple):
    event_violation_rate: float
    stream_violation_rate: float
    per_pair_breakdown: dict  # (report label, event) -> count


def validate_dataset(dataset: TraceDataset, sm: StateMachineDef) -> ViolationSummary:
    if len(dataset) == 0:
        raise ValueError("cannot validate an empty dataset")
    violating = counted = bad_streams = 0
    breakdown: Counter = Counter()
    for s in dataset.streams:
        r = replay(s, sm)
        violating += r.violating_event_count
        counted += r.total_counted_events
        if r.violating_event_count:
            bad_streams += 1
        for (state, e), c in r.per_pair_violations.items():
            breakdown[(report_label(state), e)] += c
    rate = violating / counted if counted else 0.0
    return ViolationSummary(rate, bad_streams / len(dataset), dict(breakdown))
