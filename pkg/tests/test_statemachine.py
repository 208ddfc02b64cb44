import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlsynth.statemachine import (
    CONNECTED,
    DEREGISTERED,
    IDLE,
    UEState,
    bootstrap_state,
    replay,
    report_label,
    validate_dataset,
)
from ctrlsynth.trace import Generation, TraceDataset

from conftest import stream

SRV = UEState(CONNECTED, "SRV_REQ_S")
HO_S = UEState(CONNECTED, "HO_S")
TAU_C = UEState(CONNECTED, "TAU_S_CONN")
REL1 = UEState(IDLE, "S1_REL_S_1")
REL2 = UEState(IDLE, "S1_REL_S_2")
TAU_I = UEState(IDLE, "TAU_S_IDLE")
DEREG = UEState(DEREGISTERED)

# Expected 4G table written out edge by edge, independent of the builder.
EXPECTED_4G = {
    (DEREG, "ATCH"): SRV,
    **{(s, "S1_CONN_REL"): REL1 for s in (SRV, HO_S, TAU_C)},
    **{(s, "DTCH"): DEREG for s in (SRV, HO_S, TAU_C, REL1, REL2, TAU_I)},
    **{(s, "HO"): HO_S for s in (SRV, HO_S, TAU_C)},
    **{(s, "TAU"): TAU_C for s in (SRV, HO_S, TAU_C)},
    **{(s, "SRV_REQ"): SRV for s in (REL1, REL2, TAU_I)},
    **{(s, "TAU"): TAU_I for s in (REL1, REL2, TAU_I)},
    (TAU_I, "S1_CONN_REL"): REL2,
}


def test_4g_table_matches_hand_written_edges(sm4):
    assert sm4.transitions == EXPECTED_4G


def test_4g_lookups(sm4):
    assert sm4.next_state(REL1, "SRV_REQ") == SRV
    assert sm4.next_state(REL1, "S1_CONN_REL") is None


def test_5g_has_no_tau_and_single_idle_substate(sm5):
    assert not any(e == "TAU" for (_, e) in sm5.transitions)
    idle = {s for s in sm5.states if s.top_level == IDLE}
    assert idle == {UEState(IDLE, "AN_REL_S")}
    assert sm5.next_state(UEState(CONNECTED, "HO_S"), "AN_REL") == UEState(IDLE, "AN_REL_S")
    assert sm5.next_state(DEREG, "REGISTER") == SRV


@pytest.mark.parametrize("events, expected", [
    (["TAU", "SRV_REQ", "HO"], (SRV, 1)),
    (["HO", "TAU"], (HO_S, 0)),
    (["TAU", "TAU"], None),
    (["S1_CONN_REL", "DTCH"], (DEREG, 1)),
    (["ATCH"], (SRV, 0)),
])
def test_bootstrap(sm4, events, expected):
    s = stream([(i, e) for i, e in enumerate(events)])
    assert bootstrap_state(s, sm4) == expected


def test_replay_clean_walk_with_sojourns(sm4):
    r = replay(stream([(0, "SRV_REQ"), (3.5, "S1_CONN_REL"), (10, "SRV_REQ")]), sm4)
    assert r.violating_event_count == 0
    assert r.sojourns == {CONNECTED: [3.5], IDLE: [6.5]}
    assert r.total_counted_events == 3


def test_replay_double_release(sm4):
    r = replay(stream([(0, "SRV_REQ"), (1, "S1_CONN_REL"), (2, "S1_CONN_REL")]), sm4)
    assert r.violating_event_count == 1
    assert dict(r.per_pair_violations) == {(REL1, "S1_CONN_REL"): 1}
    assert report_label(REL1) == "S1_REL_S"


def test_replay_double_service_request(sm4):
    r = replay(stream([(0, "SRV_REQ"), (1, "SRV_REQ")]), sm4)
    assert r.violating_event_count == 1
    assert dict(r.per_pair_violations) == {(SRV, "SRV_REQ"): 1}
    assert report_label(SRV) == CONNECTED


def test_violation_keeps_state(sm4):
    # the second SRV_REQ is ignored, so the release still leaves CONNECTED
    r = replay(stream([(0, "SRV_REQ"), (1, "SRV_REQ"), (4, "S1_CONN_REL"), (9, "SRV_REQ")]), sm4)
    assert r.violating_event_count == 1
    assert r.sojourns == {CONNECTED: [4.0], IDLE: [5.0]}


def test_self_loops_do_not_split_sojourns(sm4):
    # HO and TAU move between CONNECTED sub-states only
    r = replay(stream([(0, "SRV_REQ"), (1, "HO"), (2, "TAU"), (6, "S1_CONN_REL")]), sm4)
    assert r.sojourns[CONNECTED] == [6.0]
    # open interval at the end is dropped
    assert r.sojourns[IDLE] == []


def test_events_before_bootstrap_not_counted(sm4):
    r = replay(stream([(0, "TAU"), (1, "S1_CONN_REL"), (2, "SRV_REQ"), (3, "SRV_REQ")]), sm4)
    assert r.bootstrap_index == 2
    assert r.total_counted_events == 2
    assert r.violating_event_count == 1


def test_validate_dataset_arithmetic(sm4):
    # 4 streams, 100 counted events, one violation in one stream
    clean = [("SRV_REQ", "S1_CONN_REL")] * 12 + [("SRV_REQ",)]
    flat = [e for pair in clean for e in pair]  # 25 events
    streams = [stream([(i, e) for i, e in enumerate(flat)], f"u{k}") for k in range(3)]
    bad = flat[:24] + ["S1_CONN_REL"]  # second release in a row
    streams.append(stream([(i, e) for i, e in enumerate(bad)], "bad"))
    res = validate_dataset(TraceDataset("4g", tuple(streams)), sm4)
    assert res.event_violation_rate == pytest.approx(0.01)
    assert res.stream_violation_rate == pytest.approx(0.25)
    assert res.per_pair_breakdown == {("S1_REL_S", "S1_CONN_REL"): 1}


def test_validate_clean_and_empty(sm4):
    res = validate_dataset(TraceDataset("4g", (stream([(0, "SRV_REQ"), (1, "S1_CONN_REL")]),)), sm4)
    assert res == (0.0, 0.0, {})
    with pytest.raises(ValueError):
        validate_dataset(TraceDataset("4g", ()), sm4)


def test_format_table_lists_every_pair(sm4):
    text = sm4.format_table()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert len(lines) == len(sm4.states) * 6
    assert "IDLE/S1_REL_S_1, S1_CONN_REL -> VIOLATION" in lines
    assert "IDLE/S1_REL_S_1, SRV_REQ -> CONNECTED/SRV_REQ_S" in lines


def test_state_parse_round_trip(sm4):
    for s in sm4.states:
        assert UEState.parse(str(s)) == s


# -- properties ---------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(gen=st.sampled_from(["4g", "5g"]), seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_random_walk_on_table_has_no_violations(gen, seed, n):
    from ctrlsynth.statemachine import build_state_machine

    sm = build_state_machine(gen)
    rng = np.random.default_rng(seed)
    first = list(sm.bootstrap)[rng.integers(len(sm.bootstrap))]
    state = sm.bootstrap[first]
    evs = [first]
    for _ in range(n):
        edges = sm.outgoing(state)
        e, state = edges[rng.integers(len(edges))]
        evs.append(e)
    r = replay(stream([(float(i), e) for i, e in enumerate(evs)]), sm)
    assert r.violating_event_count == 0


@settings(max_examples=80, deadline=None)
@given(
    evs=st.lists(st.sampled_from(Generation.LTE.events), min_size=1, max_size=30),
    gaps=st.lists(st.floats(0, 100), min_size=30, max_size=30),
)
def test_violations_ignore_timestamps(sm4, evs, gaps):
    a = stream([(float(i), e) for i, e in enumerate(evs)])
    ts = np.cumsum(gaps[: len(evs)])
    b = stream([(float(t), e) for t, e in zip(ts, evs)])
    ra, rb = replay(a, sm4), replay(b, sm4)
    assert ra.violating_event_count == rb.violating_event_count
    assert ra.per_pair_violations == rb.per_pair_violations
    assert ra.violating_event_count <= ra.total_counted_events
