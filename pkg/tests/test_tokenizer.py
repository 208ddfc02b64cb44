import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlsynth.tokenizer import (
    TokenError,
    TokenizerConfig,
    count_clamped,
    decode_stream,
    encode_stream,
    fit_scaler,
    scale,
    unscale,
)
from ctrlsynth.trace import TraceDataset

from conftest import stream


def test_fit_scaler_log_domain():
    ds = TraceDataset("4g", (stream([(0, "SRV_REQ"), (math.e - 1, "S1_CONN_REL")]),))
    cfg = fit_scaler(ds)
    assert cfg.scaler_min == 0.0
    assert cfg.scaler_max == pytest.approx(1.0, abs=1e-15)
    assert fit_scaler(ds) == cfg
    assert cfg.d_token == 9


def test_all_zero_gaps_give_degenerate_scaler():
    cfg = fit_scaler(TraceDataset("4g", (stream([(3, "HO"), (3, "TAU")]),)))
    assert cfg.scaler_min == cfg.scaler_max == 0.0
    assert scale(5.0, cfg) == 0.0
    assert unscale(0.7, cfg) == 0.0  # expm1(min)


def test_degenerate_scaler_unscale_is_expm1_min():
    cfg = TokenizerConfig("4g", 2.0, 2.0)
    assert unscale(0.3, cfg) == pytest.approx(math.expm1(2.0))


def test_scale_bounds():
    cfg = TokenizerConfig("4g", 0.0, math.log1p(100.0))
    assert scale(0.0, cfg) == 0.0
    assert scale(100.0, cfg) == pytest.approx(1.0)
    assert scale(1e9, cfg) == 1.0
    np.testing.assert_allclose(scale(np.array([0.0, 100.0]), cfg), [0.0, 1.0])


def test_encode_two_event_stream():
    cfg = TokenizerConfig("4g", 0.0, math.log1p(10.0))
    tok = encode_stream(stream([(0, "SRV_REQ"), (3.5, "S1_CONN_REL")]), cfg)
    assert tok.shape == (2, 9)
    assert tok[0, 0] == 0.0
    assert tok[0, 1:7].tolist() == [0, 0, 1, 0, 0, 0]
    assert tok[0, 7:].tolist() == [1, 0]
    assert tok[1, 0] == pytest.approx(math.log1p(3.5) / math.log1p(10.0))
    assert tok[1, 1:7].tolist() == [0, 0, 0, 1, 0, 0]
    assert tok[1, 7:].tolist() == [0, 1]


def test_first_token_gap_is_zero_even_with_offset_min():
    cfg = TokenizerConfig("4g", 1.0, 3.0)
    tok = encode_stream(stream([(0, "SRV_REQ"), (5, "S1_CONN_REL")]), cfg)
    assert tok[0, 0] == 0.0


def test_length_one_rejected_for_training():
    cfg = TokenizerConfig("4g", 0.0, 1.0)
    s = stream([(0, "HO")])
    with pytest.raises(TokenError):
        encode_stream(s, cfg, for_training=True)
    assert encode_stream(s, cfg).shape == (1, 9)


def test_out_of_range_clamped_with_warning(caplog):
    cfg = TokenizerConfig("4g", 0.0, math.log1p(10.0))
    s = stream([(0, "SRV_REQ"), (1000, "S1_CONN_REL")])
    with caplog.at_level(logging.WARNING):
        tok = encode_stream(s, cfg)
    assert tok[1, 0] == 1.0
    assert count_clamped(s, cfg) == 1
    assert "clamped" in caplog.text


def test_decode_names_bad_token():
    cfg = TokenizerConfig("4g", 0.0, 1.0)
    tok = encode_stream(stream([(0, "SRV_REQ"), (1, "S1_CONN_REL"), (2, "SRV_REQ")]), cfg)
    tok[2, 1:7] = 0.0
    with pytest.raises(TokenError, match="token 2"):
        decode_stream(tok, cfg)
    tok = encode_stream(stream([(0, "SRV_REQ"), (1, "S1_CONN_REL")]), cfg)
    tok[1, 7:] = 1.0
    with pytest.raises(TokenError, match="token 1.*stop"):
        decode_stream(tok, cfg)


_gap = st.floats(0, 5000, allow_nan=False)


@settings(max_examples=150, deadline=None)
@given(
    gaps=st.lists(_gap, min_size=2, max_size=20),
    evs=st.lists(st.sampled_from(["ATCH", "DTCH", "SRV_REQ", "S1_CONN_REL", "HO", "TAU"]), min_size=20, max_size=20),
    start=st.floats(0, 1e5),
)
def test_round_trip(gaps, evs, start):
    ts = np.cumsum([0.0] + gaps[1:])
    s = stream([(float(t), e) for t, e in zip(ts, evs)])
    cfg = fit_scaler(TraceDataset("4g", (s,)))
    tok = encode_stream(s, cfg)
    assert np.all(tok[:, 1:7].sum(1) == 1) and np.all(tok[:, 7:].sum(1) == 1)
    back = decode_stream(tok, cfg, start_time=start)
    assert back.event_types == s.event_types
    np.testing.assert_allclose(np.diff(back.timestamps), np.diff(s.timestamps), rtol=1e-9, atol=1e-9)
    assert back.timestamps[0] == start


@settings(max_examples=200, deadline=None)
@given(t=st.floats(1e-6, 1e6), lo=st.floats(0, 3), span=st.floats(0.5, 15))
def test_unscale_inverts_scale(t, lo, span):
    cfg = TokenizerConfig("4g", lo, lo + span)
    if not (math.expm1(lo) <= t <= math.expm1(lo + span)):
        return
    assert unscale(scale(t, cfg), cfg) == pytest.approx(t, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 1e6), b=st.floats(0, 1e6))
def test_scale_monotone(a, b):
    cfg = TokenizerConfig("4g", 0.0, math.log1p(1e4))
    lo, hi = sorted((a, b))
    assert scale(lo, cfg) <= scale(hi, cfg)


def test_encode_injective_on_event_types():
    cfg = TokenizerConfig("4g", 0.0, 1.0)
    seen = {}
    import itertools
    for evs in itertools.product(["SRV_REQ", "HO", "TAU"], repeat=3):
        tok = encode_stream(stream([(i, e) for i, e in enumerate(evs)]), cfg)
        key = tok[:, 1:7].tobytes()
        assert key not in seen
        seen[key] = evs
