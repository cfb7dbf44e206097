import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from intactlab import recipes
from intactlab.model import forward
from intactlab.pivots import (attention_mass, detect_pivots, pivot_report,
                              token_activation_stats)

TOKENS = [0] + list(range(1, 32))


@pytest.fixture(scope="module")
def sink_trace(sink):
    return forward(sink, TOKENS)


@pytest.fixture(scope="module")
def null_trace(canonical):
    return forward(canonical, TOKENS)


def test_activation_stats_scan_oracle(sink_trace):
    for l in range(4):
        h = sink_trace.layer_outputs[l]
        scan = [max(abs(v) for v in row) for row in h]
        assert np.array_equal(token_activation_stats(sink_trace, l), scan)


def test_activation_stats_zero_hidden(null_trace):
    tr = replace(null_trace, layer_outputs=[np.zeros_like(h) for h in null_trace.layer_outputs])
    assert np.array_equal(token_activation_stats(tr, 0), np.zeros(len(TOKENS)))


def test_layer_index_errors(sink_trace):
    for fn in (token_activation_stats, attention_mass):
        with pytest.raises(IndexError):
            fn(sink_trace, 4)


def test_attention_mass_single_token(canonical):
    assert np.allclose(attention_mass(forward(canonical, [3]), 0), [1.0])


def test_attention_mass_stochastic(sink_trace, null_trace):
    for tr in (sink_trace, null_trace):
        for l in range(4):
            m = attention_mass(tr, l)
            assert np.all(m >= 0) and abs(m.sum() - 1) <= 1e-10


def test_sink_detection(sink_trace):
    acts = token_activation_stats(sink_trace, 3)
    assert acts[0] >= 10 * np.median(acts[1:])
    assert np.argmax(attention_mass(sink_trace, 3)) == 0
    assert detect_pivots(sink_trace, 10, 5) == [0]


def test_null_model_has_no_pivots(null_trace):
    assert 0 not in detect_pivots(null_trace, 10, 5)
    assert detect_pivots(null_trace) == []


def test_threshold_limit_flags_argmax(null_trace):
    eps = 1e-9
    flagged = detect_pivots(null_trace, 1 + eps, 1 + eps)
    assert int(np.argmax(token_activation_stats(null_trace, 3))) in flagged
    with pytest.raises(ValueError):
        detect_pivots(null_trace, 1.0, 5)


@settings(max_examples=60, deadline=None)
@given(st.floats(1.01, 50), st.floats(1.01, 50), st.floats(0, 20), st.floats(0, 20))
def test_detect_monotone_in_thresholds(a, m, da, dm):
    tr = forward(recipes.canonical_model(), TOKENS)
    assert set(detect_pivots(tr, a + da, m + dm)) <= set(detect_pivots(tr, a, m))


def test_report_rows(sink_trace):
    rep = pivot_report(sink_trace, TOKENS)
    rows = list(rep.rows())
    assert len(rows) == len(TOKENS)
    assert rows[0][:2] == (0, 0) and rows[0][4] == 1
    assert sum(r[4] for r in rows) == 1
    rep2 = pivot_report(sink_trace, TOKENS, layers=[0, 3])
    assert rep2.max_abs_activation.shape == (2, len(TOKENS))
