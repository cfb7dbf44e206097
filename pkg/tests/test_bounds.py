import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from intactlab.bounds import (BoundInstance, attention_head, exempt_pivots, intactkv_bound_gap,
                              pivot_split_norms, random_instance, head_error_bound)
from intactlab.numcore import ShapeError, matmul, softmax_rows


def test_head_single_row(rng):
    q, K, V, W = rng.standard_normal(4), rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), rng.standard_normal((4, 4))
    h, s = attention_head(q, K, V, W)
    assert np.array_equal(s, [1.0])
    assert np.array_equal(h, matmul(V, W)[0])


def test_head_zero_keys(rng):
    V, W = rng.standard_normal((5, 3)), rng.standard_normal((3, 3))
    h, s = attention_head(rng.standard_normal(3), np.zeros((5, 3)), V, W)
    assert np.allclose(s, 0.2, atol=1e-16)
    assert np.allclose(h, V.mean(axis=0) @ W, atol=1e-14)


def test_head_composition_oracle(rng):
    q, K, V, W = rng.standard_normal(4), rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), rng.standard_normal((4, 4))
    s = softmax_rows((q @ K.T / 2.0)[None])[0]
    h, _ = attention_head(q, K, V, W)
    assert np.max(np.abs(h - (s @ V) @ W)) <= 1e-14
    with pytest.raises(ShapeError):
        attention_head(q, K[:, :3], V, W)


def test_instance_validation(rng):
    inst = random_instance(4, 2, 0.1, 0)
    with pytest.raises(ShapeError):
        replace(inst, dK=np.zeros((3, 2)))
    with pytest.raises(IndexError):
        replace(inst, pivots=(4,))


def test_zero_perturbation():
    inst = random_instance(5, 3, 0.0, 1)
    rep = head_error_bound(inst)
    assert rep.actual == 0.0 and rep.bound == 0.0 and rep.ratio == 0.0 and rep.holds


def test_dv_linear_term_doubles():
    inst = random_instance(6, 4, 0.1, 2)
    inst = replace(inst, dK=np.zeros_like(inst.dK))
    a = head_error_bound(inst).bound
    b = head_error_bound(replace(inst, dV=2 * inst.dV)).bound
    assert b == pytest.approx(2 * a, rel=1e-14)


def test_constants():
    inst = random_instance(8, 4, 0.1, 3)
    rep = head_error_bound(inst)
    c3 = np.linalg.svd(inst.W_O, compute_uv=False)[0]
    assert rep.C3 == pytest.approx(c3, rel=1e-8)
    assert rep.C1 == pytest.approx(8 ** 1.5 / 2 * rep.C3 * np.linalg.norm(inst.q), rel=1e-14)
    assert rep.C2 == pytest.approx(rep.C1 * np.linalg.svd(inst.V, compute_uv=False)[0], rel=1e-8)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8), st.sampled_from([0.001, 0.01, 0.1, 1.0]),
       st.integers(0, 2 ** 31))
def test_dominance(n, d, delta, seed):
    assert head_error_bound(random_instance(n, d, delta, seed)).holds


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2 ** 31), st.data())
def test_split_identities(n, d, seed, data):
    rng = np.random.default_rng(seed)
    dK, dV = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    p = data.draw(st.sets(st.integers(0, n - 1)))
    kp, kr, vp, vr = pivot_split_norms(dK, dV, p)
    assert max(kp, kr) == np.sqrt((dK * dK).sum(axis=1)).max()
    assert abs(np.hypot(vp, vr) - np.linalg.norm(dV)) <= 1e-12 * (1 + np.linalg.norm(dV))


def test_split_all_rows(rng):
    dK, dV = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    kp, kr, vp, vr = pivot_split_norms(dK, dV, range(4))
    assert kr == 0.0 and vr == 0.0
    with pytest.raises(IndexError):
        pivot_split_norms(dK, dV, [4])


def test_gap_concentrated_on_pivots(rng):
    inst = random_instance(6, 4, 0.5, 9, pivot_count=2)
    dK, dV = np.zeros_like(inst.dK), np.zeros_like(inst.dV)
    dK[:2], dV[:2] = inst.dK[:2], inst.dV[:2]
    with_, without = intactkv_bound_gap(replace(inst, dK=dK, dV=dV))
    assert with_ == 0.0 and without > 0
    with pytest.raises(ValueError):
        intactkv_bound_gap(replace(inst, pivots=()))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 16), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_nested_pivot_sets_never_raise_bound(n, d, seed):
    inst = random_instance(n, d, 0.1, seed)
    bounds = [head_error_bound(exempt_pivots(inst, range(k))).bound for k in range(n + 1)]
    assert all(b <= a for a, b in zip(bounds, bounds[1:]))
    with_, without = intactkv_bound_gap(inst)
    assert with_ <= without
