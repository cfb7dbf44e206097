import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from intactlab import numcore
from intactlab.numcore import ShapeError


def naive_matmul(a, b):
    n, k = a.shape
    out = np.zeros((n, b.shape[1]))
    for i in range(n):
        for j in range(b.shape[1]):
            acc = 0.0
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity_and_small():
    m = np.array([[1.5, -2.0], [3.0, 0.25]])
    assert np.array_equal(numcore.matmul(np.eye(2), m), m)
    out = numcore.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out, [[2.0], [4.0]])


def test_matmul_matches_triple_loop_exactly(rng):
    for _ in range(20):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        assert np.array_equal(numcore.matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        numcore.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_bitwise_repeatable(rng):
    a, b = rng.standard_normal((17, 33)), rng.standard_normal((33, 9))
    assert numcore.matmul(a, b).tobytes() == numcore.matmul(a, b).tobytes()


def test_softmax_examples():
    s = numcore.softmax_rows(np.array([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]))
    assert np.allclose(s[0], 1 / 3, atol=1e-15)
    assert abs(s[1, 0] - 1.0) <= 1e-12 and s[1, 1] <= 1e-12
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(numcore.softmax_rows(x[None])[0] - direct)) <= 1e-14


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_are_distributions(m):
    s = numcore.softmax_rows(m)
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)


def test_norm_examples():
    eye = np.eye(3)
    assert numcore.matrix_norm(eye, "frobenius") == pytest.approx(np.sqrt(3), abs=1e-15)
    assert numcore.matrix_norm(eye, "spectral") == pytest.approx(1.0, abs=1e-12)
    assert numcore.matrix_norm(eye, "two_inf") == 1.0
    for kind in ("frobenius", "spectral", "two_inf"):
        assert numcore.matrix_norm(np.array([[3.0, 4.0]]), kind) == pytest.approx(5.0, rel=1e-12)
    assert numcore.matrix_norm(np.zeros((3, 2)), "spectral") == 0.0
    with pytest.raises(ValueError):
        numcore.matrix_norm(eye, "nuclear")


def test_spectral_matches_svd(rng):
    for _ in range(50):
        m = rng.standard_normal((6, 4))
        ref = np.linalg.svd(m, compute_uv=False)[0]
        assert abs(numcore.spectral_norm(m) - ref) <= 1e-8 * ref


def test_norm_orderings(rng):
    for _ in range(1000):
        m = rng.standard_normal(tuple(rng.integers(1, 7, 2)))
        fro = numcore.matrix_norm(m, "frobenius")
        assert numcore.matrix_norm(m, "two_inf") <= fro * (1 + 1e-12)
        assert numcore.matrix_norm(m, "spectral") <= fro * (1 + 1e-12)


def test_rmsnorm(rng):
    assert np.allclose(numcore.rmsnorm(np.ones(4), np.ones(4), 1e-300), 1.0)
    assert np.array_equal(numcore.rmsnorm(np.zeros(5), np.ones(5), 1e-6), np.zeros(5))
    x, g = rng.standard_normal(8), rng.standard_normal(8)
    direct = g * x / np.sqrt(np.mean(x ** 2) + 1e-6)
    assert np.max(np.abs(numcore.rmsnorm(x, g, 1e-6) - direct)) <= 1e-14
    with pytest.raises(ShapeError):
        numcore.rmsnorm(np.ones(4), np.ones(3), 1e-6)


def test_rope_examples(rng):
    x = rng.standard_normal((1, 8))
    assert np.array_equal(numcore.rope_apply(x, 0, 1e4), x)
    p, dim = 5, 4
    e = np.array([[0.0, 0.0, 1.0, 0.0]])
    f = 1e4 ** (-2 * 1 / dim)
    out = numcore.rope_apply(e, p, 1e4)
    assert np.allclose(out[0, 2:], [np.cos(p * f), np.sin(p * f)], atol=1e-15)
    with pytest.raises(ShapeError):
        numcore.rope_apply(np.ones((2, 3)), 0, 1e4)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.sampled_from([2, 4, 8, 16])),
              elements=st.floats(-100, 100)), st.integers(0, 500))
def test_rope_preserves_pair_norms_and_inverts(x, start):
    y = numcore.rope_apply(x, start, 1e4)
    pn = lambda a: np.hypot(a[:, 0::2], a[:, 1::2])
    assert np.all(np.abs(pn(y) - pn(x)) <= 1e-12 * (1 + pn(x)))
    assert np.allclose(numcore.rope_apply(y, start, 1e4, inverse=True), x, atol=1e-10)
