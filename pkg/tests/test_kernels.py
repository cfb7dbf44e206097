"""The compiled kernels and the numpy fallback must agree bit for bit."""
import numpy as np
import pytest

from intactlab import _fallback, kernels

try:
    from intactlab import _kernels
except ImportError:  # pragma: no cover - pure-Python install
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "numpy")


@needs_ext
def test_matmul_bitwise_equal(rng):
    for shape in [(1, 1, 1), (5, 7, 3), (48, 64, 172), (3, 0, 4)]:
        n, k, m = shape
        a, b = rng.standard_normal((n, k)) * 1e3, rng.standard_normal((k, m))
        assert _kernels.matmul(a, b).tobytes() == _fallback.matmul(a, b).tobytes()


@needs_ext
@pytest.mark.parametrize("bits", [2, 3, 4, 8])
@pytest.mark.parametrize("symmetric", [False, True])
@pytest.mark.parametrize("group", [1, 5, 16, 128])
def test_quantize_bitwise_equal(rng, bits, symmetric, group):
    w = rng.standard_normal((7, 37)) * rng.uniform(0.01, 100)
    w[0, :] = 2.5  # constant row
    w[1, :] = 0.0
    ref = _fallback.quantize_groups(w, bits, group, symmetric)
    got = _kernels.quantize_groups(w, bits, group, symmetric)
    for a, b in zip(got, ref):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    codes, scales, zeros = ref
    assert (_kernels.dequantize_groups(codes, scales, zeros, group).tobytes()
            == _fallback.dequantize_groups(codes, scales, zeros, group).tobytes())


@needs_ext
def test_quantize_subnormal_bitwise_equal():
    w = np.array([[5e-324, 0.0, 1e-323, 2e-310], [-5e-324, 3e-320, 0.0, 0.0]])
    for sym in (False, True):
        for a, b in zip(_kernels.quantize_groups(w, 3, 2, sym), _fallback.quantize_groups(w, 3, 2, sym)):
            assert a.tobytes() == b.tobytes()
