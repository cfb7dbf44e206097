"""Dense float64 linear algebra, activations and matrix norms.

Matrices are 2-D ``numpy.float64`` arrays, vectors 1-D. Products go through
the deterministic kernel in :mod:`intactlab.kernels` so results are
bit-identical across runs and backends.
"""
import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


def as_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b):
    """Row-major, left-to-right accumulated product ``a @ b``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


def softmax_rows(m):
    """Row-wise softmax with max subtraction.

    The normalizer is a left-to-right running sum, so appending ``-inf``
    (masked) entries to a row never changes the bits of the other entries.
    """
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    total = np.add.accumulate(e, axis=-1)[..., -1:]
    return e / total


def silu(x):
    return x / (1.0 + np.exp(-x))


def spectral_norm(m, tol=1e-12, max_iter=10000):
    """Largest singular value by power iteration on ``mᵀm``.

    Starts from the all-ones vector so the result is deterministic. The zero
    matrix returns 0.
    """
    m = as_matrix(m)
    if not np.any(m):
        return 0.0
    gram = m.T @ m
    v = np.ones(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # all-ones start orthogonal to the row space; restart on a basis vector
            v = np.zeros_like(v)
            v[int(np.argmax(np.abs(gram).sum(axis=0)))] = 1.0
            continue
        new_lam = float(v @ w)
        v = w / nw
        if lam > 0.0 and abs(new_lam - lam) <= tol * abs(new_lam):
            lam = new_lam
            break
        lam = new_lam
    # Rayleigh quotient of the converged vector
    lam = float(v @ (gram @ v))
    return float(np.sqrt(max(lam, 0.0)))


def matrix_norm(m, kind):
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("norm of an empty matrix")
    if kind == "frobenius":
        return float(np.sqrt(np.sum(m * m)))
    if kind == "two_inf":
        return float(np.sqrt(np.sum(m * m, axis=1)).max())
    if kind == "spectral":
        return spectral_norm(m)
    raise ValueError(f"unknown norm kind {kind!r}")


def rmsnorm(x, gain, eps):
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: {x.shape[-1]} vs {gain.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x * inv)


def rope_angles(n, start_position, dim, theta_base):
    """Rotation angles, shape ``(n, dim // 2)``."""
    freqs = theta_base ** (-2.0 * np.arange(dim // 2) / dim)
    pos = np.arange(start_position, start_position + n, dtype=np.float64)
    return np.outer(pos, freqs)


def rope_apply(x, start_position, theta_base, inverse=False):
    """Rotate each (even, odd) channel pair of every row by its position angle.

    Row ``i`` sits at absolute position ``start_position + i``. ``inverse``
    applies the transpose rotation (used by the backward pass).
    """
    x = as_matrix(x)
    n, cols = x.shape
    if cols % 2:
        raise ShapeError(f"rotary embedding needs an even width, got {cols}")
    ang = rope_angles(n, start_position, cols, theta_base)
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out
