"""Numerical check of the attention-head error bound.

For one head ``h = softmax(q K^T / sqrt(d)) V W_O`` and cache perturbations
``dK, dV``::

    ||dh||_2 <= C1 ||dK||_{2,inf} ||dV||_F + C2 ||dK||_{2,inf} + C3 ||dV||_F

    C3 = ||W_O||_2,   C1 = n^{3/2} / sqrt(d) * C3 * ||q||_2,   C2 = C1 ||V||_2

``||.||_{2,inf}`` is the largest row Euclidean norm. Rows listed in a pivot
set can be exempted (their perturbation zeroed) to measure how much a
lossless prefix tightens the bound.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import ShapeError, as_matrix, matmul, matrix_norm, softmax_rows


@dataclass
class BoundInstance:
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    W_O: np.ndarray
    pivots: tuple = ()
    seed: int = None
    delta: float = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        for name in ("K", "V", "dK", "dV", "W_O"):
            setattr(self, name, as_matrix(getattr(self, name)))
        n, d = self.K.shape
        if self.q.size != d:
            raise ShapeError(f"query length {self.q.size} != head dim {d}")
        for name in ("V", "dK", "dV"):
            if getattr(self, name).shape != (n, d):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(n, d)}")
        if self.W_O.shape != (d, d):
            raise ShapeError(f"W_O has shape {self.W_O.shape}, expected {(d, d)}")
        self.pivots = tuple(sorted(set(int(p) for p in self.pivots)))
        if any(not 0 <= p < n for p in self.pivots):
            raise IndexError(f"pivot rows {self.pivots} outside [0, {n})")

    @property
    def n(self):
        return self.K.shape[0]

    @property
    def d(self):
        return self.K.shape[1]


@dataclass
class BoundReport:
    actual: float
    bound: float
    C1: float
    C2: float
    C3: float
    dK_2inf: float
    dV_fro: float
    V_spec: float
    q_norm: float
    n: int = 0
    d: int = 0
    seed: int = None
    delta: float = None
    terms: tuple = field(default=(0.0, 0.0, 0.0))

    @property
    def ratio(self):
        if self.bound == 0.0:
            return 0.0 if self.actual == 0.0 else float("inf")
        return self.actual / self.bound

    @property
    def holds(self):
        # one-ulp-scale slack for the rounding in ``actual`` itself
        return self.actual <= self.bound * (1 + 1e-12) + 1e-300


def attention_head(q, K, V, W_O):
    """Returns ``(h, scores)`` for a single query."""
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    K, V, W_O = as_matrix(K), as_matrix(V), as_matrix(W_O)
    if K.shape[1] != q.shape[1] or V.shape[0] != K.shape[0] or W_O.shape[0] != V.shape[1]:
        raise ShapeError(f"inconsistent shapes q{q.shape} K{K.shape} V{V.shape} W_O{W_O.shape}")
    s = softmax_rows(matmul(q, K.T) / np.sqrt(K.shape[1]))
    h = matmul(matmul(s, V), W_O)
    return h[0], s[0]


def head_error_bound(inst):
    h0, _ = attention_head(inst.q, inst.K, inst.V, inst.W_O)
    h1, _ = attention_head(inst.q, inst.K + inst.dK, inst.V + inst.dV, inst.W_O)
    actual = float(np.linalg.norm(h1 - h0))
    n, d = inst.n, inst.d
    c3 = matrix_norm(inst.W_O, "spectral")
    q_norm = float(np.linalg.norm(inst.q))
    v_spec = matrix_norm(inst.V, "spectral")
    c1 = n ** 1.5 / np.sqrt(d) * c3 * q_norm
    c2 = c1 * v_spec
    dk = matrix_norm(inst.dK, "two_inf")
    dv = matrix_norm(inst.dV, "frobenius")
    terms = (c1 * dk * dv, c2 * dk, c3 * dv)
    return BoundReport(actual, float(sum(terms)), c1, c2, c3, dk, dv, v_spec, q_norm,
                       n, d, inst.seed, inst.delta, terms)


def pivot_split_norms(dK, dV, pivots):
    """``(||dK_p||_{2,inf}, ||dK_rest||_{2,inf}, ||dV_p||_F, ||dV_rest||_F)``; empty parts are 0."""
    dK, dV = as_matrix(dK), as_matrix(dV)
    n = dK.shape[0]
    pivots = sorted(set(int(p) for p in pivots))
    if any(not 0 <= p < n for p in pivots):
        raise IndexError(f"pivot rows {pivots} outside [0, {n})")
    mask = np.zeros(n, dtype=bool)
    mask[pivots] = True
    row_k = np.sqrt(np.sum(dK * dK, axis=1))
    sq_v = np.sum(dV * dV, axis=1)
    part = lambda sel: (float(row_k[sel].max()) if sel.any() else 0.0,
                        float(np.sqrt(sq_v[sel].sum())) if sel.any() else 0.0)
    kp, vp = part(mask)
    kr, vr = part(~mask)
    return kp, kr, vp, vr


def exempt_pivots(inst, pivots=None):
    """Copy of ``inst`` with the pivot rows of ``dK`` and ``dV`` zeroed."""
    rows = list(inst.pivots if pivots is None else pivots)
    dK, dV = inst.dK.copy(), inst.dV.copy()
    dK[rows] = 0.0
    dV[rows] = 0.0
    return replace(inst, dK=dK, dV=dV)


def intactkv_bound_gap(inst):
    """``(bound_with, bound_without)``: exempting pivot rows never raises the bound."""
    if not inst.pivots:
        raise ValueError("intactkv_bound_gap needs a non-empty pivot set")
    without = head_error_bound(inst)
    with_ = head_error_bound(exempt_pivots(inst))
    return with_.bound, without.bound


def random_instance(n, d, delta, seed, pivot_count=1):
    """Entries uniform in [-1, 1]; perturbations scaled by ``delta``.

    Pivots are the first ``pivot_count`` rows (the prefix positions).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)
    q, K, V, W_O = u(d), u(n, d), u(n, d), u(d, d)
    dK, dV = delta * u(n, d), delta * u(n, d)
    return BoundInstance(q, K, V, dK, dV, W_O, tuple(range(min(pivot_count, n))), seed, delta)
