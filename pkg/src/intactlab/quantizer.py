"""Uniform b-bit group-wise quantization of weights and KV caches.

Asymmetric mode maps each group onto ``{0, ..., 2**bits - 1}`` with a scale
and an integer zero point::

    s = (max - min) / (2**bits - 1)      # range widened to include 0
    z = round(-min / s)
    code = clamp(round(w / s) + z, 0, 2**bits - 1)
    w_hat = s * (code - z)

Rounding is half-away-from-zero. Scales are truncated to 44 significant
bits, which makes ``s * k`` exact for every integer ``|k| < 2**9``. Rounding
down also means the group's extremes always reach codes 0 and ``2**bits - 1``
(an exact tie at the top is clamped), so re-quantizing ``w_hat`` rebuilds the
same grid and :func:`fake_quant` is bitwise idempotent.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .numcore import as_matrix

# max - min of a group must stay finite
MAX_MAGNITUDE = 1e307


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    symmetric: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def levels(self):
        return 1 << self.bits


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int64, rows x cols, values in [0, 2**bits)
    scales: np.ndarray  # rows x n_groups
    zero_points: np.ndarray  # rows x n_groups, int64
    config: QuantConfig = field(default_factory=QuantConfig)

    @property
    def shape(self):
        return self.codes.shape

    def group_scale_per_element(self):
        cols = self.codes.shape[1]
        return self.scales[:, np.arange(cols) // self.config.group_size]


def quantize_tensor(w, cfg):
    """Quantize each row of ``w`` in contiguous groups of ``cfg.group_size``.

    The last group of a row may be short. A constant group gets a single grid
    step of size ``|c|`` (scale 1 when ``c == 0``) so it round-trips exactly.
    """
    w = as_matrix(w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("cannot quantize non-finite values")
    if w.size and np.abs(w).max() > MAX_MAGNITUDE:
        raise FloatingPointError(f"values above {MAX_MAGNITUDE:g} would overflow the group range")
    codes, scales, zeros = kernels.quantize_groups(
        np.ascontiguousarray(w), cfg.bits, cfg.group_size, bool(cfg.symmetric))
    return QuantizedTensor(codes, scales, zeros, cfg)


def dequantize(q):
    return kernels.dequantize_groups(q.codes, q.scales, q.zero_points, q.config.group_size)


def fake_quant(w, cfg):
    return dequantize(quantize_tensor(w, cfg))


def fake_quant_weight(w, cfg):
    """Fake-quantize a ``(d_in, d_out)`` projection with groups along ``d_in``.

    The model stores projections input-major (``y = x @ w``), so each output
    neuron's weights are a column; grouping runs down that column.
    """
    return np.ascontiguousarray(fake_quant(np.asarray(w).T, cfg).T)


def quantize_model_weights(weights, cfg):
    """RTN-quantize every linear projection; embeddings and norm gains stay exact."""
    from .model import PROJECTION_NAMES

    layers = []
    for layer in weights.layers:
        updates = {name: fake_quant_weight(getattr(layer, name), cfg) for name in PROJECTION_NAMES}
        layers.append(replace(layer, **updates))
    return replace(weights, layers=layers, lm_head=fake_quant_weight(weights.lm_head, cfg))


def _fake_quant_positions(x, cfg, block):
    """Per position-block fake quantization of one head's ``(seq, d)`` matrix."""
    n, d = x.shape
    if n == 0:
        return x.copy()
    if block == 1:
        return fake_quant(x, replace(cfg, group_size=d))
    n_blocks = -(-n // block)
    out = np.empty_like(x)
    for b in range(n_blocks):
        rows = x[b * block:(b + 1) * block]
        flat = rows.reshape(1, -1)
        out[b * block:(b + 1) * block] = fake_quant(flat, replace(cfg, group_size=flat.shape[1])).reshape(rows.shape)
    return out


def quantize_kv_dynamic(kv, cfg, keep_prefix_fp=0, block=1):
    """Asymmetric per-head dynamic fake quantization of a KV cache.

    Positions ``>= keep_prefix_fp`` are quantized with parameters computed from
    the current values of each (layer, head, position block); earlier positions
    are copied through untouched. ``cfg.group_size`` is ignored: a group is
    always one head's slice of a position block.
    """
    if keep_prefix_fp < 0 or keep_prefix_fp > kv.seq_len:
        raise IndexError(f"keep_prefix_fp={keep_prefix_fp} outside cache of length {kv.seq_len}")
    if block < 1:
        raise ValueError("block must be >= 1")
    out = kv.copy()
    m = keep_prefix_fp
    for l in range(kv.n_layers):
        for h in range(kv.n_heads):
            for store in (out.keys, out.values):
                mat = store[l][h]
                if m < kv.seq_len:
                    mat[m:] = _fake_quant_positions(mat[m:], cfg, block)
    return out


class DynamicKVQuant:
    """``run_block`` hook: fake-quantize new KV rows per head and position.

    Rows at absolute positions below ``keep_prefix_fp`` pass through.
    """

    def __init__(self, cfg, keep_prefix_fp=0):
        self.cfg = cfg
        self.keep_prefix_fp = keep_prefix_fp

    def __call__(self, rows, start):
        skip = min(max(self.keep_prefix_fp - start, 0), rows.shape[0])
        if skip == rows.shape[0]:
            return rows
        out = rows.copy()
        out[skip:] = _fake_quant_positions(rows[skip:], self.cfg, 1)
        return out
