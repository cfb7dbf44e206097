"""Lossless KV prefixes ("IntactKV") for pivot tokens.

The full-precision model runs once over the prefix tokens; the resulting
per-layer, per-head keys and values are then loaded in front of the
quantized model's cache. Keys are post-rotary, so a prefix is only valid at
positions ``0 .. m-1``.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FormatError, InputError, KVCache, _Reader, _write_tensor, forward, run_block
from .quantizer import _fake_quant_positions

LOSSLESS, CALIBRATED, QUANTIZED = "lossless", "calibrated", "quantized"
PROVENANCE_CODES = {LOSSLESS: 0, CALIBRATED: 1, QUANTIZED: 2}

PREFIX_MAGIC = b"IKVP"
PREFIX_VERSION = 1


@dataclass
class IntactKV:
    tokens: list
    keys: list  # [layer][head] -> (m, head_dim)
    values: list
    provenance: str = LOSSLESS
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCE_CODES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        lengths = {a.shape[0] for layer in self.keys + self.values for a in layer}
        if len(lengths) != 1:
            raise ValueError(f"prefix lengths differ across layers/heads: {sorted(lengths)}")
        if lengths.pop() < 1:
            raise ValueError("IntactKV needs at least one prefix position")

    @property
    def prefix_len(self):
        return self.keys[0][0].shape[0]

    @property
    def n_layers(self):
        return len(self.keys)

    @property
    def n_heads(self):
        return len(self.keys[0])

    def as_cache(self):
        return KVCache([[k.copy() for k in layer] for layer in self.keys],
                       [[v.copy() for v in layer] for layer in self.values])

    @classmethod
    def from_cache(cls, cache, tokens, provenance=LOSSLESS):
        return cls(list(map(int, tokens)), [[k.copy() for k in layer] for layer in cache.keys],
                   [[v.copy() for v in layer] for layer in cache.values], provenance)

    def with_arrays(self, keys, values, provenance):
        return IntactKV(list(self.tokens), keys, values, provenance)

    def flat(self):
        """All prefix entries as one vector: every K then every V, layer-major."""
        return np.concatenate([a.ravel() for layer in self.keys for a in layer]
                              + [a.ravel() for layer in self.values for a in layer])

    def from_flat(self, vec, provenance=None):
        vec = np.asarray(vec, dtype=np.float64)
        keys, values, pos = [], [], 0
        for src, dst in ((self.keys, keys), (self.values, values)):
            for layer in src:
                row = []
                for a in layer:
                    row.append(vec[pos:pos + a.size].reshape(a.shape).copy())
                    pos += a.size
                dst.append(row)
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return IntactKV(list(self.tokens), keys, values, provenance or self.provenance)

    def equals(self, other):
        return (self.tokens == other.tokens and self.provenance == other.provenance
                and self.as_cache().equals(other.as_cache()))

    def abs_max(self, which="keys"):
        return max(float(np.abs(a).max()) for layer in getattr(self, which) for a in layer)

    def to_bytes(self):
        return serialize_intactkv(self)


def generate(fp_weights, prefix_tokens):
    """Run the full-precision model on the prefix and keep its KV cache."""
    prefix_tokens = [int(t) for t in prefix_tokens]
    if not prefix_tokens:
        raise InputError("IntactKV prefix must contain at least one token")
    trace = forward(fp_weights, prefix_tokens)
    return IntactKV.from_cache(trace.cache, prefix_tokens, LOSSLESS)


def attach_and_prefill(q_weights, kv, continuation, keep_tape=False):
    """Seed the cache with ``kv`` and run ``continuation`` with ``q_weights``.

    Continuation tokens sit at absolute positions ``kv.prefix_len`` onward.
    Returns ``(cache, trace)``; the trace covers continuation positions only.
    """
    trace = run_block(q_weights, continuation, kv.as_cache(), keep_tape=keep_tape)
    return trace.cache, trace


def quantize_intactkv(kv, cfg, block=1):
    """Per-head asymmetric RTN fake quantization of the prefix keys and values."""
    q = lambda layers: [[_fake_quant_positions(a, cfg, block) for a in layer] for layer in layers]
    return kv.with_arrays(q(kv.keys), q(kv.values), QUANTIZED)


def assemble_mixed_kv(kv_q, prefix):
    """Positions ``< prefix.prefix_len`` come from ``prefix``, the rest from ``kv_q``."""
    m = prefix.prefix_len
    if m > kv_q.seq_len:
        raise IndexError(f"prefix of length {m} longer than cache of length {kv_q.seq_len}")
    if prefix.n_layers != kv_q.n_layers or prefix.n_heads != kv_q.n_heads:
        raise IndexError("prefix and cache disagree on layer/head counts")
    join = lambda pre, rest: [[np.concatenate([p, r[m:]]) for p, r in zip(lp, lr)]
                              for lp, lr in zip(pre, rest)]
    return KVCache(join(prefix.keys, kv_q.keys), join(prefix.values, kv_q.values))


def storage_ratio(n_layers, d_model, prefix_len, n_params):
    """Prefix K+V entries as a fraction of the model's parameter count."""
    return 2 * n_layers * prefix_len * d_model / n_params


# ---------------------------------------------------------------------------
# IntactKV file

def serialize_intactkv(kv):
    buf = bytearray(PREFIX_MAGIC)
    buf += struct.pack("<I", PREFIX_VERSION)
    buf += struct.pack("<Q", len(kv.tokens))
    buf += struct.pack(f"<{len(kv.tokens)}I", *kv.tokens)
    buf += struct.pack("<B", PROVENANCE_CODES[kv.provenance])
    # layer/head geometry so the file is self-describing
    buf += struct.pack("<3I", kv.n_layers, kv.n_heads, kv.keys[0][0].shape[1])
    for l in range(kv.n_layers):
        for h in range(kv.n_heads):
            _write_tensor(buf, kv.keys[l][h])
            _write_tensor(buf, kv.values[l][h])
    return bytes(buf)


def deserialize_intactkv(data):
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != PREFIX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PREFIX_MAGIC!r}", 0)
    at = r.pos
    (version,) = r.unpack("<I", "version")
    if version != PREFIX_VERSION:
        raise FormatError(f"unsupported IntactKV version {version}", at)
    (count,) = r.unpack("<Q", "token count")
    if count < 1:
        raise FormatError("IntactKV file with empty prefix", r.pos - 8)
    tokens = list(r.unpack(f"<{count}I", "prefix tokens"))
    at = r.pos
    (code,) = r.unpack("<B", "provenance")
    names = {v: k for k, v in PROVENANCE_CODES.items()}
    if code not in names:
        raise FormatError(f"unknown provenance code {code}", at)
    n_layers, n_heads, d = r.unpack("<3I", "geometry")
    keys = [[None] * n_heads for _ in range(n_layers)]
    values = [[None] * n_heads for _ in range(n_layers)]
    for l in range(n_layers):
        for h in range(n_heads):
            keys[l][h] = r.tensor((count, d), f"layer {l} head {h} K")
            values[l][h] = r.tensor((count, d), f"layer {l} head {h} V")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    return IntactKV(tokens, keys, values, names[code])


def save_intactkv(kv, path):
    Path(path).write_bytes(serialize_intactkv(kv))


def load_intactkv(path):
    return deserialize_intactkv(Path(path).read_bytes())
