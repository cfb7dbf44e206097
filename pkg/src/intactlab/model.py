"""Toy LLaMA-shaped decoder: pre-norm RMSNorm, rotary attention, SwiGLU FFN.

Projections are stored input-major, ``y = x @ W``. Keys are cached after the
rotary rotation, so a cached prefix is bound to positions ``0 .. m-1``.
"""
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .numcore import matmul, rmsnorm, rope_apply, silu, softmax_rows

PROJECTION_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
LAYER_FIELDS = PROJECTION_NAMES + ("attn_norm", "ffn_norm")

MODEL_MAGIC = b"IKVM"
MODEL_VERSION = 1


class InputError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 172
    vocab_size: int = 256
    max_seq: int = 128
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-6
    use_rope: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.use_rope and self.head_dim % 2:
            raise ValueError("rotary embeddings need an even head dimension")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embedding: np.ndarray
    layers: list
    final_norm: np.ndarray
    lm_head: np.ndarray

    def tensors(self):
        """All parameters in file order."""
        out = [self.token_embedding]
        for layer in self.layers:
            out.extend(getattr(layer, name) for name in LAYER_FIELDS)
        out.extend([self.final_norm, self.lm_head])
        return out

    def n_params(self):
        return sum(t.size for t in self.tensors())

    def to_bytes(self):
        return serialize_model(self)


@dataclass
class KVCache:
    """Per-layer, per-head keys (post-rotary) and values, each ``(seq, head_dim)``."""

    keys: list
    values: list

    @classmethod
    def empty(cls, config):
        d = config.head_dim
        mk = lambda: [[np.zeros((0, d)) for _ in range(config.n_heads)] for _ in range(config.n_layers)]
        return cls(mk(), mk())

    @property
    def n_layers(self):
        return len(self.keys)

    @property
    def n_heads(self):
        return len(self.keys[0])

    @property
    def seq_len(self):
        return self.keys[0][0].shape[0]

    def copy(self):
        return KVCache([[k.copy() for k in layer] for layer in self.keys],
                       [[v.copy() for v in layer] for layer in self.values])

    def slice(self, start, stop):
        return KVCache([[k[start:stop].copy() for k in layer] for layer in self.keys],
                       [[v[start:stop].copy() for v in layer] for layer in self.values])

    def equals(self, other):
        """Bitwise equality of every key and value matrix."""
        if self.seq_len != other.seq_len or self.n_layers != other.n_layers:
            return False
        return all(np.array_equal(a, b) for la, lb in zip(self.keys + self.values, other.keys + other.values)
                   for a, b in zip(la, lb))


@dataclass
class ForwardTrace:
    """Everything a forward pass exposes for analysis and loss computation.

    ``layer_outputs[l]`` is the residual stream after layer ``l`` and
    ``attn_outputs[l]`` the attention sub-block output (before the residual
    add). ``attentions[l]`` has shape ``(heads, queries, keys)``.
    """

    layer_outputs: list
    attn_outputs: list
    attentions: list
    cache: KVCache
    logits: np.ndarray
    start_position: int = 0
    tape: list = field(default=None, repr=False)


def init_random(config, seed):
    """Gaussian weights from ``numpy.random.default_rng(seed)`` (PCG64).

    Embeddings are unit normal; projections are normal with std
    ``1/sqrt(fan_in)``; norm gains are ones. Draw order is fixed: embedding,
    then each layer's projections in ``PROJECTION_NAMES`` order, then the
    output head.
    """
    rng = np.random.default_rng(seed)
    D, F = config.d_model, config.d_ff
    shapes = {"wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
              "w_gate": (D, F), "w_up": (D, F), "w_down": (F, D)}
    emb = rng.standard_normal((config.vocab_size, D))
    layers = []
    for _ in range(config.n_layers):
        mats = {name: rng.standard_normal(shape) / math.sqrt(shape[0]) for name, shape in shapes.items()}
        layers.append(LayerWeights(**mats, attn_norm=np.ones(D), ffn_norm=np.ones(D)))
    head = rng.standard_normal((D, config.vocab_size)) / math.sqrt(D)
    return ModelWeights(config, emb, layers, np.ones(D), head)


def inject_attention_sink(weights, token_id, channels, scale, attention_logit=0.0,
                          key_level=2.0):
    """Blow up ``token_id``'s embedding on ``channels`` by ``scale``.

    With ``attention_logit == 0`` nothing else changes. The outlier alone does
    not attract attention in a random pre-norm model (RMSNorm removes the
    magnitude), so a positive ``attention_logit`` also wires a sink circuit
    into every layer and head:

    * a bias channel ``b`` (lowest index not in ``channels``) is set to 1 in
      every embedding, giving all queries a shared input feature;
    * ``Wq[b, slow]`` routes that feature into the head's slowest rotary
      channel ``slow = d - 2`` with gain ``attention_logit * sqrt(d) / key_level``;
    * column ``slow`` of ``Wk`` is cleared except on ``channels``, which are
      set so the sink token's key reads ``key_level`` there.

    Every query then scores the sink about ``attention_logit`` above other
    keys, while the sink's key stays ordinary in magnitude.
    """
    cfg = weights.config
    if not 0 <= token_id < cfg.vocab_size:
        raise IndexError(f"token_id {token_id} outside vocabulary of {cfg.vocab_size}")
    channels = sorted(set(int(c) for c in channels))
    if not channels or any(not 0 <= c < cfg.d_model for c in channels):
        raise IndexError(f"sink channels {channels} outside [0, {cfg.d_model})")
    if attention_logit < 0:
        raise ValueError("attention_logit must be >= 0")
    if scale == 1 and attention_logit == 0:
        return replace(weights)
    emb = weights.token_embedding.copy()
    emb[token_id, channels] *= scale
    if attention_logit == 0:
        return replace(weights, token_embedding=emb)

    d = cfg.head_dim
    free = [c for c in range(cfg.d_model) if c not in channels]
    if not free or d < 2:
        raise ValueError("sink circuit needs a spare channel and head_dim >= 2")
    bias_ch = free[0]
    emb[:, bias_ch] = 1.0
    sink_dir = emb[token_id] / np.sqrt(np.mean(emb[token_id] ** 2))
    on_channels = sink_dir[channels]
    kappa = key_level / np.abs(on_channels).sum()
    q_gain = attention_logit * math.sqrt(d) / key_level
    layers = []
    for lw in weights.layers:
        wq, wk = lw.wq.copy(), lw.wk.copy()
        for h in range(cfg.n_heads):
            slow = h * d + d - 2
            wq[bias_ch, slow] = q_gain
            wk[:, slow] = 0.0
            wk[channels, slow] = np.sign(on_channels) * kappa
        layers.append(replace(lw, wq=wq, wk=wk))
    return replace(weights, token_embedding=emb, layers=layers)


def _check_tokens(config, tokens, start):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise InputError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError(f"token ids must lie in [0, {config.vocab_size})")
    if start == 0 and tokens.size > config.max_seq:
        raise InputError(f"{tokens.size} tokens exceed max_seq={config.max_seq}")
    if start + tokens.size > config.max_seq:
        raise CapacityError(
            f"{start} cached + {tokens.size} new positions exceed max_seq={config.max_seq}")
    return tokens


def run_block(weights, tokens, cache=None, keep_tape=False, kv_quant=None):
    """Process ``tokens`` at positions following ``cache``.

    The input cache is not modified; the returned trace holds the extended
    cache. With ``keep_tape`` the intermediates needed for the backward pass
    are recorded per layer. ``kv_quant(rows, start_position)``, if given, is
    applied to each head's new (post-rotary) keys and values before they
    enter the cache and are attended to.
    """
    cfg = weights.config
    if cache is None:
        cache = KVCache.empty(cfg)
    start = cache.seq_len
    tokens = _check_tokens(cfg, tokens, start)
    n = tokens.size
    H, d = cfg.n_heads, cfg.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)
    total = start + n
    masked = np.arange(total)[None, :] > (start + np.arange(n))[:, None]

    x = weights.token_embedding[tokens].astype(np.float64)
    new_keys, new_values = [], []
    layer_outputs, attn_outputs, attentions = [], [], []
    tape = [] if keep_tape else None
    for l, lw in enumerate(weights.layers):
        a_in = rmsnorm(x, lw.attn_norm, cfg.rmsnorm_eps)
        q = matmul(a_in, lw.wq)
        k = matmul(a_in, lw.wk)
        v = matmul(a_in, lw.wv)
        ctx = np.empty((n, cfg.d_model))
        probs_l = np.empty((H, n, total))
        lk, lv, qs = [], [], []
        for h in range(H):
            cols = slice(h * d, (h + 1) * d)
            qh, kh = q[:, cols], k[:, cols]
            vh = v[:, cols]
            if cfg.use_rope:
                qh = rope_apply(qh, start, cfg.rope_theta)
                kh = rope_apply(kh, start, cfg.rope_theta)
            if kv_quant is not None:
                kh, vh = kv_quant(kh, start), kv_quant(vh, start)
            K = np.concatenate([cache.keys[l][h], kh])
            V = np.concatenate([cache.values[l][h], vh])
            scores = matmul(qh, K.T) * inv_sqrt_d
            scores[masked] = -np.inf
            p = softmax_rows(scores)
            ctx[:, cols] = matmul(p, V)
            probs_l[h] = p
            lk.append(K)
            lv.append(V)
            qs.append(qh)
        attn = matmul(ctx, lw.wo)
        x_mid = x + attn
        f_in = rmsnorm(x_mid, lw.ffn_norm, cfg.rmsnorm_eps)
        g = matmul(f_in, lw.w_gate)
        u = matmul(f_in, lw.w_up)
        hidden = silu(g) * u
        x_out = x_mid + matmul(hidden, lw.w_down)
        if keep_tape:
            tape.append(dict(x_in=x, a_in=a_in, q=qs, K=lk, V=lv, probs=probs_l, ctx=ctx,
                             x_mid=x_mid, f_in=f_in, g=g, u=u, hidden=hidden))
        new_keys.append(lk)
        new_values.append(lv)
        layer_outputs.append(x_out)
        attn_outputs.append(attn)
        attentions.append(probs_l)
        x = x_out
    final = rmsnorm(x, weights.final_norm, cfg.rmsnorm_eps)
    logits = matmul(final, weights.lm_head)
    if keep_tape:
        tape.append(dict(x_final=x, final=final))
    return ForwardTrace(layer_outputs, attn_outputs, attentions, KVCache(new_keys, new_values),
                        logits, start, tape)


def forward(weights, tokens):
    """Whole-sequence causal forward from position 0."""
    return run_block(weights, tokens)


def decode_step(weights, cache, token):
    """Append one token; returns ``(logits, new_cache)``. ``cache`` is left intact."""
    if cache.seq_len >= weights.config.max_seq:
        raise CapacityError(f"cache full at max_seq={weights.config.max_seq}")
    trace = run_block(weights, [int(token)], cache)
    return trace.logits[0], trace.cache


# ---------------------------------------------------------------------------
# model file

_CFG_FORMAT = "<6I2d"
_TENSOR_COUNT = struct.Struct("<Q")


def _write_tensor(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf += _TENSOR_COUNT.pack(arr.size)
    buf += arr.tobytes()


def _expected_shapes(cfg):
    D, F = cfg.d_model, cfg.d_ff
    layer = {"wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D), "w_gate": (D, F),
             "w_up": (D, F), "w_down": (F, D), "attn_norm": (D,), "ffn_norm": (D,)}
    return layer


def serialize_model(weights):
    cfg = weights.config
    buf = bytearray(MODEL_MAGIC)
    buf += struct.pack("<I", MODEL_VERSION)
    buf += struct.pack(_CFG_FORMAT, cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff,
                       cfg.vocab_size, cfg.max_seq, cfg.rope_theta, cfg.rmsnorm_eps)
    buf += struct.pack("<I", int(cfg.use_rope))
    for t in weights.tensors():
        _write_tensor(buf, t)
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def tensor(self, shape, what):
        at = self.pos
        (count,) = self.unpack("<Q", what + " length")
        expected = int(np.prod(shape))
        if count != expected:
            raise FormatError(f"{what}: expected {expected} elements, found {count}", at)
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def deserialize_model(data):
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    at = r.pos
    (version,) = r.unpack("<I", "version")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", at)
    at = r.pos
    vals = r.unpack(_CFG_FORMAT, "config")
    (use_rope,) = r.unpack("<I", "config")
    try:
        cfg = ModelConfig(*vals, use_rope=bool(use_rope))
    except ValueError as exc:
        raise FormatError(f"invalid config: {exc}", at) from None
    D = cfg.d_model
    emb = r.tensor((cfg.vocab_size, D), "token_embedding")
    shapes = _expected_shapes(cfg)
    layers = []
    for l in range(cfg.n_layers):
        mats = {name: r.tensor(shapes[name], f"layer {l} {name}") for name in LAYER_FIELDS}
        layers.append(LayerWeights(**mats))
    final = r.tensor((D,), "final_norm")
    head = r.tensor((D, cfg.vocab_size), "lm_head")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    w = ModelWeights(cfg, emb, layers, final, head)
    if not all(np.all(np.isfinite(t)) for t in w.tensors()):
        raise FormatError("non-finite weight values", 0)
    return w


def save_model(weights, path):
    Path(path).write_bytes(serialize_model(weights))


def load_model(path):
    return deserialize_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# corpus files

@dataclass
class CorpusLine:
    tokens: list
    loss_start: int = None  # optional "offset N :" prefix


def parse_corpus(text):
    """Parse a corpus: one sequence of space-separated ids per line.

    A line may start with ``offset N :`` to mark where its loss starts.
    Blank lines are skipped.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        offset = None
        if line.startswith("offset"):
            head, sep, line = line.partition(":")
            if not sep:
                raise InputError(f"line {lineno}: offset prefix without ':'")
            try:
                offset = int(head.split()[1])
            except (IndexError, ValueError):
                raise InputError(f"line {lineno}: malformed offset prefix {head!r}") from None
        try:
            tokens = [int(t) for t in line.split()]
        except ValueError as exc:
            raise InputError(f"line {lineno}: {exc}") from None
        if not tokens:
            raise InputError(f"line {lineno}: no tokens")
        out.append(CorpusLine(tokens, offset))
    return out


def read_corpus(path):
    return parse_corpus(Path(path).read_text(encoding="utf-8"))


def format_corpus(sequences):
    lines = []
    for seq in sequences:
        if isinstance(seq, CorpusLine):
            body = " ".join(str(int(t)) for t in seq.tokens)
            lines.append(body if seq.loss_start is None else f"offset {seq.loss_start} : {body}")
        else:
            lines.append(" ".join(str(int(t)) for t in seq))
    return "\n".join(lines) + "\n"


def write_corpus(path, sequences):
    Path(path).write_text(format_corpus(sequences), encoding="utf-8", newline="\n")


def config_fields():
    return [f.name for f in fields(ModelConfig)]
