"""Canonical desk-scale models and corpora used by tests, CLI and docs."""
import numpy as np

from .model import KVCache, ModelConfig, decode_step, init_random, inject_attention_sink
from .numcore import softmax_rows

CANONICAL_SEED = 42
SINK_TOKEN = 0
SINK_CHANNELS = (3, 17, 29, 50)
SINK_SCALE = 1e3
SINK_LOGIT = 4.0


def canonical_config(**overrides):
    return ModelConfig(**overrides)


def micro_config():
    """1 layer, 1 head, head dim 4."""
    return ModelConfig(n_layers=1, d_model=4, n_heads=1, d_ff=8, vocab_size=16, max_seq=32)


def canonical_model(seed=CANONICAL_SEED, config=None):
    return init_random(config or canonical_config(), seed)


def sink_model(seed=CANONICAL_SEED, config=None, scale=SINK_SCALE, logit=SINK_LOGIT):
    """Canonical model with an attention sink on ``SINK_TOKEN``."""
    w = canonical_model(seed, config)
    channels = [c % w.config.d_model for c in SINK_CHANNELS]
    return inject_attention_sink(w, SINK_TOKEN, channels, scale, attention_logit=logit)


def common_prefix_corpus(n_sequences, prefix_len, cont_len, vocab_size, seed,
                         bos=SINK_TOKEN):
    """Sequences sharing one prompt prefix that starts with ``bos``.

    Non-prefix tokens are drawn uniformly from ``[1, vocab_size)`` so the
    sink token only ever appears at position 0.
    """
    rng = np.random.default_rng(seed)
    prefix = [bos] + [int(t) for t in rng.integers(1, vocab_size, prefix_len - 1)]
    return [prefix + [int(t) for t in rng.integers(1, vocab_size, cont_len)]
            for _ in range(n_sequences)]


def sample_corpus(teacher, n_sequences, length, seed, bos=SINK_TOKEN, temperature=1.0):
    """Ancestral samples from a teacher model, each starting with ``bos``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sequences):
        seq = [bos]
        logits, cache = decode_step(teacher, KVCache.empty(teacher.config), bos)
        while len(seq) < length:
            p = softmax_rows(logits[None, :] / temperature)[0]
            p[bos] = 0.0
            p /= p.sum()
            seq.append(int(rng.choice(p.size, p=p)))
            if len(seq) < length:
                logits, cache = decode_step(teacher, cache, seq[-1])
        out.append(seq)
    return out
