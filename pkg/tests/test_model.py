import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from intactlab import recipes
from intactlab.model import (CapacityError, FormatError, InputError, KVCache, ModelConfig,
                             decode_step, deserialize_model, forward, init_random,
                             inject_attention_sink, load_model, parse_corpus,
                             read_corpus, save_model, serialize_model, write_corpus)
from intactlab.pivots import attention_mass, token_activation_stats

SMALL = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=32, max_seq=24)


@pytest.fixture(scope="module")
def small():
    return init_random(SMALL, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(d_model=12, n_heads=4)  # odd head dim with rope
    ModelConfig(d_model=12, n_heads=4, use_rope=False)


def test_init_deterministic(small):
    assert serialize_model(init_random(SMALL, 3)) == serialize_model(small)
    assert serialize_model(init_random(SMALL, 4)) != serialize_model(small)


def test_forward_smoke(canonical):
    tr = forward(canonical, [5, 9, 200, 17, 3])
    assert all(np.all(np.isfinite(h)) for h in tr.layer_outputs)
    for a in tr.attentions:
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-10)
        assert np.all(np.triu(a, 1) == 0)


def test_single_token_attention_is_one(canonical):
    tr = forward(canonical, [42])
    for a in tr.attentions:
        assert np.array_equal(a, np.ones((canonical.config.n_heads, 1, 1)))


def test_forward_input_errors(small):
    with pytest.raises(InputError):
        forward(small, [])
    with pytest.raises(InputError):
        forward(small, [SMALL.vocab_size])
    with pytest.raises(InputError):
        forward(small, [-1])
    with pytest.raises(InputError):
        forward(small, [1] * (SMALL.max_seq + 1))


def test_decode_base_case(canonical):
    logits, cache = decode_step(canonical, KVCache.empty(canonical.config), 7)
    assert np.max(np.abs(logits - forward(canonical, [7]).logits[-1])) <= 1e-12
    assert cache.seq_len == 1


def test_decode_matches_forward(small, rng):
    toks = [int(t) for t in rng.integers(0, SMALL.vocab_size, 20)]
    cache = KVCache.empty(SMALL)
    for i, t in enumerate(toks):
        logits, new = decode_step(small, cache, t)
        assert all(k.shape[0] == cache.seq_len + 1 for layer in new.keys for k in layer)
        cache = new
    tr = forward(small, toks)
    assert np.max(np.abs(logits - tr.logits[-1])) <= 1e-9
    assert cache.equals(tr.cache)


def test_decode_capacity(small):
    cache = forward(small, [1] * SMALL.max_seq).cache
    with pytest.raises(CapacityError):
        decode_step(small, cache, 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, SMALL.vocab_size - 1), min_size=2, max_size=16), st.data())
def test_causality(toks, data):
    w = init_random(SMALL, 3)
    t = data.draw(st.integers(1, len(toks) - 1))
    other = list(toks)
    other[t] = (other[t] + 1) % SMALL.vocab_size
    a, b = forward(w, toks).logits, forward(w, other).logits
    assert np.array_equal(a[:t], b[:t])


def test_sink_scale_one_is_identity(canonical):
    out = inject_attention_sink(canonical, 0, [3, 17], 1.0)
    assert serialize_model(out) == serialize_model(canonical)


def test_sink_index_errors(canonical):
    with pytest.raises(IndexError):
        inject_attention_sink(canonical, 256, [3], 1e3)
    with pytest.raises(IndexError):
        inject_attention_sink(canonical, 0, [64], 1e3)


def test_sink_only_touches_embedding_without_circuit(canonical):
    out = inject_attention_sink(canonical, 0, [3, 17, 29, 50], 1e3)
    assert np.array_equal(out.layers[0].wq, canonical.layers[0].wq)
    diff = out.token_embedding != canonical.token_embedding
    assert set(zip(*np.nonzero(diff))) == {(0, 3), (0, 17), (0, 29), (0, 50)}


def test_sink_phenomenon(sink):
    toks = [0] + list(range(1, 40))
    tr = forward(sink, toks)
    acts = token_activation_stats(tr, sink.config.n_layers - 1)
    assert acts[0] >= 10 * np.median(acts[1:])
    wins = 0
    for l in range(sink.config.n_layers):
        mass = attention_mass(tr, l)
        assert mass[0] > 1 / len(toks)
        wins += int(np.argmax(mass) == 0)
    assert wins >= sink.config.n_layers / 2


def test_model_file_round_trip(tmp_path, small):
    p = tmp_path / "m.ikvm"
    save_model(small, p)
    again = load_model(p)
    assert serialize_model(again) == p.read_bytes()
    toks = [1, 2, 3, 4]
    assert forward(again, toks).logits.tobytes() == forward(small, toks).logits.tobytes()
    cfg = replace(SMALL, use_rope=False)
    w = init_random(cfg, 1)
    assert deserialize_model(serialize_model(w)).config == cfg


def test_model_file_corruption(small):
    data = serialize_model(small)
    with pytest.raises(FormatError) as e:
        deserialize_model(b"XXXX" + data[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError):
        deserialize_model(data[:4] + b"\x02\x00\x00\x00" + data[8:])
    with pytest.raises(FormatError) as e:
        deserialize_model(data[:-3])
    assert e.value.offset > 0
    with pytest.raises(FormatError):
        deserialize_model(data + b"\x00")
    with pytest.raises(FormatError):
        deserialize_model(b"IK")


def test_corpus_parsing(tmp_path):
    lines = parse_corpus("1 2 3\n\n  offset 2 : 4 5 6 \n7\n")
    assert [l.tokens for l in lines] == [[1, 2, 3], [4, 5, 6], [7]]
    assert [l.loss_start for l in lines] == [None, 2, None]
    p = tmp_path / "c.txt"
    write_corpus(p, lines)
    assert read_corpus(p) == lines
    for bad in ("1 x 2\n", "offset 2 4 5\n", "offset : 1\n", "offset 1 :\n"):
        with pytest.raises(InputError):
            parse_corpus(bad)


def test_recipes_shapes():
    cfg = recipes.canonical_config()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size, cfg.max_seq) == \
        (4, 64, 4, 172, 256, 128)
    corpus = recipes.common_prefix_corpus(5, 4, 6, 50, seed=1)
    assert all(s[:4] == corpus[0][:4] and len(s) == 10 for s in corpus)
    assert all(0 not in s[1:] for s in corpus)
