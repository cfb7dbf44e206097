"""Desk-scale experiments: pivot analysis, IntactKV size sweep, mixed-precision
KV, perplexity and bound campaigns. The CLI in :mod:`intactlab.cli` wraps
these and writes their reports as CSV.
"""
import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds
from .intactkv import generate
from .model import InputError, forward, run_block
from .quantizer import DynamicKVQuant, quantize_kv_dynamic


# ---------------------------------------------------------------------------
# CSV plumbing

def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_atomic(path, data):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    write_atomic(path, csv_text(header, rows))


# ---------------------------------------------------------------------------
# quantized-vs-fp continuation error

@dataclass
class ContinuationError:
    last_layer_mse: float
    attn_mse: float  # summed over layers of each attention sub-block's MSE
    layer_mse: list  # per layer


def quantized_run(q_weights, tokens, prefix_kv=None, kv_cfg=None, keep_prefix_fp=0):
    """Run the quantized model over ``tokens``.

    With ``prefix_kv`` the first ``prefix_kv.prefix_len`` positions come from
    that (lossless) prefix and are not recomputed. With ``kv_cfg`` every new KV
    row at a position ``>= keep_prefix_fp`` is dynamically fake-quantized.
    Returns ``(trace, first_position)``.
    """
    hook = DynamicKVQuant(kv_cfg, keep_prefix_fp) if kv_cfg is not None else None
    if prefix_kv is None:
        return run_block(q_weights, tokens, kv_quant=hook), 0
    m = prefix_kv.prefix_len
    if list(tokens[:m]) != list(prefix_kv.tokens):
        raise InputError("sequence does not start with the IntactKV prefix tokens")
    cache = prefix_kv.as_cache()
    if hook is not None and keep_prefix_fp < m:
        cache = _quantize_cache_rows(cache, kv_cfg, keep_prefix_fp)
    return run_block(q_weights, tokens[m:], cache, kv_quant=hook), m


def _quantize_cache_rows(cache, kv_cfg, keep):
    return quantize_kv_dynamic(cache, kv_cfg, keep_prefix_fp=keep)


def continuation_error(fp_trace, q_trace, q_first, eval_start):
    """MSE between fp and quantized outputs at positions ``>= eval_start``."""
    rows = slice(eval_start - q_first, None)
    layer = [float(np.mean((q[rows] - f[eval_start:]) ** 2))
             for q, f in zip(q_trace.layer_outputs, fp_trace.layer_outputs)]
    attn = sum(float(np.mean((q[rows] - f[eval_start:]) ** 2))
               for q, f in zip(q_trace.attn_outputs, fp_trace.attn_outputs))
    return ContinuationError(layer[-1], attn, layer)


def common_prefix_len(sequences):
    first = sequences[0]
    n = min(len(s) for s in sequences)
    for i in range(n):
        if any(s[i] != first[i] for s in sequences):
            return i
    return n


# ---------------------------------------------------------------------------
# IntactKV size sweep

@dataclass
class SweepReport:
    rows: list  # (m, last_layer_mse, attn_mse)
    seed: int = 0
    bits: int = 0
    group_size: int = 0
    eval_start: int = 0
    n_sequences: int = 0

    HEADER = ("m", "mse_last_layer", "mse_attention", "seed", "bits", "group_size")

    def csv_rows(self):
        for m, last, attn in self.rows:
            yield (m, last, attn, self.seed, self.bits, self.group_size)

    def drops(self):
        mse = [r[1] for r in self.rows]
        return [a - b for a, b in zip(mse, mse[1:])]


def sweep_kv_size(fp_weights, q_weights, sequences, m_max, eval_start=None, kv_cfg=None):
    """Continuation MSE as a function of the lossless prefix length ``m``.

    ``m = 0`` is the plain quantized model. Errors are measured on positions
    ``>= eval_start`` (default: end of the common prefix, at least ``m_max``)
    so every ``m`` is scored on the same tokens.
    """
    sequences = [[int(t) for t in s] for s in sequences]
    if not sequences:
        raise InputError("sweep needs at least one sequence")
    shortest = min(len(s) for s in sequences)
    if m_max >= shortest:
        raise InputError(f"m_max={m_max} must be below the shortest sequence length {shortest}")
    if eval_start is None:
        eval_start = max(common_prefix_len(sequences), m_max)
    if not m_max <= eval_start < shortest:
        raise InputError(f"eval_start={eval_start} outside [{m_max}, {shortest})")
    fp_traces = [forward(fp_weights, s) for s in sequences]
    rows = []
    for m in range(m_max + 1):
        last, attn = 0.0, 0.0
        for s, ref in zip(sequences, fp_traces):
            prefix = generate(fp_weights, s[:m]) if m else None
            tr, first = quantized_run(q_weights, s, prefix, kv_cfg, keep_prefix_fp=m)
            err = continuation_error(ref, tr, first, eval_start)
            last += err.last_layer_mse
            attn += err.attn_mse
        rows.append((m, last / len(sequences), attn / len(sequences)))
    return SweepReport(rows, eval_start=eval_start, n_sequences=len(sequences))


# ---------------------------------------------------------------------------
# perplexity

@dataclass
class PplReport:
    dataset: str
    nll_bits: list  # per-sequence summed NLL in bits
    counts: list  # scored tokens per sequence

    HEADER = ("dataset", "sequence", "tokens", "nll", "ppl")

    @property
    def nll(self):
        """Per-sequence summed NLL in nats."""
        return [b * LN2 for b in self.nll_bits]

    @property
    def mean_nll(self):
        return float(np.sum(self.nll_bits) / np.sum(self.counts)) * LN2

    @property
    def perplexity(self):
        # base 2 keeps uniform predictions over 2**k tokens exact
        return 2.0 ** float(np.sum(self.nll_bits) / np.sum(self.counts))

    def csv_rows(self):
        for i, (bits, c) in enumerate(zip(self.nll_bits, self.counts)):
            yield (self.dataset, i, c, bits * LN2, 2.0 ** (bits / c))
        yield (self.dataset, "all", int(np.sum(self.counts)), float(np.sum(self.nll_bits)) * LN2,
               self.perplexity)


LN2 = math.log(2.0)
LOG2E = 1.0 / LN2


def log2_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z * LOG2E - np.log2(np.add.accumulate(np.exp(z), axis=-1)[..., -1:])


def sequence_nll_bits(logits, targets):
    """Summed NLL, in bits, of ``targets[i]`` under ``logits[i]``."""
    lp = log2_softmax(np.asarray(logits))
    return float(-np.sum(lp[np.arange(len(targets)), targets]))


def eval_ppl(fp_weights, q_weights, sequences, mode="fp", bos=None, kv_cfg=None,
             keep_prefix_fp=0, prefix=None, score_from=1, dataset="corpus"):
    """Perplexity under ``mode`` in {fp, quant, intactkv}.

    Logits at positions ``>= score_from`` are scored against the next token,
    the same positions in every mode so results are comparable. In intactkv
    mode the quantized model runs on top of ``prefix`` (default: a lossless
    one-token prefix built from each sequence's first token), which must not
    extend past ``score_from``. With ``bos`` set, each sequence's first token
    is replaced by it.
    """
    if mode not in ("fp", "quant", "intactkv"):
        raise InputError(f"unknown ppl mode {mode!r}")
    if score_from < 0:
        raise InputError("score_from must be >= 0")
    if mode == "intactkv" and prefix is not None and prefix.prefix_len > score_from:
        raise InputError(f"IntactKV prefix of length {prefix.prefix_len} covers scored position {score_from}")
    if mode == "intactkv" and prefix is None and score_from < 1:
        raise InputError("intactkv mode needs score_from >= 1")
    nll, counts = [], []
    cached = prefix
    for seq in sequences:
        seq = [int(t) for t in seq]
        if bos is not None and seq:
            seq[0] = int(bos)
        if len(seq) < score_from + 2:
            raise InputError(f"sequence of length {len(seq)} has nothing to score from position {score_from}")
        if mode == "intactkv":
            if prefix is None and (cached is None or cached.tokens != seq[:1]):
                cached = generate(fp_weights, seq[:1])
            tr, first = quantized_run(q_weights, seq, cached, kv_cfg, keep_prefix_fp)
        else:
            w = fp_weights if mode == "fp" else q_weights
            tr, first = quantized_run(w, seq, None, kv_cfg, keep_prefix_fp)
        logits = tr.logits[score_from - first:-1]
        targets = seq[score_from + 1:]
        nll.append(sequence_nll_bits(logits, targets))
        counts.append(len(targets))
    return PplReport(dataset, nll, counts)


# ---------------------------------------------------------------------------
# bound campaign

BOUND_HEADER = ("trial", "n", "d", "delta", "actual", "bound", "ratio", "C1", "C2", "C3", "seed")


def bound_campaign(n, d, delta, trials, pivot_count, seed):
    """One report per trial; trial ``i`` uses seed ``seed * 1_000_003 + i``."""
    if trials < 0:
        raise InputError("trials must be >= 0")
    if n < 1 or d < 1:
        raise InputError("n and d must be positive")
    if not 0 <= pivot_count <= n:
        raise InputError(f"pivot_count must be in [0, {n}]")
    reports = []
    for i in range(trials):
        s = seed * 1_000_003 + i
        inst = bounds.random_instance(n, d, delta, s, pivot_count)
        reports.append(bounds.head_error_bound(inst))
    return reports


def bound_rows(reports):
    for i, r in enumerate(reports):
        yield (i, r.n, r.d, r.delta, r.actual, r.bound, r.ratio, r.C1, r.C2, r.C3, r.seed)
