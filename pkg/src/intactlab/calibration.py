"""Calibrating an IntactKV prefix against the layer-wise output MSE.

The loss for one sequence is::

    L(theta) = 1/2 * sum_l || f_l(w, x) - f_l(w_hat, x; theta) ||^2

summed over continuation positions only. The full-precision side is a plain
forward over the whole sequence; the quantized side runs the continuation on
top of the prefix ``theta`` and propagates its own hidden states (no teacher
forcing). Gradients w.r.t. every prefix key/value entry are computed by a
hand-written reverse pass and checked against central differences.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .intactkv import CALIBRATED, LOSSLESS, attach_and_prefill
from .model import InputError, forward
from .numcore import matmul, rope_apply


@dataclass
class CalibConfig:
    learning_rate: float = 2e-4
    epochs: int = 20
    grad_accum: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")


@dataclass
class CalibReport:
    step_losses: list = field(default_factory=list)  # accumulation-group mean loss per update
    epoch_losses: list = field(default_factory=list)  # full-corpus loss, index 0 = before training
    initial_loss: float = 0.0
    final_loss: float = 0.0
    best_epoch: int = 0
    n_updates: int = 0
    initial_layer_losses: list = field(default_factory=list)
    final_layer_losses: list = field(default_factory=list)
    grad_check_max_rel_error: float = float("nan")


class _Reference:
    """Full-precision layer outputs for one sequence, computed once."""

    def __init__(self, fp_weights, tokens):
        self.tokens = [int(t) for t in tokens]
        self.outputs = forward(fp_weights, self.tokens).layer_outputs


def _split(theta, sequence, loss_start):
    m = theta.prefix_len
    tokens = [int(t) for t in sequence]
    if len(tokens) <= m:
        raise InputError(f"sequence of length {len(tokens)} does not extend past the prefix (m={m})")
    if list(tokens[:m]) != list(theta.tokens):
        raise InputError("sequence does not start with the IntactKV prefix tokens")
    start = m if loss_start is None else int(loss_start)
    if not m <= start < len(tokens):
        raise InputError(f"loss start {start} outside [{m}, {len(tokens)})")
    return tokens, m, start


def _residuals(trace, ref, m, start):
    rows = slice(start - m, None)
    return [(q[rows] - r[start:]) for q, r in zip(trace.layer_outputs, ref.outputs)]


def layer_losses(fp_weights, q_weights, theta, sequence, loss_start=None, ref=None):
    """Per-layer terms ``1/2 ||f_l(w) - f_l(w_hat; theta)||^2``."""
    tokens, m, start = _split(theta, sequence, loss_start)
    ref = ref or _Reference(fp_weights, tokens)
    _, trace = attach_and_prefill(q_weights, theta, tokens[m:])
    return [0.5 * float(np.sum(r * r)) for r in _residuals(trace, ref, m, start)]


def layerwise_loss(fp_weights, q_weights, theta, sequence, loss_start=None, ref=None):
    return float(sum(layer_losses(fp_weights, q_weights, theta, sequence, loss_start, ref)))


def _rmsnorm_backward(x, gain, eps, dy):
    D = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gdy = gain * dy
    return r * gdy - x * (r ** 3) * np.sum(gdy * x, axis=-1, keepdims=True) / D


def _silu_parts(g):
    sig = 1.0 / (1.0 + np.exp(-g))
    return g * sig, sig * (1.0 + g * (1.0 - sig))


def loss_and_grad(fp_weights, q_weights, theta, sequence, loss_start=None, ref=None):
    """Loss and its exact gradient w.r.t. ``theta``.

    Returns ``(loss, grad_keys, grad_values)`` with the gradients shaped like
    ``theta.keys`` / ``theta.values``.
    """
    tokens, m, start = _split(theta, sequence, loss_start)
    ref = ref or _Reference(fp_weights, tokens)
    cfg = q_weights.config
    _, trace = attach_and_prefill(q_weights, theta, tokens[m:], keep_tape=True)
    res = _residuals(trace, ref, m, start)
    loss = float(sum(0.5 * np.sum(r * r) for r in res))

    H, d, eps = cfg.n_heads, cfg.head_dim, cfg.rmsnorm_eps
    inv_sqrt_d = 1.0 / math.sqrt(d)
    n = len(tokens) - m
    first = start - m
    gk = [[None] * H for _ in range(cfg.n_layers)]
    gv = [[None] * H for _ in range(cfg.n_layers)]

    G = np.zeros((n, cfg.d_model))
    for l in range(cfg.n_layers - 1, -1, -1):
        lw = q_weights.layers[l]
        t = trace.tape[l]
        G[first:] += res[l]
        # FFN sub-block
        d_hidden = matmul(G, lw.w_down.T)
        silu_g, dsilu = _silu_parts(t["g"])
        d_g = d_hidden * t["u"] * dsilu
        d_u = d_hidden * silu_g
        d_f_in = matmul(d_g, lw.w_gate.T) + matmul(d_u, lw.w_up.T)
        d_mid = G + _rmsnorm_backward(t["x_mid"], lw.ffn_norm, eps, d_f_in)
        # attention sub-block
        d_ctx = matmul(d_mid, lw.wo.T)
        dq = np.empty((n, cfg.d_model))
        dk = np.empty((n, cfg.d_model))
        dv = np.empty((n, cfg.d_model))
        for h in range(H):
            cols = slice(h * d, (h + 1) * d)
            P, K, V, qh = t["probs"][h], t["K"][h], t["V"][h], t["q"][h]
            dc = d_ctx[:, cols]
            dP = matmul(dc, V.T)
            dV = matmul(P.T, dc)
            dS = P * (dP - np.sum(dP * P, axis=1, keepdims=True)) * inv_sqrt_d
            dqh = matmul(dS, K)
            dK = matmul(dS.T, qh)
            gk[l][h] = dK[:m]
            gv[l][h] = dV[:m]
            dk_h, dv_h = dK[m:], dV[m:]
            if cfg.use_rope:
                dqh = rope_apply(dqh, m, cfg.rope_theta, inverse=True)
                dk_h = rope_apply(dk_h, m, cfg.rope_theta, inverse=True)
            dq[:, cols] = dqh
            dk[:, cols] = dk_h
            dv[:, cols] = dv_h
        d_a_in = matmul(dq, lw.wq.T) + matmul(dk, lw.wk.T) + matmul(dv, lw.wv.T)
        G = d_mid + _rmsnorm_backward(t["x_in"], lw.attn_norm, eps, d_a_in)
    return loss, gk, gv


def grad_intactkv(fp_weights, q_weights, theta, sequence, loss_start=None):
    """Gradient of :func:`layerwise_loss` as an ``(keys, values)`` pair of nested lists."""
    _, gk, gv = loss_and_grad(fp_weights, q_weights, theta, sequence, loss_start)
    return gk, gv


def _flat_grad(gk, gv):
    return np.concatenate([a.ravel() for layer in gk for a in layer]
                          + [a.ravel() for layer in gv for a in layer])


def grad_check(fp_weights, q_weights, theta, sequence, n_coords=64, h=1e-5, seed=0,
               loss_start=None):
    """Max relative error of the analytic gradient against central differences.

    Coordinates are drawn without replacement from
    ``numpy.random.default_rng(seed)``. Relative error is
    ``|a - f| / max(|a|, |f|, 1e-10)``. Large ``h`` is allowed but makes the
    finite-difference side inaccurate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    tokens, _, _ = _split(theta, sequence, loss_start)
    ref = _Reference(fp_weights, tokens)
    _, gk, gv = loss_and_grad(fp_weights, q_weights, theta, tokens, loss_start, ref)
    analytic = _flat_grad(gk, gv)
    base = theta.flat()
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.choice(base.size, size=min(n_coords, base.size), replace=False))
    worst = 0.0
    details = []
    for c in coords:
        plus, minus = base.copy(), base.copy()
        plus[c] += h
        minus[c] -= h
        lp = layerwise_loss(fp_weights, q_weights, theta.from_flat(plus), tokens, loss_start, ref)
        lm = layerwise_loss(fp_weights, q_weights, theta.from_flat(minus), tokens, loss_start, ref)
        fd = (lp - lm) / (2 * h)
        a = analytic[c]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-10)
        details.append((int(c), float(a), float(fd), float(rel)))
        worst = max(worst, rel)
    return worst, details


def _corpus_items(corpus):
    items = []
    for entry in corpus:
        tokens = getattr(entry, "tokens", entry)
        loss_start = getattr(entry, "loss_start", None)
        items.append(([int(t) for t in tokens], loss_start))
    return items


def corpus_loss(fp_weights, q_weights, theta, corpus, refs=None):
    items = _corpus_items(corpus)
    refs = refs or [None] * len(items)
    per_layer = np.zeros(fp_weights.config.n_layers)
    for (tokens, start), ref in zip(items, refs):
        per_layer += layer_losses(fp_weights, q_weights, theta, tokens, start, ref)
    return float(per_layer.sum() / len(items)), list(per_layer / len(items))


def calibrate(fp_weights, q_weights, theta0, corpus, cfg=None, progress=None):
    """Adam over the prefix entries with gradient accumulation.

    Each update averages the gradients of ``cfg.grad_accum`` sequences (a
    short final group is allowed). Every epoch visits the corpus once in an
    order drawn from ``cfg.seed``. The full-corpus loss is measured before
    training and after each epoch; the best of those prefixes is returned, so
    the final loss never exceeds the initial one. Weights are constants.
    """
    cfg = cfg or CalibConfig()
    items = _corpus_items(corpus)
    if not items:
        raise InputError("calibration corpus is empty")
    if theta0.provenance != LOSSLESS:
        raise InputError(f"calibration starts from a lossless prefix, got {theta0.provenance}")
    for tokens, start in items:
        _split(theta0, tokens, start)

    refs = [_Reference(fp_weights, tokens) for tokens, _ in items]
    rng = np.random.default_rng(cfg.seed)
    params = theta0.flat()
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)

    init_loss, init_layers = corpus_loss(fp_weights, q_weights, theta0, corpus, refs)
    report = CalibReport(initial_loss=init_loss, initial_layer_losses=init_layers,
                         epoch_losses=[init_loss])
    best_params, best_loss, best_layers = params.copy(), init_loss, init_layers
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(items))
        for g0 in range(0, len(order), cfg.grad_accum):
            group = order[g0:g0 + cfg.grad_accum]
            theta = theta0.from_flat(params)
            grad = np.zeros_like(params)
            group_loss = 0.0
            for i in group:
                tokens, start = items[i]
                loss, gk, gv = loss_and_grad(fp_weights, q_weights, theta, tokens, start, refs[i])
                grad += _flat_grad(gk, gv)
                group_loss += loss
            grad /= len(group)
            report.step_losses.append(group_loss / len(group))
            step += 1
            if cfg.learning_rate == 0:
                continue
            if cfg.weight_decay:
                params = params - cfg.learning_rate * cfg.weight_decay * params
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
            m1_hat = m1 / (1 - cfg.beta1 ** step)
            m2_hat = m2 / (1 - cfg.beta2 ** step)
            params = params - cfg.learning_rate * m1_hat / (np.sqrt(m2_hat) + cfg.eps)
        loss, layers = corpus_loss(fp_weights, q_weights, theta0.from_flat(params), corpus, refs)
        report.epoch_losses.append(loss)
        if loss < best_loss:
            best_params, best_loss, best_layers, report.best_epoch = params.copy(), loss, layers, epoch
        if progress:
            progress(epoch, step, loss)
    report.n_updates = step
    report.final_loss = best_loss
    report.final_layer_losses = best_layers
    if report.best_epoch == 0:
        return theta0.from_flat(best_params, LOSSLESS), report
    return theta0.from_flat(best_params, CALIBRATED), report
