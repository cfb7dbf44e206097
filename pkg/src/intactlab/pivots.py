"""Pivot-token detection from activation magnitude and received attention.

A position is flagged as a pivot when, at the chosen layer, its max-abs
hidden activation is at least ``act_ratio`` times the median over positions,
or the attention mass it receives is at least ``mass_ratio`` times the
uniform share ``1/n``. This OR-of-ratios rule is this package's own
operationalization; there is no canonical threshold.
"""
from dataclasses import dataclass

import numpy as np

DEFAULT_ACT_RATIO = 10.0
DEFAULT_MASS_RATIO = 5.0


def _check_layer(trace, layer):
    n_layers = len(trace.layer_outputs)
    if layer < 0:
        layer += n_layers
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} outside [0, {n_layers})")
    return layer


def token_activation_stats(trace, layer):
    """Max over channels of ``|hidden|`` for every position of ``layer``."""
    layer = _check_layer(trace, layer)
    return np.abs(trace.layer_outputs[layer]).max(axis=1)


def attention_mass(trace, layer):
    """Mean attention each key position receives, pooled over heads and queries.

    Only meaningful for traces that start at position 0 (square maps).
    """
    layer = _check_layer(trace, layer)
    attn = trace.attentions[layer]
    H, n_q, _ = attn.shape
    return attn.sum(axis=(0, 1)) / (H * n_q)


def detect_pivots(trace, act_ratio=DEFAULT_ACT_RATIO, mass_ratio=DEFAULT_MASS_RATIO, layer=-1):
    if act_ratio <= 1 or mass_ratio <= 1:
        raise ValueError("pivot ratios must exceed 1")
    act = token_activation_stats(trace, layer)
    mass = attention_mass(trace, layer)
    n = act.size
    flagged = (act >= act_ratio * np.median(act)) | (mass >= mass_ratio / n)
    return [int(i) for i in np.flatnonzero(flagged)]


@dataclass
class PivotReport:
    tokens: np.ndarray
    max_abs_activation: np.ndarray  # (n_layers_selected, n)
    layers: list
    attn_mass: np.ndarray
    is_pivot: np.ndarray

    def rows(self):
        """CSV rows using the last selected layer's activation statistic."""
        for t in range(self.tokens.size):
            yield (t, int(self.tokens[t]), float(self.max_abs_activation[-1, t]),
                   float(self.attn_mass[t]), int(self.is_pivot[t]))


def pivot_report(trace, tokens, layers=None, act_ratio=DEFAULT_ACT_RATIO,
                 mass_ratio=DEFAULT_MASS_RATIO):
    n_layers = len(trace.layer_outputs)
    layers = [n_layers - 1] if layers is None else [_check_layer(trace, l) for l in layers]
    acts = np.stack([token_activation_stats(trace, l) for l in layers])
    last = layers[-1]
    pivots = detect_pivots(trace, act_ratio, mass_ratio, layer=last)
    flag = np.zeros(len(tokens), dtype=np.int64)
    flag[pivots] = 1
    return PivotReport(np.asarray(tokens), acts, layers, attention_mass(trace, last), flag)
