"""Pure numpy versions of the compiled kernels.

Every function here reproduces ``_kernels`` bit for bit: accumulation runs in
the same order and each product is rounded before it is added.
"""
import numpy as np

SCALE_MANTISSA_BITS = 44
SMALLEST_SCALE = 5e-324


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    k2, m = b.shape
    if k2 != k:
        raise ValueError(f"matmul shape mismatch: {n}x{k} @ {k2}x{m}")
    out = np.zeros((n, m), dtype=np.float64)
    for p in range(k):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def round_half_away(x):
    t = np.trunc(x)
    bump = np.abs(x - t) >= 0.5
    return np.where(bump, t + np.sign(x), t)


def snap_scale(s):
    m, e = np.frexp(s)
    m = np.floor(np.ldexp(m, SCALE_MANTISSA_BITS))
    return np.maximum(np.ldexp(m, e - SCALE_MANTISSA_BITS), SMALLEST_SCALE)


def quantize_groups(w, bits, group_size, symmetric):
    w = np.asarray(w, dtype=np.float64)
    rows, cols = w.shape
    n_groups = -(-cols // group_size)
    qmax = float((1 << bits) - 1)
    half = float(1 << (bits - 1))

    # pad the short last group with copies of its first element so min/max are unchanged
    padded_cols = n_groups * group_size
    if padded_cols != cols:
        last = (n_groups - 1) * group_size
        fill = np.repeat(w[:, last:last + 1], padded_cols - cols, axis=1)
        wp = np.concatenate([w, fill], axis=1)
    else:
        wp = w
    g = wp.reshape(rows, n_groups, group_size)
    mn = g.min(axis=2)
    mx = g.max(axis=2)
    const = mx == mn

    with np.errstate(divide="ignore", invalid="ignore"):
        if symmetric:
            amax = np.maximum(np.abs(mn), np.abs(mx))
            s = snap_scale(amax / (half - 1.0))
            z = np.full_like(s, half)
        else:
            lo = np.minimum(mn, 0.0)
            hi = np.maximum(mx, 0.0)
            s = snap_scale((hi - lo) / qmax)
            z = np.clip(round_half_away(-lo / s), 0.0, qmax)

        codes = round_half_away(g / s[:, :, None]) + z[:, :, None]
    codes = np.clip(codes, 0.0, qmax)

    if const.any():
        c = mn[const]
        cs = np.where(c == 0.0, 1.0, np.abs(c))
        if symmetric:
            cz = np.full_like(c, half)
        else:
            cz = np.where(c < 0.0, 1.0, 0.0)
        ccode = cz + np.sign(c)
        s[const] = cs
        z[const] = cz
        codes[const] = ccode[:, None]

    codes = codes.reshape(rows, padded_cols)[:, :cols]
    return (np.ascontiguousarray(codes, dtype=np.int64), s.astype(np.float64),
            z.astype(np.int64))


def dequantize_groups(codes, scales, zeros, group_size):
    codes = np.asarray(codes, dtype=np.int64)
    cols = codes.shape[1]
    gi = np.arange(cols) // group_size
    return scales[:, gi] * (codes - zeros[:, gi]).astype(np.float64)
