"""Independent reference implementations used by self-checks and tests.

These are deliberately naive: per-position loops, no shared code with the
fast paths they check.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def _softplus(v: float) -> float:
    return v + math.log1p(math.exp(-v)) if v > 0 else math.log1p(math.exp(v))


def scan_reference(x: np.ndarray, lambda_raw: np.ndarray, w_delta: np.ndarray, delta_bias: np.ndarray,
                   w_B: np.ndarray, w_C: np.ndarray, D: np.ndarray, lambda_eps: float = 1e-4) -> np.ndarray:
    """Sequential selective recurrence, one token at a time.

    x is (M, C, N); returns y of the same shape.
    """
    m_count, channels, n = x.shape
    state = lambda_raw.shape[1]
    lam = np.empty_like(lambda_raw, dtype=np.float64)
    for c in range(channels):
        for s in range(state):
            lam[c, s] = -(_softplus(float(lambda_raw[c, s])) + lambda_eps)
    y = np.zeros(x.shape, dtype=np.float64)
    for m in range(m_count):
        h = np.zeros((channels, state))
        for k in range(n):
            u = x[m, :, k].astype(np.float64)
            delta = _softplus(float(np.dot(w_delta[0], u) + delta_bias[0]))
            b_k = w_B @ u
            c_k = w_C @ u
            a_bar = np.exp(delta * lam)
            b_bar = (a_bar - 1.0) / lam * b_k[None, :]
            h = a_bar * h + b_bar * u[:, None]
            y[m, :, k] = h @ c_k + D * u
    return y


def _z_exceeds(diff: Fraction, var: Fraction, thr: Fraction, eps: Fraction) -> bool:
    # exact test of diff / (sqrt(var) + eps) > thr
    lhs = diff - thr * eps
    if thr >= 0:
        return lhs > 0 and lhs * lhs > thr * thr * var
    if lhs > 0:
        return True
    return lhs * lhs < thr * thr * var


def sst_tp_reference(o: np.ndarray, phi: int, z_threshold: float = 0.0, epsilon: float = 1e-5):
    """Literal transcription of the pruning algorithm in exact rational arithmetic.

    Returns (padded tokens, mask bits, kept index lists).
    """
    bsz, steps, channels, n = o.shape
    thr, eps = Fraction(z_threshold), Fraction(epsilon)
    act = [[[Fraction(0)] * n for _ in range(steps)] for _ in range(bsz)]
    for b in range(bsz):
        for t in range(steps):
            for i in range(n):
                total = Fraction(0)
                for c in range(channels):
                    total += Fraction(int(o[b, t, c, i]))
                act[b][t][i] = total / channels
    spatial = [[[0] * n for _ in range(steps)] for _ in range(bsz)]
    for b in range(bsz):
        for t in range(steps):
            mu = sum(act[b][t], Fraction(0)) / n
            var = sum(((a - mu) ** 2 for a in act[b][t]), Fraction(0)) / n
            for i in range(n):
                spatial[b][t][i] = 1 if _z_exceeds(act[b][t][i] - mu, var, thr, eps) else 0
    m_st = [[0] * n for _ in range(bsz)]
    for b in range(bsz):
        for i in range(n):
            t_star = None
            for t in range(steps):
                if spatial[b][t][i] == 1:
                    t_star = t + 1
                    break
            m_st[b][i] = 1 if t_star is not None and t_star <= phi else 0
    for b in range(bsz):
        if sum(m_st[b]) == 0:
            best, best_val = 0, None
            for i in range(n):
                val = sum((act[b][t][i] for t in range(steps)), Fraction(0))
                if best_val is None or val > best_val:
                    best, best_val = i, val
            m_st[b][best] = 1
    kept = [[i for i in range(n) if m_st[b][i] == 1] for b in range(bsz)]
    n_l = max(len(k) for k in kept)
    tokens = np.zeros((bsz, steps, channels, n_l), dtype=o.dtype)
    bits = np.zeros((bsz, n_l), dtype=np.uint8)
    for b in range(bsz):
        for j, i in enumerate(kept[b]):
            tokens[b, :, :, j] = o[b, :, :, i]
            bits[b, j] = 1
    return tokens, bits, kept


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def argmax_reference(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best
