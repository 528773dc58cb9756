"""Selective diagonal state-space scan along the token axis.

For every (sample, channel) slice and token position k::

    delta_k = softplus(w_delta . u_k + delta_bias)          (scalar per token)
    B_k     = W_B u_k,   C_k = W_C u_k                      (state-sized)
    A_bar   = exp(delta_k * lambda)                          (channel x state)
    B_bar   = (exp(delta_k * lambda) - 1) / lambda * B_k
    h_k     = A_bar * h_{k-1} + B_bar * x_k
    y_k     = sum_s C_k[s] h_k[s] + D * x_k

where u_k = x_k is the channel vector at position k and h_0 = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import LambdaTooCloseToZero, NonPositiveDelta, ShapeMismatch
from .tensorcore import Tensor, as_tensor, ops
from .tensorcore.tensor import make_result

LAMBDA_EPS = 1e-4


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Learnable parameters of one scan direction.

    ``lambda_raw`` is (C, S); lambda = -(softplus(lambda_raw) + LAMBDA_EPS) is
    strictly below -LAMBDA_EPS for every value of the raw parameter.
    """

    lambda_raw: Tensor
    w_delta: Tensor     # (1, C)
    delta_bias: Tensor  # (1,)
    w_B: Tensor         # (S, C)
    w_C: Tensor         # (S, C)
    D: Tensor           # (C,)

    @classmethod
    def init(cls, channels: int, state_dim: int = 16, rng: np.random.Generator | None = None,
             dtype=np.float32) -> "SsmParams":
        rng = np.random.default_rng(0) if rng is None else rng
        ramp = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=1))
        scale = 1.0 / np.sqrt(channels)

        def p(a, name):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True, name=name)

        return cls(
            lambda_raw=p(_inv_softplus(ramp - LAMBDA_EPS), "lambda_raw"),
            w_delta=p(rng.normal(0.0, scale, size=(1, channels)), "w_delta"),
            delta_bias=p(_inv_softplus(dt), "delta_bias"),
            w_B=p(rng.normal(0.0, scale, size=(state_dim, channels)), "w_B"),
            w_C=p(rng.normal(0.0, scale, size=(state_dim, channels)), "w_C"),
            D=p(np.ones(channels), "D"),
        )

    def named(self) -> dict[str, Tensor]:
        return {"lambda_raw": self.lambda_raw, "w_delta": self.w_delta, "delta_bias": self.delta_bias,
                "w_B": self.w_B, "w_C": self.w_C, "D": self.D}

    @property
    def channels(self) -> int:
        return self.lambda_raw.shape[0]

    @property
    def state_dim(self) -> int:
        return self.lambda_raw.shape[1]

    def lam(self) -> Tensor:
        return ops.neg(ops.add(ops.softplus(self.lambda_raw), LAMBDA_EPS))


def discretize_zoh(lam, delta, B) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold coefficients, elementwise with broadcasting.

    Returns ``(A_bar, B_bar)`` with A_bar = exp(delta * lam) and
    B_bar = expm1(delta * lam) / lam * B.
    """
    lam = np.asarray(lam, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise NonPositiveDelta("every delta must be > 0")
    if np.any(lam >= -LAMBDA_EPS):
        raise LambdaTooCloseToZero(f"every lambda must be < -{LAMBDA_EPS}")
    dA = delta * lam
    return np.exp(dA), np.expm1(dA) / lam * np.asarray(B, dtype=np.float64)


@numba.njit(cache=True, fastmath={"contract", "arcp", "reassoc"})
def _scan_fwd_kernel(x, a_bar, coef, Bm, Cm, D, h):
    # a_bar, coef, h: (M, C, S, N)
    m_dim, c_dim, n = x.shape
    s_dim = a_bar.shape[2]
    y = np.empty_like(x)
    zero = x.dtype.type(0)
    for m in range(m_dim):
        for c in range(c_dim):
            for k in range(n):
                y[m, c, k] = D[c] * x[m, c, k]
            for s in range(s_dim):
                prev = zero
                for k in range(n):
                    prev = a_bar[m, c, s, k] * prev + coef[m, c, s, k] * Bm[m, s, k] * x[m, c, k]
                    h[m, c, s, k] = prev
                    y[m, c, k] += Cm[m, s, k] * prev
    return y


@numba.njit(cache=True, fastmath={"contract", "arcp", "reassoc"})
def _scan_bwd_kernel(g, x, delta, lam, a_bar, coef, Bm, Cm, D, h):
    m_dim, c_dim, n = x.shape
    s_dim = a_bar.shape[2]
    zero = x.dtype.type(0)
    gx = np.empty_like(x)
    gdelta = np.zeros_like(delta)
    glam = np.zeros_like(lam)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    gD = np.zeros_like(D)
    for m in range(m_dim):
        for c in range(c_dim):
            for k in range(n):
                gx[m, c, k] = g[m, c, k] * D[c]
                gD[c] += g[m, c, k] * x[m, c, k]
            for s in range(s_dim):
                lm = lam[c, s]
                inv = 1 / lm
                carry = zero
                acc = zero
                for k in range(n - 1, -1, -1):
                    a = a_bar[m, c, s, k]
                    cf = coef[m, c, s, k]
                    gh = g[m, c, k] * Cm[m, s, k] + carry
                    gC[m, s, k] += g[m, c, k] * h[m, c, s, k]
                    bx = Bm[m, s, k] * x[m, c, k]
                    g_coef = gh * bx
                    gB[m, s, k] += gh * cf * x[m, c, k]
                    gx[m, c, k] += gh * cf * Bm[m, s, k]
                    g_a = gh * h[m, c, s, k - 1] if k > 0 else zero
                    # a_bar = exp(d*lam), coef = expm1(d*lam) / lam
                    g_da = (g_a + g_coef * inv) * a
                    acc += g_da * delta[m, k] - g_coef * cf * inv
                    gdelta[m, k] += g_da * lm
                    carry = a * gh
                glam[c, s] += acc
    return gx, gdelta, glam, gB, gC, gD


def _scan_core(x: Tensor, delta: Tensor, lam: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor,
               keep_states: bool = False):
    """Fused recurrence. Shapes: x (M, C, N), delta (M, 1, N), lam (C, S),
    Bm/Cm (M, S, N), D (C,). Returns y (M, C, N)."""
    dtype = np.result_type(x.data, delta.data, lam.data, Bm.data, Cm.data, D.data)

    def arr(t):
        return np.ascontiguousarray(t.data, dtype=dtype)

    xd, dd, ld, bd, cd, Dd = arr(x), arr(delta)[:, 0, :], arr(lam), arr(Bm), arr(Cm), arr(D)
    if np.any(dd <= 0):
        raise NonPositiveDelta("softplus underflow produced a non-positive delta")
    if np.any(ld >= -LAMBDA_EPS):
        raise LambdaTooCloseToZero(f"every lambda must be < -{LAMBDA_EPS}")
    lam4 = ld[None, :, :, None]
    d_a = dd[:, None, None, :] * lam4                     # (M, C, S, N)
    a_bar = np.exp(d_a)
    coef = np.expm1(d_a) / lam4
    h = np.empty_like(a_bar)
    y = _scan_fwd_kernel(xd, a_bar, coef, bd, cd, Dd, h)

    def backward(g):
        gx, gdelta, glam, gB, gC, gD = _scan_bwd_kernel(np.ascontiguousarray(g, dtype=dtype), xd, dd, ld,
                                                        a_bar, coef, bd, cd, Dd, h)
        return gx, gdelta[:, None, :], glam, gB, gC, gD

    out = make_result("selective_scan", (x, delta, lam, Bm, Cm, D), y, backward)
    if keep_states:
        return out, h.transpose(3, 0, 1, 2)
    return out


def selective_scan(x, params: SsmParams, return_states: bool = False):
    """Scan ``x`` of shape (batch*timestep, channel, tokens) along its last axis.

    With ``return_states`` the hidden states are also returned as an array of
    shape (tokens, batch*timestep, channel, state).
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != params.channels:
        raise ShapeMismatch(f"selective_scan expects (M, {params.channels}, N), got {x.shape}")
    delta = ops.softplus(ops.linear(x, params.w_delta, params.delta_bias, axis=1))
    Bm = ops.linear(x, params.w_B, axis=1)
    Cm = ops.linear(x, params.w_C, axis=1)
    return _scan_core(x, delta, params.lam(), Bm, Cm, params.D, keep_states=return_states)


def bidirectional_scan(x_fwd, x_bwd, params_fwd: SsmParams, params_bwd: SsmParams,
                       mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Two independent scans; padded slots are zeroed on the way in and out.

    ``x_fwd``/``x_bwd`` are (M, C, N); ``mask`` broadcasts as (M, 1, N).
    ``x_bwd`` must already be the valid-prefix reversal of the backward input.
    """
    x_fwd, x_bwd = as_tensor(x_fwd), as_tensor(x_bwd)
    m = np.asarray(mask, dtype=x_fwd.dtype)
    if m.ndim == 2:
        m = m[:, None, :]
    z_f = ops.mul(selective_scan(ops.mul(x_fwd, m), params_fwd), m)
    z_b = ops.mul(selective_scan(ops.mul(x_bwd, m), params_bwd), m)
    return z_f, z_b
