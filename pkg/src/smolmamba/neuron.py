"""Discrete-time leaky integrate-and-fire neurons with hard reset.

Forward dynamics per step::

    v_tilde = alpha_decay * v_prev + x
    s       = H(v_tilde - v_th)          (H(0) = 1)
    v       = v_tilde * (1 - s) + v_reset * s

The backward pass replaces dH/du with the derivative of sigmoid(alpha * u).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .tensorcore import Tensor, as_tensor, ops
from .tensorcore.ops import sigmoid_np
from .tensorcore.tensor import make_result


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_th: float = 0.5
    v_reset: float = 0.0
    dt: float = 1.0
    surrogate_alpha: float = 4.0
    # stop-gradient through s in the reset term
    detach_reset: bool = True
    # forward with sigmoid(alpha * u) instead of H(u); used by gradient checks
    smooth: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.alpha_decay <= 1:
            raise ValueError(f"alpha_decay = dt/tau must lie in (0, 1], got {self.alpha_decay}")
        if self.v_th <= self.v_reset:
            raise ValueError("v_th must exceed v_reset")
        if self.surrogate_alpha <= 0:
            raise ValueError("surrogate_alpha must be positive")

    @property
    def alpha_decay(self) -> float:
        return self.dt / self.tau


@dataclass
class LifState:
    v: Tensor

    @classmethod
    def zeros(cls, shape, dtype=np.float64, params: LifParams | None = None) -> "LifState":
        v_reset = params.v_reset if params is not None else 0.0
        return cls(Tensor(np.full(shape, v_reset, dtype=dtype)))


def surrogate_grad(u, alpha: float = 4.0) -> np.ndarray:
    """alpha * sigmoid(alpha u) * (1 - sigmoid(alpha u)), the derivative of sigmoid(alpha u)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    s = sigmoid_np(alpha * np.asarray(u, dtype=np.float64))
    return alpha * s * (1.0 - s)


def _fire(u: Tensor, params: LifParams) -> Tensor:
    if params.smooth:
        return ops.sigmoid(ops.mul(u, params.surrogate_alpha))
    return ops.heaviside(u, params.surrogate_alpha)


def lif_step(state: LifState, input_drive, params: LifParams = LifParams()) -> tuple[Tensor, LifState]:
    """One Euler step built from tape primitives."""
    x = as_tensor(input_drive)
    if x.shape != state.v.shape:
        raise ShapeMismatch(f"input drive {x.shape} does not match state {state.v.shape}")
    v_tilde = ops.add(ops.mul(state.v, params.alpha_decay), x)
    s = _fire(ops.sub(v_tilde, params.v_th), params)
    gate = s.detach() if params.detach_reset else s
    new_v = ops.add(ops.mul(v_tilde, ops.sub(1.0, gate)), ops.mul(gate, params.v_reset))
    return s, LifState(new_v)


def lif_forward_sequence(inputs, params: LifParams = LifParams(), initial: LifState | None = None,
                         axis: int = 0) -> Tensor:
    """Run the neuron over the timestep ``axis``; a single fused tape op.

    The membrane starts at ``initial.v`` (default v_reset) and is not returned.
    """
    x = as_tensor(inputs)
    xd = np.moveaxis(x.data, axis, 0)
    steps = xd.shape[0]
    dtype = xd.dtype if xd.dtype.kind == "f" else np.float64
    if steps == 0:
        return Tensor(np.zeros(x.shape, dtype=dtype))
    if initial is None:
        v = np.full(xd.shape[1:], params.v_reset, dtype=dtype)
    else:
        v = np.asarray(initial.v.data, dtype=dtype)
        if v.shape != xd.shape[1:]:
            raise ShapeMismatch(f"initial state {v.shape} does not match drive {xd.shape[1:]}")
    a, th, vr, alpha = params.alpha_decay, params.v_th, params.v_reset, params.surrogate_alpha
    v_tilde = np.empty(xd.shape, dtype=dtype)
    spikes = np.empty(xd.shape, dtype=dtype)
    for t in range(steps):
        vt = a * v + xd[t]
        if params.smooth:
            s = sigmoid_np(alpha * (vt - th)).astype(dtype, copy=False)
        else:
            s = (vt >= th).astype(dtype)
        v = vt * (1.0 - s) + vr * s
        v_tilde[t] = vt
        spikes[t] = s

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        gx = np.empty_like(v_tilde)
        gv = np.zeros(xd.shape[1:], dtype=dtype)
        for t in range(steps - 1, -1, -1):
            sd = alpha * spikes[t] * (1.0 - spikes[t]) if params.smooth else None
            if sd is None:
                sg = sigmoid_np(alpha * (v_tilde[t] - th))
                sd = alpha * sg * (1.0 - sg)
            dv = 1.0 - spikes[t]
            if not params.detach_reset:
                dv = dv + (vr - v_tilde[t]) * sd
            gvt = gv * dv + g[t] * sd
            gx[t] = gvt
            gv = a * gvt
        return (np.moveaxis(gx, 0, axis),)

    return make_result("lif", (x,), np.moveaxis(spikes, 0, axis), backward)
