"""Differentiable operations over :class:`Tensor`.

Every function accepts tensors, numpy arrays or python scalars and returns a
Tensor. Backward closures return one gradient (or ``None``) per input.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import AxisOutOfRange, DivisionByZero, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result

SURROGATE_ALPHA = 4.0


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand (no silent upcast)
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return _t(a), _t(b)


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    """Trailing-dimension broadcast; raises ShapeMismatch when incompatible."""
    try:
        return tuple(np.broadcast_shapes(*[tuple(s) for s in shapes]))
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from exc


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(np.result_type(x, np.float32), copy=False)


def surrogate_derivative(u: np.ndarray, alpha: float = SURROGATE_ALPHA) -> np.ndarray:
    s = sigmoid_np(alpha * np.asarray(u))
    return alpha * s * (1.0 - s)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("add", (a, b), a.data + b.data,
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("sub", (a, b), a.data - b.data,
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_result("mul", (a, b), ad * bd,
                       lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DivisionByZero("division by a tensor containing zeros")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_result("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = _t(a)
    return make_result("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return make_result("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return make_result("log", (a,), np.log(ad), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = sigmoid_np(a.data)
    return make_result("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return make_result("softplus", (a,), softplus_np(ad), lambda g: (g * sigmoid_np(ad),))


def heaviside(a, alpha: float = SURROGATE_ALPHA) -> Tensor:
    """Step function with H(0) = 1; backward uses the sigmoid surrogate."""
    a = _t(a)
    ad = a.data
    out = (ad >= 0).astype(ad.dtype if ad.dtype.kind == "f" else np.float64)
    return make_result("heaviside", (a,), out, lambda g: (g * surrogate_derivative(ad, alpha),))


def minimum(a, bound: float) -> Tensor:
    """Clamp from above; gradient passes where ``a <= bound``."""
    a = _t(a)
    ad = a.data
    keep = ad <= bound
    return make_result("minimum", (a,), np.minimum(ad, bound), lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add, "mul": mul, "div": div, "sub": sub,
    "exp": exp, "sigmoid": sigmoid, "heaviside": heaviside, "neg": neg, "log": log,
    "softplus": softplus,
}


def elementwise(op: str, a, b=None) -> Tensor:
    fn = _ELEMENTWISE[op]
    if op in ("add", "mul", "div", "sub"):
        if b is None:
            raise ShapeMismatch(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------- reductions

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    axes = _axes(axis, a.ndim)
    shape = a.shape
    return make_result("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims),
                       lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    shape = a.shape
    return make_result("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims),
                       lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / n, shape).copy(),))


def std(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divides by n)."""
    a = _t(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    centred = a.data - a.data.mean(axis=axes, keepdims=True)
    sd = np.sqrt((centred ** 2).mean(axis=axes, keepdims=True))

    def backward(g):
        g = _expand(g, axes, keepdims)
        safe = np.where(sd > 0, sd, 1.0)
        return (np.where(sd > 0, g * centred / (n * safe), 0.0).astype(a.dtype),)

    out = sd if keepdims else np.squeeze(sd, axis=axes)
    return make_result("std", (a,), out, backward)


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    a = _t(a)
    (ax,) = _axes(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), ax).squeeze(ax)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (ga,)

    return make_result("max", (a,), out, backward)


def argmax(a, axis: int = -1) -> Tensor:
    """Index of the maximum; ties resolve to the smallest index. Not differentiable."""
    a = _t(a)
    (ax,) = _axes(axis, a.ndim)
    return Tensor(np.argmax(a.data, axis=ax))


def reduce(op: str, a, axis: int) -> Tensor:
    fns = {"sum": sum, "mean": mean, "std": std, "max": max, "argmax": argmax}
    return fns[op](a, axis=axis)


# ------------------------------------------------------------------- algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result("matmul", (a, b), ad @ bd, backward)


def linear(x, weight, bias=None, axis: int = -1) -> Tensor:
    """Apply ``weight`` (out, in) along ``axis`` of ``x``, plus optional bias."""
    x, weight = _t(x), _t(weight)
    ax = axis % x.ndim
    if x.shape[ax] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input width {x.shape[ax]} != weight in-dim {weight.shape[1]}")
    xm = np.moveaxis(x.data, ax, -1)
    lead = xm.shape[:-1]
    x2 = xm.reshape(-1, weight.shape[1])
    y2 = x2 @ weight.data.T
    if bias is not None:
        bias = _t(bias)
        y2 = y2 + bias.data
    out = np.moveaxis(y2.reshape(*lead, weight.shape[0]), -1, ax)

    def backward(g):
        g2 = np.moveaxis(g, ax, -1).reshape(-1, weight.shape[0])
        gx = np.moveaxis((g2 @ weight.data).reshape(*lead, weight.shape[1]), -1, ax)
        gw = g2.T @ x2
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", inputs, np.ascontiguousarray(out), backward)


# -------------------------------------------------------------------- shapes

def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return make_result("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _t(a)
    inv = np.argsort(axes)
    return make_result("transpose", (a,), np.transpose(a.data, axes),
                       lambda g: (np.transpose(g, inv),))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_t(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return make_result("stack", ts, out,
                       lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def getitem(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = _t(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return make_result("getitem", (a,), a.data[index], backward)


def take_tokens(x, index: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-sample gather along the last axis with zero padding.

    ``x`` is (B, ..., N_in); ``index`` and ``valid`` are (B, N_out). Output slot
    ``[b, ..., i]`` is ``x[b, ..., index[b, i]]`` when ``valid[b, i]`` else 0.
    Gradients reach only the gathered source slots.
    """
    x = _t(x)
    xd = x.data
    index = np.asarray(index, dtype=np.intp)
    valid = np.asarray(valid, dtype=bool)
    if index.shape != valid.shape or index.shape[0] != xd.shape[0]:
        raise ShapeMismatch("take_tokens: index/valid must be (B, N_out) matching x")
    bshape = (xd.shape[0],) + (1,) * (xd.ndim - 2) + (index.shape[1],)
    idx = np.where(valid, index, 0).reshape(bshape)
    vmask = valid.reshape(bshape).astype(xd.dtype)
    out = np.take_along_axis(xd, np.broadcast_to(idx, xd.shape[:-1] + (index.shape[1],)), -1) * vmask

    n_in = xd.shape[-1]
    # invalid slots scatter into a spare column that is dropped afterwards
    scatter_idx = np.where(valid, index, n_in).reshape(bshape)

    def backward(g):
        gx = np.zeros(xd.shape[:-1] + (n_in + 1,), dtype=g.dtype)
        np.put_along_axis(gx, np.broadcast_to(scatter_idx, g.shape), g, -1)
        return (np.ascontiguousarray(gx[..., :n_in]),)

    return make_result("take_tokens", (x,), out, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_result("log_softmax", (a,), out,
                       lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ------------------------------------------------------------- convolutions

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation on (B, C_in, H, W); ``groups`` is 1 or C_in (depthwise)."""
    x, weight = _t(x), _t(weight)
    xd, wd = x.data, weight.data
    bsz, cin, h, w = xd.shape
    cout, cin_g, kh, kw = wd.shape
    if groups not in (1, cin) or cin_g * groups != cin:
        raise ShapeMismatch(f"conv2d: weight {wd.shape} incompatible with input {xd.shape}, groups={groups}")
    depthwise = groups == cin and groups > 1
    if depthwise and cout != cin:
        raise ShapeMismatch("depthwise conv2d needs C_out == C_in")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd

    def window(i, j):
        return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    out = np.zeros((bsz, cout, ho, wo), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            win = window(i, j)
            if depthwise:
                out += win * wd[None, :, 0, i, j, None, None]
            else:
                out += np.einsum("oc,bchw->bohw", wd[:, :, i, j], win, optimize=True)
    if bias is not None:
        bias = _t(bias)
        out += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * (ho - 1) + 1, stride),
                      slice(j, j + stride * (wo - 1) + 1, stride))
                win = xp[sl]
                if depthwise:
                    gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                    gxp[sl] += g * wd[None, :, 0, i, j, None, None]
                else:
                    gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, win, optimize=True)
                    gxp[sl] += np.einsum("oc,bohw->bchw", wd[:, :, i, j], g, optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", inputs, out, backward)


def depthwise_conv1d_causal(x, weight, bias=None) -> Tensor:
    """Causal depthwise convolution along the last axis.

    ``x`` is (..., C, N), ``weight`` is (C, k). Output position n sees inputs
    n-k+1 .. n (left zero padding), with weight[:, k-1] applied to position n.
    """
    x, weight = _t(x), _t(weight)
    xd, wd = x.data, weight.data
    c, k = wd.shape
    if xd.shape[-2] != c:
        raise ShapeMismatch(f"depthwise_conv1d: channels {xd.shape[-2]} != {c}")
    n = xd.shape[-1]
    pad = [(0, 0)] * (xd.ndim - 1) + [(k - 1, 0)]
    xp = np.pad(xd, pad)
    out = np.zeros(xd.shape, dtype=np.result_type(xd, wd))
    for j in range(k):
        out += xp[..., j:j + n] * wd[:, j, None]
    if bias is not None:
        bias = _t(bias)
        out += bias.data[:, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        red = tuple(range(xd.ndim - 2)) + (xd.ndim - 1,)
        for j in range(k):
            gw[:, j] = (g * xp[..., j:j + n]).sum(axis=red)
            gxp[..., j:j + n] += g * wd[:, j, None]
        grads = [gxp[..., k - 1:], gw]
        if bias is not None:
            grads.append(g.sum(axis=red))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("dwconv1d", inputs, out, backward)


__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid", "softplus", "heaviside",
    "minimum", "elementwise", "sum", "mean", "std", "max", "argmax", "reduce", "matmul",
    "linear", "reshape", "transpose", "stack", "getitem", "take_tokens", "log_softmax",
    "conv2d", "depthwise_conv1d_causal", "broadcast_shape", "unbroadcast", "sigmoid_np",
    "softplus_np", "surrogate_derivative", "as_tensor",
]
