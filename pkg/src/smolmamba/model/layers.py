"""Parameterised layers and mask-aware primitives used by the network."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import EmptyMask
from ..pruner import TokenMask
from ..ssm import SsmParams
from ..tensorcore import Tensor, as_tensor, ops
from ..tensorcore.tensor import make_result


class Module:
    """Minimal container: parameters are Tensors with ``requires_grad``,
    buffers live in ``self.buffers`` and are saved with checkpoints."""

    training: bool = True

    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, SsmParams):
                for k, t in value.named().items():
                    out[f"{prefix}{name}.{k}"] = t
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers.items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            self.buffers[head] = value
            return
        node: object = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, (list, tuple)) else getattr(node, part)
        node.buffers[parts[-1]] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(rng: np.random.Generator, shape, bound: float, dtype, name: str) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)


class Linear(Module):
    """Pointwise projection along ``axis`` (the channel axis)."""

    def __init__(self, c_in: int, c_out: int, rng, dtype, bias: bool = False, axis: int = 2):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in)
        self.weight = _param(rng, (c_out, c_in), bound, dtype, "weight")
        self.bias = _param(rng, (c_out,), bound, dtype, "bias") if bias else None
        self.axis = axis

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias, axis=self.axis)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, dtype, stride: int = 1,
                 padding: int = 0, groups: int = 1):
        super().__init__()
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = _param(rng, (c_out, c_in // groups, kernel, kernel), 1.0 / np.sqrt(fan_in), dtype, "weight")
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding, groups=self.groups)


class CausalDWConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng, dtype):
        super().__init__()
        bound = 1.0 / np.sqrt(kernel)
        self.weight = _param(rng, (channels, kernel), bound, dtype, "weight")
        self.bias = _param(rng, (channels,), bound, dtype, "bias")

    def __call__(self, x) -> Tensor:
        return ops.depthwise_conv1d_causal(x, self.weight, self.bias)


def _bn_op(x: Tensor, gamma: Tensor, beta: Tensor, w: np.ndarray | None, axis: int, eps: float,
           training: bool, running_mean: np.ndarray, running_var: np.ndarray):
    xd = x.data
    c = xd.shape[axis]
    pre = int(np.prod(xd.shape[:axis], dtype=np.int64))
    # (pre, C, post) view: per-channel sums reduce the contiguous tail first
    x3 = xd.reshape(pre, c, -1)
    w3 = None if w is None else np.broadcast_to(w, xd.shape).reshape(pre, c, -1)

    def csum(a):
        return a.sum(axis=2).sum(axis=0)

    n = float(x3.shape[0] * x3.shape[2]) if w3 is None else csum(w3)
    if training:
        mean = csum(x3 if w3 is None else x3 * w3) / n
        centred = x3 - mean[:, None]
        if w3 is not None:
            centred = centred * w3
        var = csum(centred * centred) / n
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (x3 - mean[:, None]) * inv[:, None]
    out = xhat * gamma.data[:, None] + beta.data[:, None]
    if w3 is not None:
        out = out * w3

    def backward(g):
        g3 = g.reshape(pre, c, -1)
        gw = g3 if w3 is None else g3 * w3
        gbeta = csum(gw)
        ggamma = csum(gw * xhat)
        if training:
            # masked slots have gw == 0, so only valid positions enter both means
            gx = (gw - (gbeta / n)[:, None] - xhat * (ggamma / n)[:, None]) * (gamma.data * inv)[:, None]
            if w3 is not None:
                gx = gx * w3
        else:
            gx = gw * (gamma.data * inv)[:, None]
        return gx.reshape(xd.shape), ggamma, gbeta

    result = make_result("batch_norm", (x, gamma, beta), out.reshape(xd.shape), backward)
    return result, ((mean, var) if training else None)


def masked_batchnorm(x, mask, stats: "BatchNorm") -> Tensor:
    """Batch norm whose statistics use only valid positions.

    ``mask`` is a TokenMask (tokens on the last axis) or an array broadcastable
    to ``x``; masked positions come out as exactly zero. ``stats`` holds the
    affine parameters, running statistics and the train/eval flag.
    """
    return stats(x, mask)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype, axis: int = 2, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="beta")
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.axis, self.momentum, self.eps = axis, momentum, eps

    def __call__(self, x, mask=None) -> Tensor:
        x = as_tensor(x)
        if mask is None:
            w = None
        elif isinstance(mask, TokenMask):
            w = mask.as_array(x.dtype).reshape((mask.batch,) + (1,) * (x.ndim - 2) + (mask.tokens,))
        else:
            w = np.asarray(mask, dtype=x.dtype)
        out, stats = _bn_op(x, self.gamma, self.beta, w, self.axis % x.ndim, self.eps, self.training,
                            self.buffers["running_mean"], self.buffers["running_var"])
        if stats is not None:
            mom = self.momentum
            self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * stats[0].astype(np.float64)
            self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * stats[1].astype(np.float64)
        return out


def mgap(x, mask: TokenMask) -> Tensor:
    """Mask-aware pooling: sum over (timestep, valid token) / valid token count.

    ``x`` is (B, T, C, N); returns (B, C).
    """
    x = as_tensor(x)
    counts = mask.bits.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyMask("mgap needs at least one valid token per sample")
    m = mask.as_array(x.dtype)[:, None, None, :]
    pooled = ops.sum(ops.mul(x, m), axis=(1, 3))
    return ops.div(pooled, counts[:, None].astype(x.dtype))


def reverse_index(mask: TokenMask) -> np.ndarray:
    """Per-sample permutation reversing the valid prefix; padding stays put."""
    n = mask.tokens
    pos = np.arange(n)[None, :]
    counts = mask.kept_counts[:, None]
    return np.where(pos < counts, counts - 1 - pos, pos)


def reverser(x, mask: TokenMask) -> Tensor:
    full = np.ones(mask.bits.shape, dtype=bool)
    return ops.take_tokens(x, reverse_index(mask), full)


def firing_rate(x, mask: TokenMask | None = None) -> float:
    """Fraction of non-zero entries over valid positions of a (B, T, C, N) tensor."""
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    active = d != 0
    if mask is None:
        return float(active.mean()) if active.size else 0.0
    m = mask.valid[:, None, None, :]
    total = np.broadcast_to(m, d.shape).sum()
    return float((active & m).sum() / total) if total else 0.0
