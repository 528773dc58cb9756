"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` is a thin wrapper over a numpy array. Differentiation is
opt-in: operations executed inside ``with Tape() as tape:`` whose inputs are
watched (explicitly, or because they have ``requires_grad``) are appended to
the tape, and :meth:`Tape.gradient` walks that record backwards.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _tapes() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """An n-dimensional array of reals, optionally tracked by a tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None and requires_grad:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so reverse order is a valid
    topological order for the backward sweep. A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        stack.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def tracks(self, t: Tensor) -> bool:
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self.watch(t)
            return True
        return False

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, inputs, output, backward))
        self._tracked.add(id(output))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each source; the tape is left intact."""
        if seed is None:
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        source_ids = {id(s) for s in sources}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in source_ids else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                if gi.shape != inp.shape:
                    raise AssertionError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def make_result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    """Wrap ``data`` and record it on every active tape that tracks an input."""
    out = Tensor(data)
    inputs = tuple(inputs)
    for tape in _tapes():
        # a list, not a generator: every requires_grad input must get watched
        if any([tape.tracks(t) for t in inputs]):
            tape.record(op, inputs, out, backward)
    return out


def recording() -> bool:
    return bool(_tapes())
