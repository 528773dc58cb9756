"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteLoss
from .tensor import Tape, Tensor


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                    return_details: bool = False, max_entries: int | None = None,
                    rng: np.random.Generator | None = None):
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` (mutated in place during the
    sweep, restored afterwards). The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_entries`` only a
    random subset of each parameter's entries is probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks run in float64")

    with Tape() as tape:
        tape.watch(*params)
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss("loss is not finite at the check point")
    analytic = tape.gradient(loss, list(params))

    def value() -> float:
        out = float(np.sum(f().data))
        if not np.isfinite(out):
            raise NonFiniteLoss("loss became non-finite under perturbation")
        return out

    worst = 0.0
    details = []
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        entries = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = err if err > worst else worst
            if return_details:
                details.append((p.name, i, gflat[i], numeric, err))
    return (worst, details) if return_details else worst
