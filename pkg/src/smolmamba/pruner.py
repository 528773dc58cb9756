"""Spike-guided spatio-temporal token pruning.

Pipeline per layer: channel-mean spike activity -> per-(sample, timestep)
z-score over tokens -> spatial significance (z > threshold) -> first-spike
latency -> keep tokens whose latency is within ``phi`` -> per-sample fallback
(keep the most active token when nothing survives) -> order-preserving
compaction and zero padding to the batch maximum.

Mask decisions are computed from detached values; gradients reach only the
surviving token values through the gather.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySampleMask, PhiOutOfRange
from .tensorcore import Tensor, ops


@dataclass(frozen=True)
class PruneThresholds:
    z_threshold: float = 0.0
    phi: int = 3
    epsilon: float = 1e-5

    def validate(self, timesteps: int) -> None:
        if not 1 <= self.phi <= timesteps:
            raise PhiOutOfRange(f"phi={self.phi} outside [1, {timesteps}]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class TokenMask:
    """Prefix-shaped validity mask over padded token slots."""

    bits: np.ndarray                     # (B, N) uint8
    kept_counts: np.ndarray              # (B,)
    kept_indices: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def full(cls, batch: int, tokens: int) -> "TokenMask":
        idx = np.arange(tokens)
        return cls(np.ones((batch, tokens), dtype=np.uint8), np.full(batch, tokens),
                   [idx.copy() for _ in range(batch)])

    @classmethod
    def from_counts(cls, counts) -> "TokenMask":
        counts = np.asarray(counts, dtype=np.int64)
        n = int(counts.max()) if counts.size else 0
        bits = (np.arange(n)[None, :] < counts[:, None]).astype(np.uint8)
        return cls(bits, counts, [np.arange(c) for c in counts])

    @property
    def batch(self) -> int:
        return self.bits.shape[0]

    @property
    def tokens(self) -> int:
        return self.bits.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.bits.astype(bool)

    def index(self) -> np.ndarray:
        """(B, N) source indices, zero in padded slots."""
        out = np.zeros(self.bits.shape, dtype=np.intp)
        for b, idx in enumerate(self.kept_indices):
            out[b, :len(idx)] = idx
        return out

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return self.bits.astype(dtype)


@dataclass
class PruneOutcome:
    tokens: Tensor | np.ndarray          # (B, T, C, N_l), zero padded
    mask: TokenMask


def _values(o) -> np.ndarray:
    return o.data if isinstance(o, Tensor) else np.asarray(o)


def spike_activity(o) -> np.ndarray:
    """Channel-mean activity, (B, T, C, N) -> (B, T, N)."""
    return _values(o).astype(np.float64).mean(axis=2)


def zscore_normalize(activity, epsilon: float = 1e-5, valid: np.ndarray | None = None) -> np.ndarray:
    """Token-axis z-scores per (b, t) with population std.

    When ``valid`` (B, N) is given, statistics use valid tokens only and
    invalid slots get ``-inf``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.asarray(activity, dtype=np.float64)
    if valid is None:
        mu = a.mean(axis=-1, keepdims=True)
        sd = a.std(axis=-1, keepdims=True)
        return (a - mu) / (sd + epsilon)
    w = np.asarray(valid, dtype=np.float64)[:, None, :]
    n = w.sum(axis=-1, keepdims=True)
    mu = (a * w).sum(axis=-1, keepdims=True) / n
    sd = np.sqrt((((a - mu) * w) ** 2).sum(axis=-1, keepdims=True) / n)
    z = (a - mu) / (sd + epsilon)
    return np.where(w > 0, z, -np.inf)


def _zscore_from_counts(counts: np.ndarray, channels: int, epsilon: float,
                        valid: np.ndarray | None) -> np.ndarray:
    # Integer spike counts keep the centring exact, so z == 0 ties are decided
    # identically to exact arithmetic.
    if valid is None:
        valid = np.ones((counts.shape[0], counts.shape[2]), dtype=bool)
    w = valid[:, None, :]
    n = w.sum(axis=-1, keepdims=True).astype(np.float64)
    total = np.where(w, counts, 0.0).sum(axis=-1, keepdims=True)
    num = np.where(w, n * counts - total, 0.0)
    scale = n * channels
    sd = np.sqrt((num ** 2).sum(axis=-1, keepdims=True) / n) / scale
    z = (num / scale) / (sd + epsilon)
    return np.where(w, z, -np.inf)


def spatial_mask(z, z_threshold: float = 0.0) -> np.ndarray:
    """1 where z > threshold (strict)."""
    return (np.asarray(z) > z_threshold).astype(np.uint8)


def first_spike_latency(spatial) -> np.ndarray:
    """1-based first timestep of spatial significance, (B, T, N) -> (B, N).

    Tokens that are never significant get the sentinel T + 1.
    """
    s = np.asarray(spatial).astype(bool)
    steps = s.shape[1]
    first = np.argmax(s, axis=1) + 1
    return np.where(s.any(axis=1), first, steps + 1)


def temporal_mask(t_star, phi: int, timesteps: int | None = None) -> np.ndarray:
    t_star = np.asarray(t_star)
    upper = timesteps if timesteps is not None else phi
    if not 1 <= phi <= upper:
        raise PhiOutOfRange(f"phi={phi} outside [1, {upper}]")
    return (t_star <= phi).astype(np.uint8)


def fallback_keep(m_st, activity, valid: np.ndarray | None = None) -> np.ndarray:
    """Guarantee one kept token per sample: the argmax of summed activity."""
    m = np.array(m_st, dtype=np.uint8, copy=True)
    score = np.asarray(activity, dtype=np.float64).sum(axis=1)
    if valid is not None:
        score = np.where(valid, score, -np.inf)
    for b in np.flatnonzero(m.sum(axis=1) == 0):
        m[b, int(np.argmax(score[b]))] = 1
    return m


def reindex_and_pad(o, m_st) -> PruneOutcome:
    """Compact kept tokens in original order and zero-pad to the batch maximum."""
    m = np.asarray(m_st).astype(bool)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise EmptySampleMask("a sample has no kept token; fallback was skipped")
    kept = [np.flatnonzero(row) for row in m]
    mask = TokenMask.from_counts(counts)
    mask.kept_indices = kept
    index, valid = mask.index(), mask.valid
    if isinstance(o, Tensor):
        tokens = ops.take_tokens(o, index, valid)
    else:
        arr = np.asarray(o)
        idx = np.broadcast_to(index[:, None, None, :], arr.shape[:3] + index.shape[1:])
        gathered = np.take_along_axis(arr, idx, -1)
        tokens = gathered * valid[:, None, None, :]
    return PruneOutcome(tokens, mask)


def decide(o, thresholds: PruneThresholds = PruneThresholds(), mask: TokenMask | None = None) -> np.ndarray:
    """Kept-token indicator (B, N) after fallback, without gathering."""
    x = _values(o).astype(np.float64)
    _, steps, channels, _ = x.shape
    thresholds.validate(steps)
    valid = None if mask is None else mask.valid
    counts = x.sum(axis=2)
    z = _zscore_from_counts(counts, channels, thresholds.epsilon, valid)
    spatial = spatial_mask(z, thresholds.z_threshold)
    m_st = temporal_mask(first_spike_latency(spatial), thresholds.phi, steps)
    return fallback_keep(m_st, counts, valid)


def sst_tp(o, thresholds: PruneThresholds = PruneThresholds(), mask: TokenMask | None = None) -> PruneOutcome:
    """Prune a (B, T, C, N) spike tensor.

    ``mask`` marks the valid slots of an already padded input; padded slots
    are excluded from statistics and can never be kept. Without it every slot
    is a real token.
    """
    return reindex_and_pad(o, decide(o, thresholds, mask))
