"""Operation counting and the 45 nm MAC/AC energy estimate.

Dense multiply-accumulates cost ``e_mac`` each; spike-driven accumulates cost
``e_ac`` per synaptic operation, with SOPs = fr * T * MACs. All figures are
per input sample and in picojoules.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MissingLayerCount
from .model.checkpoint import atomic_write
from .model.network import Diagnostics, LayerTrace

SCHEMA_VERSION = 1
AC_KINDS = ("snn_conv", "snn_fc", "ssm_ac")
MAC_KINDS = ("sps_conv_first", "ssm_mul")
KINDS = MAC_KINDS + AC_KINDS
BLOCK_REQUIRED = ("snn_fc", "ssm_mul", "ssm_ac")


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = 4.6
    e_ac: float = 0.9

    def __post_init__(self):
        if not 0 < self.e_ac < self.e_mac:
            raise ValueError("expected 0 < e_ac < e_mac")


@dataclass
class LayerOpCount:
    layer: str
    kind: str
    macs: float              # dense MACs per timestep
    fr: float
    timesteps: int
    block: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if not 0.0 <= self.fr <= 1.0:
            raise ValueError(f"{self.layer}: firing rate {self.fr} outside [0, 1]")
        if self.macs < 0 or self.timesteps < 1:
            raise ValueError(f"{self.layer}: macs must be >= 0 and timesteps >= 1")

    @property
    def is_mac(self) -> bool:
        return self.kind in MAC_KINDS

    @property
    def ops(self) -> float:
        """Dense MACs over all timesteps (MAC kinds) or SOPs (AC kinds)."""
        return self.macs * self.timesteps if self.is_mac else sops(self.fr, self.timesteps, self.macs)

    def energy(self, constants: EnergyConstants) -> float:
        return (constants.e_mac if self.is_mac else constants.e_ac) * self.ops


def sops(fr: float, timesteps: int, macs: float) -> float:
    if not 0.0 <= fr <= 1.0 or timesteps < 1:
        raise ValueError("need fr in [0, 1] and T >= 1")
    return fr * timesteps * macs


def count_macs(op: str, tokens: float, c_in: int, c_out: int | None = None, kernel: int = 1,
               groups: int = 1, state_dim: int = 0) -> float:
    """Dense MACs per timestep for one layer over ``tokens`` live positions.

    ``linear``: N*C_in*C_out; ``conv2d``: N*(C_in/groups)*kernel*C_out;
    ``dwconv1d``: N*C*k; ``scan``: N*C*S per direction.
    """
    if tokens < 0:
        raise ValueError("token count must be >= 0")
    c_out = c_in if c_out is None else c_out
    if op == "linear":
        return tokens * c_in * c_out
    if op == "conv2d":
        return tokens * (c_in // groups) * kernel * c_out
    if op == "dwconv1d":
        return tokens * c_in * kernel
    if op == "scan":
        return tokens * c_in * state_dim
    raise ValueError(f"unknown op {op!r}")


def scan_counts(trace: LayerTrace, timesteps: int) -> list[LayerOpCount]:
    """Split one scan direction into its priced parts.

    The Delta/B/C projections read spikes (AC). A_bar*h, C*h and Delta*lambda
    act on real-valued state (MAC, not gated by spikes). B_bar*x and D*x are
    add-selects on binary x (AC, gated by the input rate).
    """
    n, c, s = trace.tokens, trace.c_in, trace.state_dim
    base = count_macs("scan", n, c, state_dim=s)
    return [
        LayerOpCount(trace.name + ".proj", "snn_fc", count_macs("linear", n, c, 1 + 2 * s), trace.fr,
                     timesteps, trace.block),
        LayerOpCount(trace.name + ".mul", "ssm_mul", 3 * base, 1.0, timesteps, trace.block),
        LayerOpCount(trace.name + ".ac", "ssm_ac", base + n * c, trace.fr, timesteps, trace.block),
    ]


def trace_counts(trace: LayerTrace, timesteps: int) -> list[LayerOpCount]:
    if trace.op == "scan":
        return scan_counts(trace, timesteps)
    macs = count_macs(trace.op, trace.tokens, trace.c_in, trace.c_out, trace.kernel, trace.groups)
    if not trace.spiking_input:
        return [LayerOpCount(trace.name, "sps_conv_first", macs, 1.0, trace.steps or timesteps, trace.block)]
    kind = "snn_fc" if trace.op == "linear" else "snn_conv"
    return [LayerOpCount(trace.name, kind, macs, trace.fr, timesteps, trace.block)]


def block_energy(counts: list[LayerOpCount], constants: EnergyConstants = EnergyConstants()) -> float:
    """e_mac * MACs_SSM + e_ac * (SOPs_conv + SOPs_fc + SOPs_ssm) for one block."""
    present = {c.kind for c in counts}
    missing = [k for k in BLOCK_REQUIRED if k not in present]
    if missing:
        raise MissingLayerCount(f"block counts lack {missing}")
    mac = sum(c.ops for c in counts if c.is_mac)
    ac = sum(c.ops for c in counts if not c.is_mac)
    return constants.e_mac * mac + constants.e_ac * ac


@dataclass
class EnergyReport:
    constants: EnergyConstants
    layers: list[LayerOpCount]
    block_energies: list[float]
    keep_ratios: list[float]
    firing_rates: list[float]
    e_mac_total: float = 0.0
    e_ac_total: float = 0.0
    e_total: float = 0.0
    e_first_layer: float = 0.0
    scaling_index: float = 0.0

    @property
    def e_non_first(self) -> float:
        """Everything except the first (real-valued) stem convolution."""
        return self.e_total - self.e_first_layer

    def to_dict(self) -> dict:
        c = self.constants
        return {
            "schema_version": SCHEMA_VERSION,
            "units": "pJ",
            "constants": asdict(c),
            "layers": [dict(asdict(rec), ops=rec.ops, energy=rec.energy(c)) for rec in self.layers],
            "blocks": [{"block": i, "energy": e, "keep_ratio": k, "firing_rate": f}
                       for i, (e, k, f) in enumerate(zip(self.block_energies, self.keep_ratios, self.firing_rates))],
            "totals": {"e_total": self.e_total, "e_mac_total": self.e_mac_total, "e_ac_total": self.e_ac_total,
                       "e_first_layer": self.e_first_layer, "e_non_first": self.e_non_first},
            "scaling_index": self.scaling_index,
        }


def report_from_counts(counts: list[LayerOpCount], keep_ratios: list[float], firing_rates: list[float],
                       constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    blocks = sorted({c.block for c in counts if c.block is not None})
    mac = float(sum(c.energy(constants) for c in counts if c.is_mac))
    ac = float(sum(c.energy(constants) for c in counts if not c.is_mac))
    first = float(sum(c.energy(constants) for c in counts if c.kind == "sps_conv_first"))
    return EnergyReport(
        constants=constants, layers=counts,
        block_energies=[block_energy([c for c in counts if c.block == b], constants) for b in blocks],
        keep_ratios=list(keep_ratios), firing_rates=list(firing_rates),
        e_mac_total=mac, e_ac_total=ac, e_total=mac + ac, e_first_layer=first,
        scaling_index=scaling_index(keep_ratios, firing_rates))


def scaling_index(keep_ratios, firing_rates) -> float:
    return float(np.dot(np.asarray(keep_ratios, dtype=np.float64), np.asarray(firing_rates, dtype=np.float64)))


def total_energy(diag: Diagnostics, constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    if not diag.traces:
        raise MissingLayerCount("diagnostics carry no layer traces; run the forward pass with trace=True")
    counts = [c for t in diag.traces for c in trace_counts(t, diag.timesteps)]
    return report_from_counts(counts, diag.keep_ratios, diag.firing_rates, constants)


@dataclass
class Measurement:
    """Sample-weighted aggregate of traced forward passes."""

    timesteps: int
    traces: list[LayerTrace] = field(default_factory=list)
    keep_ratios: list[float] = field(default_factory=list)
    firing_rates: list[float] = field(default_factory=list)
    token_counts: list[float] = field(default_factory=list)
    samples: int = 0


def measure(model, data, batch_size: int = 250) -> Measurement:
    """Eval-mode traced passes over ``data``; rates weighted by live positions."""
    was_training = model.training
    model.eval()
    acc: list[dict] | None = None
    keep = fr = tokens = None
    n = 0
    try:
        for xb, _ in data.batches(batch_size):
            _, diag = model(xb, trace=True)
            b = len(xb)
            if acc is None:
                acc = [dict(tokens=0.0, fr=0.0) for _ in diag.traces]
                keep = np.zeros(len(diag.blocks))
                fr = np.zeros(len(diag.blocks))
                tokens = np.zeros(len(diag.blocks))
            for slot, t in zip(acc, diag.traces):
                slot["tokens"] += t.tokens * b
                slot["fr"] += t.fr * t.tokens * b
            keep += np.asarray(diag.keep_ratios) * b
            fr += np.asarray(diag.firing_rates) * b
            tokens += np.asarray(diag.token_counts) * b
            last = diag
            n += b
    finally:
        model.train(was_training)
    if n == 0:
        raise ValueError("measurement needs at least one sample")
    traces = []
    for slot, t in zip(acc, last.traces):
        mean_tokens = slot["tokens"] / n
        rate = slot["fr"] / slot["tokens"] if slot["tokens"] else 0.0
        traces.append(LayerTrace(**{**asdict(t), "tokens": mean_tokens, "fr": min(max(rate, 0.0), 1.0)}))
    return Measurement(last.timesteps, traces, list(keep / n), list(fr / n), list(tokens / n), n)


def measured_energy(model, data, batch_size: int = 250,
                    constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    m = measure(model, data, batch_size)
    counts = [c for t in m.traces for c in trace_counts(t, m.timesteps)]
    return report_from_counts(counts, m.keep_ratios, m.firing_rates, constants)


def write_report(path: str, report: EnergyReport) -> None:
    atomic_write(path, (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode())
