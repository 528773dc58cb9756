"""Vision SmolMamba: spiking patch stem, position embedding, pruned SSM blocks, pooled head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ResolutionMismatch, ShapeMismatch
from ..neuron import LifParams, lif_forward_sequence
from ..pruner import PruneOutcome, PruneThresholds, TokenMask, sst_tp
from ..ssm import SsmParams, bidirectional_scan
from ..tensorcore import Tensor, as_tensor, ops
from .layers import (BatchNorm, CausalDWConv1d, Conv2d, Linear, Module, firing_rate, mgap,
                     reverse_index, reverser)


@dataclass
class ModelConfig:
    depth: int = 2
    dim: int = 64
    timesteps: int = 4
    state_dim: int = 16
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    stem_stages: int = 2
    mlp_ratio: float = 4.0
    dwconv_kernel: int = 4
    pruning_enabled: bool = True
    z_threshold: float = 0.0
    phi: int = 3
    prune_epsilon: float = 1e-5
    # optional per-block overrides; None entries fall back to the shared values
    layer_z_thresholds: list | None = None
    layer_phis: list | None = None
    tau: float = 2.0
    v_th: float = 0.5
    v_reset: float = 0.0
    surrogate_alpha: float = 4.0
    detach_reset: bool = True
    smooth_spikes: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim < 2 or self.dim % (2 ** (self.stem_stages - 1)):
            raise ValueError(f"dim={self.dim} must be divisible by 2**(stem_stages-1)")
        if self.timesteps < 1 or self.state_dim < 1 or self.num_classes < 2:
            raise ValueError("timesteps and state_dim must be >= 1, num_classes >= 2")
        if self.stem_stages < 1 or self.image_size % (2 ** self.stem_stages):
            raise ResolutionMismatch(
                f"image_size {self.image_size} not divisible by downsampling factor {2 ** self.stem_stages}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.hidden_dim < 1:
            raise ValueError("mlp_ratio too small")
        for name in ("layer_z_thresholds", "layer_phis"):
            value = getattr(self, name)
            if value is not None and len(value) != self.depth:
                raise ValueError(f"{name} needs {self.depth} entries")
        for l in range(self.depth):
            self.thresholds(l).validate(self.timesteps)
        self.lif_params()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def grid(self) -> int:
        return self.image_size // 2 ** self.stem_stages

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    def stem_channels(self) -> list[int]:
        return [self.dim // 2 ** (self.stem_stages - 1 - i) for i in range(self.stem_stages)]

    def thresholds(self, layer: int) -> PruneThresholds:
        z, phi = self.z_threshold, self.phi
        if self.layer_z_thresholds is not None and self.layer_z_thresholds[layer] is not None:
            z = self.layer_z_thresholds[layer]
        if self.layer_phis is not None and self.layer_phis[layer] is not None:
            phi = self.layer_phis[layer]
        return PruneThresholds(float(z), int(phi), self.prune_epsilon)

    def lif_params(self) -> LifParams:
        return LifParams(tau=self.tau, v_th=self.v_th, v_reset=self.v_reset,
                         surrogate_alpha=self.surrogate_alpha, detach_reset=self.detach_reset,
                         smooth=self.smooth_spikes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class LayerTrace:
    """Operation record for the energy model.

    ``tokens`` is the mean number of live output positions per sample and
    ``fr`` the measured non-zero fraction of the layer input over valid slots.
    """

    name: str
    op: str                 # conv2d | linear | dwconv1d | scan
    tokens: float
    c_in: int
    c_out: int
    kernel: int = 1         # spatial taps per output (k*k for conv2d)
    groups: int = 1
    fr: float = 1.0
    spiking_input: bool = True
    state_dim: int = 0
    block: int | None = None
    steps: int | None = None    # distinct input frames when not every timestep is computed


@dataclass
class BlockDiagnostics:
    tokens_in: np.ndarray
    tokens_out: np.ndarray
    keep_ratio: float           # mean over samples of N_l / N_{l-1}
    firing_rate: float          # fr of the pruned tokens P_l
    input_firing_rate: float    # fr of the block input X_{l-1}
    kept_indices: list          # per sample, relative to the block input
    grid_indices: list          # per sample, positions on the N_0 patch grid
    mask: TokenMask


@dataclass
class Diagnostics:
    timesteps: int
    tokens0: int
    blocks: list[BlockDiagnostics] = field(default_factory=list)
    traces: list[LayerTrace] = field(default_factory=list)
    final_mask: TokenMask | None = None

    @property
    def keep_ratios(self) -> list[float]:
        return [b.keep_ratio for b in self.blocks]

    @property
    def firing_rates(self) -> list[float]:
        return [b.firing_rate for b in self.blocks]

    @property
    def token_counts(self) -> list[float]:
        return [float(b.tokens_out.mean()) for b in self.blocks]


class Tracer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.records: list[LayerTrace] = []

    def add(self, *args, x=None, mask: TokenMask | None = None, **kw) -> None:
        if not self.enabled:
            return
        if x is not None:
            kw["fr"] = firing_rate(x, mask)
        self.records.append(LayerTrace(*args, **kw))


def _lif(x: Tensor, lif: LifParams) -> Tensor:
    return lif_forward_sequence(x, lif, axis=1)


def _mask4(mask: TokenMask, dtype) -> np.ndarray:
    return mask.as_array(dtype)[:, None, None, :]


class Smlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.bn1 = BatchNorm(hidden, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)
        self.bn2 = BatchNorm(dim, dtype)

    def __call__(self, u, mask: TokenMask, lif: LifParams, tracer: Tracer | None = None,
                 prefix: str = "", block: int | None = None) -> Tensor:
        m = _mask4(mask, u.dtype)
        tokens = float(mask.kept_counts.mean())
        if tracer is not None:
            tracer.add(prefix + "fc1", "linear", tokens, self.fc1.weight.shape[1], self.fc1.weight.shape[0],
                       x=u, mask=mask, block=block)
        hidden = ops.mul(_lif(self.bn1(self.fc1(u), mask), lif), m)
        if tracer is not None:
            tracer.add(prefix + "fc2", "linear", tokens, self.fc2.weight.shape[1], self.fc2.weight.shape[0],
                       x=hidden, mask=mask, block=block)
        return ops.mul(_lif(self.bn2(self.fc2(hidden), mask), lif), m)


def smlp(u, mask: TokenMask, module: Smlp, lif: LifParams = LifParams()) -> Tensor:
    """LIF(BN(linear(LIF(BN(linear(u)))))) with masked slots forced to zero."""
    return module(as_tensor(u), mask, lif)


class SmolMambaBlock(Module):
    def __init__(self, cfg: ModelConfig, index: int, rng):
        super().__init__()
        dt, c = cfg.np_dtype, cfg.dim
        self.index = index
        self.cfg = cfg
        self.proj_in = Linear(c, c, rng, dt)
        self.bn_in = BatchNorm(c, dt)
        self.dw_f = CausalDWConv1d(c, cfg.dwconv_kernel, rng, dt)
        self.dw_b = CausalDWConv1d(c, cfg.dwconv_kernel, rng, dt)
        self.ssm_f = SsmParams.init(c, cfg.state_dim, rng, dt)
        self.ssm_b = SsmParams.init(c, cfg.state_dim, rng, dt)
        self.proj_out = Linear(c, c, rng, dt)
        self.bn_out = BatchNorm(c, dt)
        self.mlp = Smlp(c, cfg.hidden_dim, rng, dt)

    def __call__(self, x: Tensor, mask: TokenMask, tracer: Tracer | None = None
                 ) -> tuple[Tensor, TokenMask, PruneOutcome]:
        cfg, lif = self.cfg, self.cfg.lif_params()
        if x.ndim != 4 or x.shape[2] != cfg.dim or x.shape[3] != mask.tokens:
            raise ShapeMismatch(f"block input {x.shape} does not match dim {cfg.dim} / mask {mask.bits.shape}")
        b, t, c, _ = x.shape
        pre = f"blocks.{self.index}."
        blk = self.index
        m_prev = _mask4(mask, x.dtype)
        if tracer is not None:
            tracer.add(pre + "proj_in", "linear", float(mask.kept_counts.mean()), c, c, x=x, mask=mask, block=blk)
        o = ops.mul(_lif(self.bn_in(self.proj_in(x), mask), lif), m_prev)

        if cfg.pruning_enabled:
            outcome = sst_tp(o, cfg.thresholds(self.index), mask)
            new_mask = outcome.mask
            residual = ops.take_tokens(x, new_mask.index(), new_mask.valid)
        else:
            outcome = PruneOutcome(o, mask)
            new_mask = mask
            residual = x
        p = outcome.tokens
        m = _mask4(new_mask, x.dtype)
        tokens = float(new_mask.kept_counts.mean())

        p_rev = reverser(p, new_mask)
        if tracer is not None:
            tracer.add(pre + "dw_f", "dwconv1d", tokens, c, c, kernel=cfg.dwconv_kernel, groups=c,
                       x=p, mask=new_mask, block=blk)
            tracer.add(pre + "dw_b", "dwconv1d", tokens, c, c, kernel=cfg.dwconv_kernel, groups=c,
                       x=p_rev, mask=new_mask, block=blk)
        h_f = ops.mul(_lif(self.dw_f(p), lif), m)
        h_b = ops.mul(_lif(self.dw_b(p_rev), lif), m)

        n = new_mask.tokens
        scan_mask = np.repeat(new_mask.as_array(x.dtype), t, axis=0)[:, None, :]
        if tracer is not None:
            for name, h in (("ssm_f", h_f), ("ssm_b", h_b)):
                tracer.add(pre + name, "scan", tokens, c, c, state_dim=cfg.state_dim,
                           x=h, mask=new_mask, block=blk)
        z_f, z_b = bidirectional_scan(ops.reshape(h_f, (b * t, c, n)), ops.reshape(h_b, (b * t, c, n)),
                                      self.ssm_f, self.ssm_b, scan_mask)
        z_f = ops.mul(_lif(ops.reshape(z_f, (b, t, c, n)), lif), m)
        z_b = ops.mul(_lif(ops.reshape(z_b, (b, t, c, n)), lif), m)
        fused = ops.mul(ops.add(z_f, reverser(z_b, new_mask)), m)

        if tracer is not None:
            tracer.add(pre + "proj_out", "linear", tokens, c, c, x=fused, mask=new_mask, block=blk)
        u = ops.add(ops.mul(_lif(self.bn_out(self.proj_out(fused), new_mask), lif), m), residual)
        out = ops.add(self.mlp(u, new_mask, lif, tracer, pre + "mlp.", blk), u)
        return out, new_mask, outcome


def smolmamba_block(x, mask: TokenMask, block: SmolMambaBlock) -> tuple[Tensor, TokenMask]:
    """Apply one block; returns the new activations and the (shrunken) mask."""
    out, new_mask, _ = block(as_tensor(x), mask)
    return out, new_mask


class VisionSmolMamba(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        chans = cfg.stem_channels()
        c_ins = [cfg.in_channels] + chans[:-1]
        self.stem_convs = [Conv2d(ci, co, 3, rng, dt, stride=2, padding=1) for ci, co in zip(c_ins, chans)]
        self.stem_bns = [BatchNorm(co, dt, axis=1) for co in chans]
        self.rpe_conv = Conv2d(cfg.dim, cfg.dim, 3, rng, dt, stride=1, padding=1, groups=cfg.dim)
        self.rpe_bn = BatchNorm(cfg.dim, dt, axis=1)
        self.blocks = [SmolMambaBlock(cfg, i, rng) for i in range(cfg.depth)]
        self.head = Linear(cfg.dim, cfg.num_classes, rng, dt, bias=True, axis=-1)

    # stem -------------------------------------------------------------
    def embed(self, images, tracer: Tracer | None = None) -> Tensor:
        """Images (B, Cin, H, W), or per-timestep drive (B, T, Cin, H, W), to spikes (B, T, C, N_0)."""
        cfg, lif = self.cfg, self.cfg.lif_params()
        tracer = tracer or Tracer(False)
        x = images if isinstance(images, Tensor) else as_tensor(np.asarray(images, dtype=cfg.np_dtype))
        static = x.ndim == 4
        if x.ndim not in (4, 5):
            raise ShapeMismatch(f"images must be 4-D or 5-D, got {x.shape}")
        if not static and x.shape[1] != cfg.timesteps:
            raise ShapeMismatch(f"temporal input has {x.shape[1]} steps, config says {cfg.timesteps}")
        cin, hgt, wid = x.shape[-3:]
        if cin != cfg.in_channels:
            raise ShapeMismatch(f"expected {cfg.in_channels} input channels, got {cin}")
        factor = 2 ** cfg.stem_stages
        if hgt % factor or wid % factor:
            raise ResolutionMismatch(f"{hgt}x{wid} not divisible by downsampling factor {factor}")
        b, t = x.shape[0], cfg.timesteps
        h = x if static else ops.reshape(x, (b * t, cin, hgt, wid))
        for i, (conv, bn) in enumerate(zip(self.stem_convs, self.stem_bns)):
            co = conv.weight.shape[0]
            ho, wo = h.shape[-2] // 2, h.shape[-1] // 2
            tracer.add(f"stem.{i}", "conv2d", float(ho * wo), conv.weight.shape[1], co, kernel=9,
                       spiking_input=i > 0, steps=(1 if static else t) if i == 0 else None,
                       **({"x": h.data} if i > 0 else {}))
            h = bn(conv(h))
            if i == 0 and static:
                # identical drive at every timestep; BN statistics are unchanged by replication
                h = ops.add(ops.reshape(h, (b, 1, co, ho, wo)), np.zeros((1, t, 1, 1, 1), dtype=h.dtype))
            else:
                h = ops.reshape(h, (b, t, co, ho, wo))
            h = ops.reshape(_lif(h, lif), (b * t, co, ho, wo))
        grid_h, grid_w = h.shape[-2:]
        c = cfg.dim
        tracer.add("rpe", "conv2d", float(grid_h * grid_w), c, c, kernel=9, groups=c, x=h.data)
        spikes = ops.reshape(h, (b, t, c, grid_h * grid_w))
        return relative_position_embedding(spikes, self.rpe_conv, self.rpe_bn, (grid_h, grid_w), lif)

    # full pipeline ----------------------------------------------------
    def forward(self, images, trace: bool = False) -> tuple[Tensor, Diagnostics]:
        tracer = Tracer(trace)
        x = self.embed(images, tracer)
        b, t, _, n0 = x.shape
        mask = TokenMask.full(b, n0)
        grid = [np.arange(n0) for _ in range(b)]
        diag = Diagnostics(timesteps=t, tokens0=n0)
        for block in self.blocks:
            in_fr = firing_rate(x, mask)
            counts_in = mask.kept_counts.copy()
            x, new_mask, outcome = block(x, mask, tracer)
            if new_mask is not mask:
                grid = [g[k] for g, k in zip(grid, new_mask.kept_indices)]
                kept = new_mask.kept_indices
            else:
                kept = [np.arange(c) for c in mask.kept_counts]
            diag.blocks.append(BlockDiagnostics(
                tokens_in=counts_in, tokens_out=new_mask.kept_counts.copy(),
                keep_ratio=float(np.mean(new_mask.kept_counts / counts_in)),
                firing_rate=firing_rate(outcome.tokens, new_mask), input_firing_rate=in_fr,
                kept_indices=kept, grid_indices=list(grid), mask=new_mask))
            mask = new_mask
        logits = self.head(mgap(x, mask))
        diag.traces = tracer.records
        diag.final_mask = mask
        return logits, diag

    __call__ = forward

    def block_outputs(self, images) -> list[tuple[Tensor, TokenMask]]:
        """Activations and masks after every block (inspection helper)."""
        x = self.embed(images)
        mask = TokenMask.full(x.shape[0], x.shape[3])
        out = []
        for block in self.blocks:
            x, mask, _ = block(x, mask)
            out.append((x, mask))
        return out

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()


def patch_embed_sps_lite(images, model: VisionSmolMamba) -> Tensor:
    return model.embed(images)


def relative_position_embedding(spikes, conv: Conv2d, bn: BatchNorm, grid: tuple[int, int],
                                lif: LifParams = LifParams()) -> Tensor:
    """X_0 = min(x + LIF(BN(DWConv3x3(x))), 1) for tokens still on their 2-D grid."""
    x = as_tensor(spikes)
    b, t, c, n = x.shape
    gh, gw = grid
    if gh * gw != n:
        raise ShapeMismatch(f"grid {grid} does not hold {n} tokens")
    img = ops.reshape(x, (b * t, c, gh, gw))
    rpe = _lif(ops.reshape(bn(conv(img)), (b, t, c, n)), lif)
    return ops.minimum(ops.add(x, rpe), 1.0)
