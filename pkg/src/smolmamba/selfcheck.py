"""Oracle, gradient and invariant suites runnable without a trained model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelConfig, VisionSmolMamba
from .model.layers import BatchNorm, mgap
from .neuron import LifParams, lif_forward_sequence
from .oracles import scan_reference, sst_tp_reference
from .pruner import PruneThresholds, TokenMask, sst_tp
from .ssm import SsmParams, bidirectional_scan, selective_scan
from .tensorcore import Tensor, check_gradients, ops
from .train import smoothed_cross_entropy


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# scan ----------------------------------------------------------------------
def random_ssm(rng: np.random.Generator, channels: int, state: int, scale: float = 0.5) -> SsmParams:
    p = SsmParams.init(channels, state, rng, dtype=np.float64)
    for t in p.named().values():
        t.data += rng.normal(0.0, scale, t.shape)
    return p


def scan_oracle_error(cases: int, rng: np.random.Generator, max_tokens: int = 64, max_channels: int = 32,
                      max_state: int = 16) -> float:
    worst = 0.0
    for _ in range(cases):
        m = int(rng.integers(1, 3))
        c = int(rng.integers(1, max_channels + 1))
        s = int(rng.integers(1, max_state + 1))
        n = int(rng.integers(1, max_tokens + 1))
        p = random_ssm(rng, c, s)
        x = rng.normal(size=(m, c, n))
        if rng.random() < 0.5:
            x = (x > 0).astype(np.float64)
        fast = selective_scan(x, p).data
        ref = scan_reference(x, *[t.data for t in p.named().values()])
        worst = max(worst, float(np.abs(fast - ref).max()))
    return worst


# pruner --------------------------------------------------------------------
def random_spikes(rng: np.random.Generator, case: int) -> np.ndarray:
    b = int(rng.integers(1, 4))
    t = int(rng.integers(1, 5))
    c = int(rng.integers(1, 5))
    n = int(rng.integers(1, 9))
    kind = case % 5
    if kind == 0:
        return np.zeros((b, t, c, n))
    if kind == 1:
        return np.ones((b, t, c, n)) * float(rng.integers(0, 2))
    if kind == 2:
        return (rng.random((b, t, c, 1)) < 0.5).astype(np.float64)
    return (rng.random((b, t, c, n)) < rng.uniform(0.05, 0.95)).astype(np.float64)


def pruner_mismatches(cases: int, rng: np.random.Generator) -> int:
    bad = 0
    for i in range(cases):
        o = random_spikes(rng, i)
        steps = o.shape[1]
        phi = int(rng.integers(1, steps + 1))
        z = float(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0]))
        out = sst_tp(o, PruneThresholds(z, phi))
        tokens, bits, kept = sst_tp_reference(o, phi, z)
        same = (np.array_equal(out.mask.bits, bits) and np.array_equal(out.tokens, tokens)
                and all(np.array_equal(a, b) for a, b in zip(out.mask.kept_indices, kept)))
        bad += not same
    return bad


# gradients -----------------------------------------------------------------
def op_gradient_errors(rng: np.random.Generator) -> dict[str, float]:
    """Finite-difference error of every fused differentiable op, float64."""

    def t(*shape, binary=False):
        d = rng.normal(size=shape)
        return Tensor((d > 0).astype(np.float64) if binary else d, requires_grad=True)

    def weighted(fn, *params):
        w = rng.normal(size=fn().shape)
        return check_gradients(lambda: ops.sum(ops.mul(fn(), w)), list(params))

    out = {}
    x = t(2, 3, 4)
    y = t(2, 3, 4)
    out["add/mul/sub/div"] = weighted(lambda: ops.div(ops.mul(ops.sub(x, y), ops.add(x, 2.0)), ops.add(ops.exp(y), 1.0)), x, y)
    out["exp/log/sigmoid/softplus"] = weighted(lambda: ops.log(ops.add(ops.softplus(x), ops.sigmoid(y))), x, y)
    out["sum/mean/std/max"] = weighted(lambda: ops.add(ops.add(ops.sum(x, axis=1), ops.mean(y, axis=1)),
                                                       ops.add(ops.std(x, axis=1), ops.max(y, axis=1))), x, y)
    a, b = t(2, 3, 4), t(2, 4, 5)
    out["matmul"] = weighted(lambda: ops.matmul(a, b), a, b)
    w, bias = t(5, 3), t(5)
    out["linear"] = weighted(lambda: ops.linear(x, w, bias, axis=1), x, w, bias)
    out["log_softmax"] = weighted(lambda: ops.log_softmax(x, axis=-1), x)
    img, k, kd = t(2, 3, 6, 6), t(4, 3, 3, 3), t(3, 1, 3, 3)
    out["conv2d"] = weighted(lambda: ops.conv2d(img, k, stride=2, padding=1), img, k)
    out["conv2d_depthwise"] = weighted(lambda: ops.conv2d(img, kd, padding=1, groups=3), img, kd)
    seq, k1, b1 = t(2, 3, 7), t(3, 4), t(3)
    out["dwconv1d_causal"] = weighted(lambda: ops.depthwise_conv1d_causal(seq, k1, b1), seq, k1, b1)
    idx = np.array([[2, 0, 1, 0], [3, 1, 0, 0]])
    valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    tok = t(2, 2, 3, 4)
    out["take_tokens"] = weighted(lambda: ops.take_tokens(tok, idx, valid), tok)
    drive = t(4, 2, 3)
    out["lif_smooth"] = weighted(lambda: lif_forward_sequence(drive, LifParams(smooth=True, detach_reset=False)), drive)
    p = random_ssm(rng, 3, 4)
    sx = t(2, 3, 5)
    out["selective_scan"] = weighted(lambda: selective_scan(sx, p), sx, *p.named().values())
    bn = BatchNorm(3, np.float64)
    bn.gamma.data[:] = rng.normal(size=3)
    bn.beta.data[:] = rng.normal(size=3)
    mask = TokenMask.from_counts([4, 2])
    bx = t(2, 2, 3, 4)
    out["masked_batchnorm_train"] = weighted(lambda: bn(bx, mask), bx, bn.gamma, bn.beta)
    bn.eval()
    out["masked_batchnorm_eval"] = weighted(lambda: bn(bx, mask), bx, bn.gamma, bn.beta)
    out["mgap"] = weighted(lambda: mgap(bx, mask), bx)
    return out


def gradcheck_config() -> ModelConfig:
    return ModelConfig(depth=1, dim=8, timesteps=2, state_dim=4, num_classes=3, in_channels=1, image_size=16,
                       mlp_ratio=2.0, phi=2, smooth_spikes=True, detach_reset=False, dtype="float64")


def model_gradient_error(max_entries: int | None = None, seed: int = 0) -> tuple[float, int]:
    """End-to-end check on the tiny smooth-spike model; returns (error, parameter count)."""
    rng = np.random.default_rng(seed)
    model = VisionSmolMamba(gradcheck_config(), seed=seed)
    images = rng.random((2, 1, 16, 16))
    labels = np.array([0, 2])
    params = list(model.named_parameters().values())

    def loss():
        logits, _ = model(images)
        return smoothed_cross_entropy(logits, labels, 0.1)

    err = check_gradients(loss, params, eps=1e-6, max_entries=max_entries, rng=rng)
    return err, sum(p.size for p in params)


# invariants ----------------------------------------------------------------
def pad_invariance_error(rng: np.random.Generator, pad: int = 3) -> float:
    """Largest change at valid positions when masked zero tokens are appended."""
    b, t, c, n, s = 2, 2, 4, 6, 3
    counts = np.array([6, 4])
    mask = TokenMask.from_counts(counts)
    padded = TokenMask(np.pad(mask.bits, ((0, 0), (0, pad))), counts, mask.kept_indices)
    x = rng.normal(size=(b, t, c, n)) * mask.as_array()[:, None, None, :]
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (0, pad)))
    worst = 0.0

    pf, pb = random_ssm(rng, c, s), random_ssm(rng, c, s)
    m2 = np.repeat(mask.as_array(), t, axis=0)
    m2p = np.repeat(padded.as_array(), t, axis=0)
    for a, bb in zip(bidirectional_scan(x.reshape(b * t, c, n), x.reshape(b * t, c, n), pf, pb, m2),
                     bidirectional_scan(xp.reshape(b * t, c, n + pad), xp.reshape(b * t, c, n + pad), pf, pb, m2p)):
        worst = max(worst, float(np.abs(a.data - bb.data[..., :n]).max()))

    bn = BatchNorm(c, np.float64)
    bn.buffers["running_mean"] = rng.normal(size=c)
    bn.buffers["running_var"] = rng.random(c) + 0.5
    bn.eval()
    worst = max(worst, float(np.abs(bn(x, mask).data - bn(xp, padded).data[..., :n]).max()))
    worst = max(worst, float(np.abs(mgap(x, mask).data - mgap(xp, padded).data).max()))
    return worst


def mask_invariant_violations(seed: int = 0) -> list[str]:
    """Masked slots zero after each block, prefix-shaped masks, non-increasing counts."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(depth=3, dim=16, timesteps=4, state_dim=4, num_classes=4, in_channels=1, image_size=16,
                      mlp_ratio=2.0, dtype="float64")
    model = VisionSmolMamba(cfg, seed=seed)
    images = rng.random((4, 4, 1, 16, 16))
    problems = []
    prev = np.full(4, cfg.tokens)
    for i, (x, mask) in enumerate(model.block_outputs(images)):
        inv = ~mask.valid
        if np.any(x.data[:, :, :, :][np.broadcast_to(inv[:, None, None, :], x.shape)] != 0):
            problems.append(f"block {i}: non-zero masked activation")
        if not np.array_equal(mask.bits, (np.arange(mask.tokens)[None] < mask.kept_counts[:, None]).astype(np.uint8)):
            problems.append(f"block {i}: mask not prefix-shaped")
        if np.any(mask.kept_counts > prev) or np.any(mask.kept_counts < 1):
            problems.append(f"block {i}: token count increased or hit zero")
        prev = mask.kept_counts
    return problems


def lif_hand_trace() -> list[int]:
    spikes = lif_forward_sequence(np.full((4, 1), 0.3), LifParams(tau=2.0, v_th=0.5, v_reset=0.0))
    return [int(v) for v in spikes.data[:, 0]]


# runner --------------------------------------------------------------------
def _suites(quick: bool) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    rng = np.random.default_rng(1234)

    def scan():
        err = scan_oracle_error(40 if quick else 500, rng, max_tokens=64 if quick else 1024)
        return err < 1e-10, f"max abs error {err:.2e}"

    def pruner():
        bad = pruner_mismatches(300 if quick else 1000, rng)
        return bad == 0, f"{bad} mismatches"

    def op_grads():
        errs = op_gradient_errors(rng)
        name = max(errs, key=errs.get)
        return errs[name] < 1e-6, f"worst {name} {errs[name]:.2e}"

    def model_grads():
        err, count = model_gradient_error(max_entries=8 if quick else None)
        return err < 1e-3, f"relative error {err:.2e} over {count} parameters"

    def pad():
        err = pad_invariance_error(rng)
        return err < 1e-10, f"max valid-slot change {err:.2e}"

    def masks():
        problems = mask_invariant_violations()
        return not problems, "; ".join(problems) or "masked slots zero, prefix masks, monotone counts"

    def lif():
        pattern = lif_hand_trace()
        return pattern == [0, 0, 1, 0], f"spikes {pattern}"

    return [("scan_oracle", scan), ("pruner_oracle", pruner), ("op_gradients", op_grads),
            ("model_gradient", model_grads), ("pad_invariance", pad), ("mask_invariants", masks),
            ("lif_trace", lif)]


def run_selfcheck(quick: bool = True, log=print) -> list[SuiteResult]:
    results = []
    for name, fn in _suites(quick):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = SuiteResult(name, bool(ok), detail, time.perf_counter() - start)
        results.append(res)
        if log:
            log(f"{'PASS' if res.passed else 'FAIL'} {name}: {detail} ({res.seconds:.1f}s)")
    return results
