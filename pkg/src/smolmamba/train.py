"""Surrogate-gradient training: smoothed cross-entropy, AdamW, warmup + cosine, metrics CSV."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import NonFiniteLogits, NonFiniteLoss, ShapeMismatch
from .model import ModelConfig, VisionSmolMamba
from .model.checkpoint import atomic_write, load_state, model_state, save_checkpoint
from .tensorcore import Tape, Tensor, as_tensor, ops

METRIC_COLUMNS = ("epoch", "split", "loss", "top1", "mean_keep_ratio_per_layer",
                  "mean_firing_rate_per_layer", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    eval_batch_size: int = 250
    base_lr: float = 1e-3
    weight_decay: float = 0.06
    warmup_epochs: float = 10
    label_smoothing: float = 0.1
    seed: int = 0
    schedule: str = "cosine"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    grad_clip: float = 0.0      # global-norm clip; 0 disables
    mixup_alpha: float = 0.0    # 0 disables
    # float64 model and zeroed wall-clock column, for bit-identical reruns
    test_mode: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.schedule != "cosine" or self.optimizer != "adamw":
            raise ValueError("only the cosine schedule and the adamw optimizer are available")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.grad_clip < 0 or self.mixup_alpha < 0:
            raise ValueError("grad_clip and mixup_alpha must be >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    keep_ratios: list[float]
    firing_rates: list[float]
    wall_seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), self.split, repr(float(self.loss)), repr(float(self.top1)),
                ";".join(repr(float(v)) for v in self.keep_ratios),
                ";".join(repr(float(v)) for v in self.firing_rates),
                repr(float(self.wall_seconds))]


def smoothed_cross_entropy(logits, labels, smoothing: float = 0.0, soft_targets: np.ndarray | None = None) -> Tensor:
    """Mean label-smoothed NLL; the target puts ``smoothing / M`` on every class."""
    logits = as_tensor(logits)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteLogits("logits contain NaN or inf")
    b, m = logits.shape
    if soft_targets is None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (b,):
            raise ShapeMismatch(f"labels {labels.shape} vs logits {logits.shape}")
        soft_targets = np.zeros((b, m), dtype=logits.dtype)
        soft_targets[np.arange(b), labels] = 1.0
    target = (1.0 - smoothing) * soft_targets + smoothing / m
    logp = ops.log_softmax(logits, axis=1)
    return ops.neg(ops.div(ops.sum(ops.mul(logp, target.astype(logits.dtype))), float(b)))


def smoothed_ce_floor(smoothing: float, classes: int) -> float:
    """Entropy of the smoothed target, the infimum of the loss."""
    hi = 1.0 - smoothing + smoothing / classes
    lo = smoothing / classes
    return -(hi * math.log(hi) + (classes - 1) * (lo * math.log(lo) if lo > 0 else 0.0))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               weight_decay: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay: set[str] | None = None) -> AdamState:
    """In-place AdamW update with bias-corrected moments and decoupled decay.

    ``decay`` names the parameters that receive weight decay (all by default).
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and (decay is None or name in decay):
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``cfg.epochs``."""
    w, total = cfg.warmup_epochs, cfg.epochs
    if w > 0 and epoch < w:
        return cfg.base_lr * epoch / w
    if total <= w:
        return cfg.base_lr
    progress = min(max((epoch - w) / (total - w), 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decay_names(model: VisionSmolMamba) -> set[str]:
    """Matrices and kernels decay; norms, biases, D, delta and lambda terms do not."""
    skip = ("lambda_raw", "delta_bias", ".D")
    return {n for n, p in model.named_parameters().items()
            if p.ndim >= 2 and not n.endswith(skip)}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale


@dataclass
class EvalResult:
    loss: float
    top1: float
    keep_ratios: list[float]
    firing_rates: list[float]
    token_counts: list[float]
    predictions: np.ndarray


def evaluate(model: VisionSmolMamba, data: Dataset, batch_size: int = 250, smoothing: float = 0.0) -> EvalResult:
    """Eval-mode pass (running BN statistics, pruning per config)."""
    was_training = model.training
    model.eval()
    depth = model.cfg.depth
    loss_sum, correct, n = 0.0, 0, 0
    keep, fr, tokens = np.zeros(depth), np.zeros(depth), np.zeros(depth)
    preds = []
    try:
        for xb, yb in data.batches(batch_size):
            logits, diag = model(xb)
            loss = smoothed_cross_entropy(logits, yb, smoothing)
            bsz = len(yb)
            loss_sum += float(loss.data) * bsz
            p = np.argmax(logits.data, axis=1)
            preds.append(p)
            correct += int((p == yb).sum())
            keep += np.asarray(diag.keep_ratios) * bsz
            fr += np.asarray(diag.firing_rates) * bsz
            tokens += np.asarray(diag.token_counts) * bsz
            n += bsz
    finally:
        model.train(was_training)
    if n == 0:
        return EvalResult(float("nan"), float("nan"), [], [], [], np.zeros(0, dtype=np.int64))
    return EvalResult(loss_sum / n, correct / n, list(keep / n), list(fr / n), list(tokens / n),
                      np.concatenate(preds))


class MetricsWriter:
    """CSV stream; the file is rewritten atomically after every appended row."""

    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[list[str]] = []

    def append(self, record: MetricsRecord) -> None:
        self.rows.append(record.row())
        if self.path:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            writer.writerows(self.rows)
            atomic_write(self.path, buf.getvalue().encode())


@dataclass
class TrainResult:
    model: VisionSmolMamba
    records: list[MetricsRecord]
    best_epoch: int
    best_val_top1: float
    test: EvalResult | None
    checkpoint_path: str | None


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: Dataset,
               test_data: Dataset | None = None, out_dir: str | None = None, log=None) -> TrainResult:
    """Train, logging (epoch, split) metrics and checkpointing at best validation top-1.

    Epoch 0 holds the evaluation of the freshly initialised model. The returned
    model carries the best-validation parameters.
    """
    if train_cfg.test_mode:
        model_cfg = replace(model_cfg, dtype="float64")
    model = VisionSmolMamba(model_cfg, seed=train_cfg.seed)
    fit, val = train_data.split(train_cfg.val_fraction, train_cfg.seed) if train_cfg.val_fraction else (train_data, None)
    if len(fit) == 0:
        raise ValueError("training split is empty")
    if val is None or len(val) == 0:
        val = fit
    params = model.named_parameters()
    names = list(params)
    decay = decay_names(model)
    adam = AdamState()
    rng = np.random.default_rng([train_cfg.seed, 11])
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    ckpt_path = os.path.join(out_dir, "checkpoint.smb") if out_dir else None
    records: list[MetricsRecord] = []
    start = time.perf_counter()

    def wall() -> float:
        return 0.0 if train_cfg.test_mode else time.perf_counter() - start

    def emit(epoch: int, split: str, res: EvalResult | tuple) -> None:
        if isinstance(res, EvalResult):
            rec = MetricsRecord(epoch, split, res.loss, res.top1, res.keep_ratios, res.firing_rates, wall())
        else:
            rec = MetricsRecord(epoch, split, *res, wall())
        records.append(rec)
        writer.append(rec)
        if log:
            log(rec)

    def eval_splits(epoch: int) -> float:
        res = evaluate(model, val, train_cfg.eval_batch_size, train_cfg.label_smoothing)
        emit(epoch, "val", res)
        if test_data is not None and len(test_data):
            emit(epoch, "test", evaluate(model, test_data, train_cfg.eval_batch_size, train_cfg.label_smoothing))
        return res.top1

    best = eval_splits(0)
    best_epoch = 0
    best_state = {k: v.copy() for k, v in model_state(model).items()}
    if ckpt_path:
        save_checkpoint(ckpt_path, model)

    steps = -(-len(fit) // train_cfg.batch_size)
    classes = model_cfg.num_classes
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        loss_sum, correct, n = 0.0, 0, 0
        keep = np.zeros(model_cfg.depth)
        fr = np.zeros(model_cfg.depth)
        for bi, (xb, yb) in enumerate(fit.batches(train_cfg.batch_size, rng)):
            lr = lr_schedule(epoch - 1 + bi / steps, train_cfg)
            soft = None
            if train_cfg.mixup_alpha > 0:
                lam = rng.beta(train_cfg.mixup_alpha, train_cfg.mixup_alpha)
                perm = rng.permutation(len(yb))
                xb = lam * xb + (1.0 - lam) * xb[perm]
                eye = np.eye(classes)
                soft = lam * eye[yb] + (1.0 - lam) * eye[yb[perm]]
            with Tape() as tape:
                logits, diag = model(xb)
                if not np.all(np.isfinite(logits.data)):
                    raise NonFiniteLoss(f"non-finite logits at epoch {epoch}, batch {bi}", epoch, bi)
                loss = smoothed_cross_entropy(logits, yb, train_cfg.label_smoothing, soft)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}", epoch, bi)
            grads = tape.gradient(loss, [params[k] for k in names])
            grads = dict(zip(names, grads))
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite gradient at epoch {epoch}, batch {bi}", epoch, bi)
            if train_cfg.grad_clip > 0:
                _clip(grads, train_cfg.grad_clip)
            adamw_step(params, grads, adam, lr, train_cfg.weight_decay,
                       (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps, decay)
            bsz = len(yb)
            loss_sum += value * bsz
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            keep += np.asarray(diag.keep_ratios) * bsz
            fr += np.asarray(diag.firing_rates) * bsz
            n += bsz
        emit(epoch, "train", (loss_sum / n, correct / n, list(keep / n), list(fr / n)))
        top1 = eval_splits(epoch)
        if top1 > best:
            best, best_epoch = top1, epoch
            best_state = {k: v.copy() for k, v in model_state(model).items()}
            if ckpt_path:
                save_checkpoint(ckpt_path, model)

    load_state(model, best_state)
    test = None
    if test_data is not None and len(test_data):
        test = evaluate(model, test_data, train_cfg.eval_batch_size, train_cfg.label_smoothing)
    return TrainResult(model, records, best_epoch, best, test, ckpt_path)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
