import csv
import math

import numpy as np
import pytest

from smolmamba.data import SyntheticSpec, generate_synthetic
from smolmamba.errors import NonFiniteLogits, NonFiniteLoss
from smolmamba.model import ModelConfig, VisionSmolMamba
from smolmamba.tensorcore import Tensor
from smolmamba.train import (METRIC_COLUMNS, AdamState, TrainConfig, adamw_step, decay_names, lr_schedule,
                             smoothed_ce_floor, smoothed_cross_entropy, train_loop)


def tiny_model_cfg():
    return ModelConfig(depth=1, dim=8, timesteps=4, state_dim=2, num_classes=10, in_channels=1, image_size=16,
                       mlp_ratio=2.0)


def tiny_data():
    return generate_synthetic(SyntheticSpec(n_train=40, n_test=20))


def test_cross_entropy_uniform_logits():
    loss = smoothed_cross_entropy(np.zeros((2, 4)), np.array([0, 3]), 0.1)
    assert float(loss.data) == pytest.approx(math.log(4))


def test_cross_entropy_hand_case():
    logits = np.array([[2.0, 0.0]])
    logp = logits - np.log(np.exp(logits).sum())
    target = np.array([0.95, 0.05])
    expected = -(target * logp).sum()
    assert float(smoothed_cross_entropy(logits, np.array([0]), 0.1).data) == pytest.approx(expected)


def test_cross_entropy_floor():
    s, m = 0.1, 10
    hi = 1 - s + s / m
    logits = np.log(np.array([[hi] + [s / m] * (m - 1)]))
    assert float(smoothed_cross_entropy(logits, np.array([0]), s).data) == pytest.approx(smoothed_ce_floor(s, m))


def test_cross_entropy_rejects_nan():
    with pytest.raises(NonFiniteLogits):
        smoothed_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))


def test_adamw_first_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adamw_step({"w": p}, {"w": np.array([0.5, -0.1])}, AdamState(), lr=0.1, weight_decay=0.0)
    # bias-corrected first step moves every entry by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_adamw_decoupled_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    adamw_step({"p": p, "q": q}, {"p": np.zeros(1), "q": np.zeros(1)}, AdamState(), lr=0.1,
               weight_decay=0.5, decay={"p"})
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))
    assert q.data[0] == 2.0


def test_decay_excludes_vectors_and_ssm_scalars():
    names = decay_names(VisionSmolMamba(tiny_model_cfg()))
    assert "blocks.0.proj_in.weight" in names
    assert not any(n.endswith(("lambda_raw", "delta_bias", ".D", "gamma", "beta", "bias")) for n in names)


def test_schedule_shape():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, base_lr=1.0)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(1, cfg) == pytest.approx(0.5)
    assert lr_schedule(2, cfg) == pytest.approx(1.0)
    assert lr_schedule(6, cfg) == pytest.approx(0.5)
    assert lr_schedule(10, cfg) == pytest.approx(0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, warmup_epochs=2)
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0)


def test_zero_epochs_writes_initial_eval(tmp_path):
    train, test = tiny_data()
    res = train_loop(tiny_model_cfg(), TrainConfig(epochs=0, warmup_epochs=0, test_mode=True), train, test,
                     str(tmp_path))
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [(r[0], r[1]) for r in rows[1:]] == [("0", "val"), ("0", "test")]
    assert res.best_epoch == 0
    assert (tmp_path / "checkpoint.smb").exists()


def test_one_epoch_rows_and_wall_column(tmp_path):
    train, test = tiny_data()
    res = train_loop(tiny_model_cfg(), TrainConfig(epochs=1, warmup_epochs=0, test_mode=True), train, test,
                     str(tmp_path))
    splits = [(r.epoch, r.split) for r in res.records]
    assert splits == [(0, "val"), (0, "test"), (1, "train"), (1, "val"), (1, "test")]
    assert all(r.wall_seconds == 0.0 for r in res.records)
    for r in res.records:
        assert all(0 < k <= 1 for k in r.keep_ratios)
        assert all(0 <= f <= 1 for f in r.firing_rates)


def test_nan_aborts_with_location(monkeypatch):
    train, _ = tiny_data()
    calls = {"n": 0}
    real = VisionSmolMamba.forward

    def poisoned(self, images, trace=False):
        logits, diag = real(self, images, trace)
        if self.training:
            calls["n"] += 1
            if calls["n"] == 2:
                logits.data[0, 0] = np.nan
        return logits, diag

    monkeypatch.setattr(VisionSmolMamba, "forward", poisoned)
    monkeypatch.setattr(VisionSmolMamba, "__call__", poisoned)
    with pytest.raises(NonFiniteLoss) as info:
        train_loop(tiny_model_cfg(), TrainConfig(epochs=1, warmup_epochs=0, batch_size=8), train)
    assert (info.value.epoch, info.value.batch) == (1, 1)
