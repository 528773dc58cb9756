import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smolmamba.energy import (EnergyConstants, LayerOpCount, block_energy, count_macs, measured_energy,
                              report_from_counts, scan_counts, sops, total_energy, write_report)
from smolmamba.data import SyntheticSpec, generate_synthetic
from smolmamba.errors import MissingLayerCount
from smolmamba.model import LayerTrace, ModelConfig, VisionSmolMamba


def test_sops_hand_case():
    assert sops(0.5, 4, 100) == 200


@given(st.floats(0, 1), st.integers(1, 8), st.floats(0, 1e6))
def test_sops_linear(fr, t, macs):
    assert sops(fr, t, macs) == pytest.approx(fr * t * macs)
    assert sops(0.0, t, macs) == 0.0


def test_sops_rejects_bad_rate():
    with pytest.raises(ValueError):
        sops(1.5, 4, 10)


def test_mac_counts():
    assert count_macs("linear", 10, 4, 6) == 240
    assert count_macs("conv2d", 16, 4, 8, kernel=9) == 16 * 4 * 9 * 8
    assert count_macs("conv2d", 16, 8, 8, kernel=9, groups=8) == 16 * 9 * 8
    assert count_macs("dwconv1d", 16, 8, kernel=4) == 16 * 8 * 4
    assert count_macs("scan", 16, 8, state_dim=4) == 512


def test_scan_split():
    trace = LayerTrace("s", "scan", tokens=10, c_in=4, c_out=4, fr=0.5, state_dim=3, block=0)
    proj, mul, ac = scan_counts(trace, 2)
    assert proj.macs == 10 * 4 * 7 and proj.kind == "snn_fc"
    assert mul.macs == 3 * 10 * 4 * 3 and mul.is_mac and mul.ops == mul.macs * 2
    assert ac.macs == 10 * 4 * 3 + 10 * 4 and ac.ops == pytest.approx(0.5 * 2 * ac.macs)


def block_counts(fr=0.5, tokens=10.0):
    return [
        LayerOpCount("a", "snn_fc", 100.0 * tokens, fr, 4, 0),
        LayerOpCount("b", "snn_conv", 20.0 * tokens, fr, 4, 0),
        LayerOpCount("c", "ssm_mul", 30.0 * tokens, 1.0, 4, 0),
        LayerOpCount("d", "ssm_ac", 10.0 * tokens, fr, 4, 0),
    ]


def test_block_energy_formula():
    c = EnergyConstants()
    e = block_energy(block_counts())
    assert e == pytest.approx(4.6 * 30 * 10 * 4 + 0.9 * 0.5 * 4 * (1000 + 200 + 100))
    assert e == pytest.approx(sum(x.energy(c) for x in block_counts()))


def test_fr_zero_leaves_only_mac():
    e = block_energy(block_counts(fr=0.0))
    assert e == pytest.approx(4.6 * 300 * 4)


def test_block_energy_needs_all_kinds():
    with pytest.raises(MissingLayerCount):
        block_energy(block_counts()[:2])


def test_half_tokens_half_ac_energy():
    c = EnergyConstants()
    full = report_from_counts(block_counts(tokens=10.0), [1.0], [0.5], c)
    half = report_from_counts(block_counts(tokens=5.0), [0.5], [0.5], c)
    assert full.e_ac_total / half.e_ac_total == pytest.approx(2.0, rel=1e-9)


def test_constants_order():
    with pytest.raises(ValueError):
        EnergyConstants(e_mac=0.5, e_ac=0.9)


def test_report_totals_and_schema(tmp_path):
    cfg = ModelConfig(depth=2, dim=8, timesteps=4, state_dim=2, num_classes=10, in_channels=1, image_size=16,
                      mlp_ratio=2.0)
    model = VisionSmolMamba(cfg)
    _, test = generate_synthetic(SyntheticSpec(n_train=0, n_test=20))
    rep = measured_energy(model, test, batch_size=8)
    parts = sum(r.energy(rep.constants) for r in rep.layers)
    assert rep.e_total == pytest.approx(parts, rel=1e-6)
    assert rep.e_total == pytest.approx(rep.e_mac_total + rep.e_ac_total, rel=1e-6)
    assert rep.e_non_first < rep.e_total
    assert rep.scaling_index == pytest.approx(float(np.dot(rep.keep_ratios, rep.firing_rates)))
    path = tmp_path / "energy.json"
    write_report(str(path), rep)
    doc = json.loads(path.read_text())
    assert doc["schema_version"] == 1 and doc["units"] == "pJ"
    assert len(doc["blocks"]) == 2
    assert {l["kind"] for l in doc["layers"]} >= {"sps_conv_first", "snn_conv", "snn_fc", "ssm_mul", "ssm_ac"}


def test_total_energy_needs_traces():
    cfg = ModelConfig(depth=1, dim=8, timesteps=2, state_dim=2, in_channels=1, image_size=16, phi=2)
    m = VisionSmolMamba(cfg)
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    _, diag = m(x)
    with pytest.raises(MissingLayerCount):
        total_energy(diag)
    _, diag = m(x, trace=True)
    assert total_energy(diag).e_total > 0


def test_first_conv_counted_once_for_static_input():
    cfg = ModelConfig(depth=1, dim=8, timesteps=4, state_dim=2, in_channels=1, image_size=16, phi=2)
    m = VisionSmolMamba(cfg)
    _, diag = m(np.zeros((1, 1, 16, 16)), trace=True)
    first = [t for t in diag.traces if not t.spiking_input]
    assert len(first) == 1 and first[0].steps == 1
    _, diag = m(np.zeros((1, 4, 1, 16, 16)), trace=True)
    assert [t.steps for t in diag.traces if not t.spiking_input] == [4]
