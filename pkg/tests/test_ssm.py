import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smolmamba.errors import LambdaTooCloseToZero, NonPositiveDelta, ShapeMismatch
from smolmamba.oracles import scan_reference
from smolmamba.selfcheck import random_ssm, scan_oracle_error
from smolmamba.ssm import LAMBDA_EPS, SsmParams, bidirectional_scan, discretize_zoh, selective_scan


def test_oracle_small_cases():
    assert scan_oracle_error(30, np.random.default_rng(0), max_tokens=40) < 1e-10


@given(st.integers(1, 2), st.integers(1, 6), st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_matches_reference(m, c, s, n, seed):
    rng = np.random.default_rng(seed)
    p = random_ssm(rng, c, s)
    x = rng.normal(size=(m, c, n))
    ref = scan_reference(x, *[t.data for t in p.named().values()])
    np.testing.assert_allclose(selective_scan(x, p).data, ref, atol=1e-10)


@given(st.floats(-30, 30, allow_nan=False))
def test_lambda_strictly_negative(raw):
    p = SsmParams.init(1, 1, dtype=np.float64)
    p.lambda_raw.data[:] = raw
    assert float(p.lam().data[0, 0]) < -LAMBDA_EPS + 1e-12


def test_state_contracts():
    rng = np.random.default_rng(1)
    p = random_ssm(rng, 3, 4)
    x = np.zeros((1, 3, 30))
    x[..., 0] = 1.0
    _, h = selective_scan(x, p, return_states=True)
    norms = np.abs(h).reshape(30, -1).max(axis=1)
    assert np.all(np.diff(norms) <= 1e-15)


def test_causal():
    rng = np.random.default_rng(2)
    p = random_ssm(rng, 2, 3)
    x = rng.normal(size=(1, 2, 8))
    y = selective_scan(x, p).data
    x2 = x.copy()
    x2[..., 5:] = 7.0
    np.testing.assert_array_equal(selective_scan(x2, p).data[..., :5], y[..., :5])


def test_zoh_small_step():
    lam = np.array([-2.0])
    a_bar, b_bar = discretize_zoh(lam, 1e-6, np.array([3.0]))
    assert a_bar[0] == pytest.approx(1.0 - 2e-6)
    assert b_bar[0] == pytest.approx(3e-6, rel=1e-5)


def test_zoh_rejects_bad_inputs():
    with pytest.raises(NonPositiveDelta):
        discretize_zoh(np.array([-1.0]), 0.0, np.array([1.0]))
    with pytest.raises(LambdaTooCloseToZero):
        discretize_zoh(np.array([-1e-6]), 1.0, np.array([1.0]))


def test_shape_check():
    p = SsmParams.init(4, 2)
    with pytest.raises(ShapeMismatch):
        selective_scan(np.zeros((1, 3, 5)), p)


def test_directions_are_independent():
    rng = np.random.default_rng(3)
    pf, pb = random_ssm(rng, 2, 3), random_ssm(rng, 2, 3)
    x = rng.normal(size=(2, 2, 5))
    zf, zb = bidirectional_scan(x, x[..., ::-1].copy(), pf, pb, np.ones((2, 5)))
    np.testing.assert_allclose(zf.data, selective_scan(x, pf).data)
    np.testing.assert_allclose(zb.data, selective_scan(x[..., ::-1].copy(), pb).data)


def test_float32_path_close_to_float64():
    rng = np.random.default_rng(4)
    p64 = random_ssm(rng, 4, 3)
    p32 = SsmParams(*[type(t)(t.data.astype(np.float32), requires_grad=True) for t in p64.named().values()])
    x = rng.normal(size=(2, 4, 16))
    y64 = selective_scan(x, p64).data
    y32 = selective_scan(x.astype(np.float32), p32).data
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, y64, rtol=1e-4, atol=1e-4)


def test_zoh_closed_forms():
    a_bar, b_bar = discretize_zoh(np.array([-1.0]), np.log(2.0), np.array([3.0]))
    assert a_bar[0] == pytest.approx(0.5) and b_bar[0] == pytest.approx(1.5)
    a_bar, b_bar = discretize_zoh(np.array([-2.0]), 1.0, np.array([1.0]))
    assert a_bar[0] == pytest.approx(0.135335, abs=1e-6) and b_bar[0] == pytest.approx(0.432332, abs=1e-6)
    a_bar, b_bar = discretize_zoh(np.array([-1.0]), 1e-8, np.array([2.0]))
    assert b_bar[0] == pytest.approx(2e-8, rel=1e-6)
