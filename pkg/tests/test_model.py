import numpy as np
import pytest

from smolmamba.errors import EmptyMask, ResolutionMismatch, ShapeMismatch
from smolmamba.model import BatchNorm, ModelConfig, VisionSmolMamba, mgap, reverse_index, reverser
from smolmamba.pruner import TokenMask
from smolmamba.selfcheck import mask_invariant_violations, model_gradient_error, pad_invariance_error


def small_cfg(**kw):
    base = dict(depth=2, dim=16, timesteps=4, state_dim=4, num_classes=5, in_channels=1, image_size=16,
                mlp_ratio=2.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def model():
    m = VisionSmolMamba(small_cfg(), seed=0)
    m.eval()
    return m


def images(n=3, seed=0, size=16, chans=1):
    return np.random.default_rng(seed).random((n, chans, size, size))


def test_logit_shape_and_diagnostics(model):
    logits, diag = model(images())
    assert logits.shape == (3, 5)
    assert len(diag.blocks) == 2
    for blk in diag.blocks:
        assert 0 < blk.keep_ratio <= 1
        assert 0 <= blk.firing_rate <= 1
        assert np.all(blk.tokens_out <= blk.tokens_in)


def test_cifar_geometry_gives_64_tokens():
    cfg = ModelConfig(depth=1, dim=8, timesteps=2, state_dim=2, in_channels=3, image_size=32, phi=2)
    m = VisionSmolMamba(cfg)
    x = m.embed(np.random.default_rng(0).random((1, 3, 32, 32)))
    assert x.shape == (1, 2, 8, 64)


def test_stem_output_binary_and_clamped(model):
    x = model.embed(images()).data
    assert set(np.unique(x)) <= {0.0, 1.0}


def test_eval_outputs_independent_of_batch_company(model):
    a = images(1, seed=5)
    batch = np.concatenate([a, images(3, seed=6), a])
    logits, _ = model(batch)
    alone, _ = model(a)
    np.testing.assert_allclose(logits.data[0], logits.data[4], atol=1e-12)
    np.testing.assert_allclose(logits.data[0], alone.data[0], atol=1e-10)


def test_no_prune_keeps_every_token():
    m = VisionSmolMamba(small_cfg(pruning_enabled=False))
    _, diag = m(images())
    for blk in diag.blocks:
        assert blk.keep_ratio == 1.0
        assert np.all(blk.tokens_out == 16)


def test_grid_indices_compose():
    m = VisionSmolMamba(small_cfg(depth=3), seed=1)
    m.eval()
    _, diag = m(images(2, seed=2))
    for b in range(2):
        prev = np.arange(16)
        for blk in diag.blocks:
            np.testing.assert_array_equal(blk.grid_indices[b], prev[blk.kept_indices[b]])
            prev = blk.grid_indices[b]


def test_pruned_tokens_do_not_affect_output(monkeypatch):
    import smolmamba.model.network as network
    from smolmamba.pruner import reindex_and_pad

    keep = np.zeros((1, 16), dtype=np.uint8)
    keep[0, [1, 4, 5, 11]] = 1
    # fix the decision so only the data path is under test
    monkeypatch.setattr(network, "sst_tp", lambda o, thresholds, mask=None: reindex_and_pad(o, keep))
    m = VisionSmolMamba(small_cfg(depth=1), seed=3)
    m.eval()
    x0 = m.embed(images(1, seed=4)).data
    out, mask, _ = m.blocks[0](x0, TokenMask.full(1, 16))
    dropped = np.flatnonzero(keep[0] == 0)
    x1 = x0.copy()
    x1[..., dropped] = np.random.default_rng(0).random(x1[..., dropped].shape)
    out1, _, _ = m.blocks[0](x1, TokenMask.full(1, 16))
    assert mask.kept_counts.tolist() == [4]
    np.testing.assert_array_equal(out1.data, out.data)


def test_temporal_input_accepted():
    m = VisionSmolMamba(small_cfg())
    x = np.random.default_rng(0).random((2, 4, 1, 16, 16))
    logits, _ = m(x)
    assert logits.shape == (2, 5)
    with pytest.raises(ShapeMismatch):
        m(np.zeros((2, 3, 1, 16, 16)))


def test_resolution_checks():
    with pytest.raises(ResolutionMismatch):
        small_cfg(image_size=18)
    m = VisionSmolMamba(small_cfg())
    with pytest.raises(ShapeMismatch):
        m(np.zeros((1, 3, 16, 16)))


def test_deterministic_init():
    a = VisionSmolMamba(small_cfg(), seed=7).named_parameters()
    b = VisionSmolMamba(small_cfg(), seed=7).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_directions_have_separate_parameters():
    names = VisionSmolMamba(small_cfg()).named_parameters()
    fwd = {k for k in names if ".ssm_f." in k or "fwd" in k}
    bwd = {k for k in names if ".ssm_b." in k or "bwd" in k}
    assert fwd and bwd and not fwd & bwd


def test_gradients_match_finite_differences():
    err, _ = model_gradient_error(max_entries=4)
    assert err < 1e-3


def test_pad_invariance():
    assert pad_invariance_error(np.random.default_rng(0)) < 1e-10


def test_mask_invariants():
    assert mask_invariant_violations() == []


def test_mgap_literal_formula():
    x = np.zeros((1, 2, 1, 3))
    x[0, :, 0, 0] = [1.0, 3.0]
    x[0, :, 0, 1] = [2.0, 2.0]
    mask = TokenMask.from_counts([2])
    mask.bits = np.array([[1, 1, 0]], dtype=np.uint8)
    x[0, :, 0, 2] = 50.0     # padded slot is ignored
    out = mgap(x, mask).data
    # sum over (t, valid n) = 8, divided by 2 valid tokens
    assert out[0, 0] == pytest.approx(4.0)


def test_mgap_empty_mask():
    mask = TokenMask(np.zeros((1, 2), dtype=np.uint8), np.array([0]), [np.array([], dtype=int)])
    with pytest.raises(EmptyMask):
        mgap(np.ones((1, 1, 1, 2)), mask)


def test_masked_batchnorm_uses_valid_positions_only():
    bn = BatchNorm(1, np.float64)
    x = np.array([[[[1.0, 3.0, 100.0]]]])        # (B=1, T=1, C=1, N=3), last slot padded
    mask = TokenMask.from_counts([2])
    mask.bits = np.array([[1, 1, 0]], dtype=np.uint8)
    out = bn(x, mask).data
    np.testing.assert_allclose(out[0, 0, 0, :2], [-1.0, 1.0], atol=1e-4)
    assert out[0, 0, 0, 2] == 0.0
    np.testing.assert_allclose(bn.buffers["running_mean"], [0.2])
    np.testing.assert_allclose(bn.buffers["running_var"], [0.9 + 0.1 * 1.0])


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm(2, np.float64, axis=1)
    bn.buffers["running_mean"] = np.array([1.0, -1.0])
    bn.buffers["running_var"] = np.array([4.0, 1.0])
    bn.eval()
    out = bn(np.array([[3.0, 0.0]])).data
    np.testing.assert_allclose(out, [[2.0 / np.sqrt(4 + 1e-5), 1.0 / np.sqrt(1 + 1e-5)]])


def test_reverser_valid_prefix():
    mask = TokenMask.from_counts([3, 2])
    np.testing.assert_array_equal(reverse_index(mask), [[2, 1, 0], [1, 0, 2]])
    x = np.arange(6, dtype=float).reshape(2, 1, 1, 3) * np.array([1, 1, 1.0])
    x[1, ..., 2] = 0.0
    out = reverser(x, mask).data
    np.testing.assert_array_equal(out[0, 0, 0], [2, 1, 0])
    np.testing.assert_array_equal(out[1, 0, 0], [4, 3, 0])
