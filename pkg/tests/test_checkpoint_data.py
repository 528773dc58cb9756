import os

import numpy as np
import pytest

from smolmamba.data import (CIFAR_RECORD, Dataset, SyntheticSpec, generate_synthetic, load_cifar10,
                            nearest_template, read_cifar_file, synthetic_templates)
from smolmamba.errors import CheckpointFormatError, CorruptRecord, LabelOutOfRange, MissingFile
from smolmamba.model import ModelConfig, VisionSmolMamba
from smolmamba.model.checkpoint import decode, encode, load_checkpoint, model_state, save_checkpoint


def cfg():
    return ModelConfig(depth=1, dim=8, timesteps=2, state_dim=2, num_classes=3, in_channels=1, image_size=16,
                       phi=2)


def test_checkpoint_round_trip(tmp_path):
    m = VisionSmolMamba(cfg(), seed=3)
    m.blocks[0].bn_in.buffers["running_mean"] += 0.25
    path = tmp_path / "m.smb"
    save_checkpoint(str(path), m)
    back = load_checkpoint(str(path))
    assert back.cfg == m.cfg
    a, b = model_state(m), model_state(back)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].astype(np.float32), b[k])
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    m.eval(), back.eval()
    np.testing.assert_allclose(m(x)[0].data, back(x)[0].data, atol=1e-5)


def test_checkpoint_rejects_truncation_and_garbage(tmp_path):
    blob = encode(cfg().to_dict(), model_state(VisionSmolMamba(cfg())))
    with pytest.raises(CheckpointFormatError):
        decode(blob[:-3])
    with pytest.raises(CheckpointFormatError):
        decode(blob + b"x")
    with pytest.raises(CheckpointFormatError):
        decode(b"NOTMAGIC" + blob[8:])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingFile):
        load_checkpoint(str(tmp_path / "absent.smb"))


def write_records(path, labels, fill=7):
    recs = np.full((len(labels), CIFAR_RECORD), fill, dtype=np.uint8)
    recs[:, 0] = labels
    recs.tofile(path)


def test_cifar_framing(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    write_records(path, [3, 9, 0], fill=255)
    data = read_cifar_file(str(path))
    assert data.x.shape == (3, 3, 32, 32)
    assert data.y.tolist() == [3, 9, 0]
    assert data.x.max() == 1.0


def test_cifar_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * (CIFAR_RECORD + 1))
    with pytest.raises(CorruptRecord):
        read_cifar_file(str(path))
    write_records(path, [2, 10])
    with pytest.raises(LabelOutOfRange):
        read_cifar_file(str(path))
    with pytest.raises(MissingFile):
        load_cifar10(str(tmp_path / "nowhere"))


def test_cifar_directory_and_subset(tmp_path):
    write_records(tmp_path / "data_batch_1.bin", list(range(10)))
    write_records(tmp_path / "data_batch_2.bin", list(range(10)))
    write_records(tmp_path / "test_batch.bin", [1, 2])
    train = load_cifar10(str(tmp_path), subset_size=5, seed=1)
    assert len(train) == 5
    assert len(load_cifar10(str(tmp_path), split="test")) == 2
    again = load_cifar10(str(tmp_path), subset_size=5, seed=1)
    np.testing.assert_array_equal(train.y, again.y)


def test_synthetic_deterministic_and_balanced():
    spec = SyntheticSpec(n_train=200, n_test=50)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.bincount(a.y).tolist() == [20] * 10
    assert a.x.shape == (200, 4, 1, 16, 16)


def test_synthetic_templates_layout():
    spec = SyntheticSpec()
    t = synthetic_templates(spec)
    early, late = spec.onsets
    assert (early, late) == (1, 3)
    # class pairs share cells, differ in onset
    np.testing.assert_array_equal(t[0, -1], t[1, -1])
    assert t[0, 0].sum() == 4 * 16 and t[1, 0].sum() == 0
    assert t[1, late - 1].sum() == 4 * 16
    assert len({t[m, -1].tobytes() for m in range(0, 10, 2)}) == 5


def test_synthetic_is_separable():
    spec = SyntheticSpec(n_train=10, n_test=500)
    _, test = generate_synthetic(spec)
    pred = nearest_template(test.x, synthetic_templates(spec))
    assert (pred == test.y).mean() > 0.99


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(noise=0.6)
    with pytest.raises(ValueError):
        SyntheticSpec(timesteps=1)


def test_split_and_batches():
    d = Dataset(np.arange(20, dtype=float)[:, None], np.arange(20))
    fit, hold = d.split(0.1, seed=0)
    assert len(hold) == 2 and len(fit) == 18
    assert not set(fit.y) & set(hold.y)
    sizes = [len(yb) for _, yb in d.batches(8)]
    assert sizes == [8, 8, 4]
