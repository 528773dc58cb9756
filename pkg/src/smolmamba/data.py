"""Datasets: seeded synthetic spatio-temporal templates and CIFAR-10 binary batches."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import CorruptRecord, LabelOutOfRange, MissingFile

CIFAR_RECORD = 3073


@dataclass
class Dataset:
    x: np.ndarray        # (n, C, H, W) static images or (n, T, C, H, W) per-step drive
    y: np.ndarray        # (n,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], self.y[index])

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded (train, held-out) split; ``fraction`` goes to the held-out part."""
        order = np.random.default_rng([seed, 7]).permutation(len(self))
        n_hold = int(round(fraction * len(self)))
        return self.subset(np.sort(order[n_hold:])), self.subset(np.sort(order[:n_hold]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    grid: int = 4            # cells per side; one token per cell after a /4 stem
    cell: int = 4            # pixels per cell side
    timesteps: int = 4
    noise: float = 0.1       # per-pixel, per-step flip probability
    active_cells: int = 4
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.timesteps < 2:
            raise ValueError("synthetic templates need T >= 2 to carry timing")
        if not 1 <= self.active_cells < self.grid * self.grid:
            raise ValueError("active_cells must leave at least one inactive cell")
        n_subsets = -(-self.classes // 2)
        if n_subsets > comb(self.grid * self.grid, self.active_cells):
            raise ValueError("not enough distinct cell subsets for the requested classes")

    @property
    def image_size(self) -> int:
        return self.grid * self.cell

    @property
    def onsets(self) -> tuple[int, int]:
        """1-based onset steps of the early and late timing variants."""
        return 1, self.timesteps // 2 + 1


def synthetic_templates(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free class templates, (M, T, 1, H, W) in {0, 1}.

    Class m uses cell subset m // 2 and timing m % 2: the early variant is
    active from step 1, the late one from step T // 2 + 1, both until T.
    """
    rng = np.random.default_rng([spec.seed, 0])
    cells = spec.grid * spec.grid
    subsets: list[tuple[int, ...]] = []
    while len(subsets) < -(-spec.classes // 2):
        pick = tuple(sorted(rng.choice(cells, size=spec.active_cells, replace=False).tolist()))
        if pick not in subsets:
            subsets.append(pick)
    out = np.zeros((spec.classes, spec.timesteps, 1, spec.image_size, spec.image_size), dtype=np.float32)
    for m in range(spec.classes):
        onset = spec.onsets[m % 2]
        for cell_id in subsets[m // 2]:
            r, c = divmod(cell_id, spec.grid)
            out[m, onset - 1:, 0, r * spec.cell:(r + 1) * spec.cell, c * spec.cell:(c + 1) * spec.cell] = 1.0
    return out


def _sample(spec: SyntheticSpec, templates: np.ndarray, n: int, stream: int) -> Dataset:
    rng = np.random.default_rng([spec.seed, stream])
    labels = rng.permutation(np.arange(n) % spec.classes).astype(np.int64)
    x = templates[labels].copy()
    if spec.noise > 0 and n:
        flips = rng.random(x.shape) < spec.noise
        x[flips] = 1.0 - x[flips]
    return Dataset(x, labels)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """(train, test) datasets; a pure function of ``spec``."""
    templates = synthetic_templates(spec)
    return _sample(spec, templates, spec.n_train, 1), _sample(spec, templates, spec.n_test, 2)


def nearest_template(x: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Hamming nearest-template labels; the separability oracle."""
    flat_x = x.reshape(len(x), -1)
    flat_t = templates.reshape(len(templates), -1)
    dist = np.abs(flat_x[:, None, :] - flat_t[None, :, :]).sum(axis=2)
    return np.argmin(dist, axis=1)


def read_cifar_file(path: str) -> Dataset:
    """One CIFAR-10 binary batch: 3073-byte records, label byte then CHW pixels."""
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise CorruptRecord(f"{path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise LabelOutOfRange(f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(pixels, labels)


def load_cifar10(path: str, subset_size: int | None = None, seed: int = 0, split: str = "train") -> Dataset:
    """Load CIFAR-10 from a batch file or a directory of ``*_batch*.bin`` files.

    A seeded subset of ``subset_size`` records is drawn when requested.
    """
    if os.path.isdir(path):
        pattern = "test_batch*.bin" if split == "test" else "data_batch_*.bin"
        files = sorted(glob.glob(os.path.join(path, pattern)))
        if not files:
            raise MissingFile(f"no {pattern} files under {path}")
    elif os.path.isfile(path):
        files = [path]
    else:
        raise MissingFile(f"no such file or directory: {path}")
    parts = [read_cifar_file(f) for f in files]
    data = Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))
    if subset_size is not None and subset_size < len(data):
        index = np.sort(np.random.default_rng([seed, 3]).choice(len(data), size=subset_size, replace=False))
        data = data.subset(index)
    return data
