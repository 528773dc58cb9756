"""Strict run configuration: defaults, YAML/JSON file, then ``key=value`` overrides."""
from __future__ import annotations

import copy
import difflib
import os
from dataclasses import dataclass, fields

import yaml

from .data import SyntheticSpec
from .errors import MissingFile, ResolutionMismatch, TypeMismatch, UnknownKey
from .model import ModelConfig
from .train import TrainConfig

_MODEL_AUTO = ("image_size", "in_channels")   # None means "take it from the dataset"

DATA_DEFAULTS = {
    "kind": "synthetic",
    "path": None,
    "subset_size": None,
    "test_subset_size": None,
    "grid": 4,
    "cell": 4,
    "noise": 0.1,
    "active_cells": 4,
    "n_train": 2000,
    "n_test": 500,
    "seed": None,
}

# fields whose default is None (or a list) and what they accept otherwise
_OPTIONAL = {
    ("model", "image_size"): int,
    ("model", "in_channels"): int,
    ("model", "layer_z_thresholds"): list,
    ("model", "layer_phis"): list,
    ("data", "path"): str,
    ("data", "subset_size"): int,
    ("data", "test_subset_size"): int,
    ("data", "seed"): int,
}


def _section_defaults() -> dict[str, dict]:
    model = {f.name: f.default for f in fields(ModelConfig)}
    for key in _MODEL_AUTO:
        model[key] = None
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    return {"model": model, "train": train, "data": dict(DATA_DEFAULTS)}


TOP_DEFAULTS = {"out_dir": "runs/default", "seed": 0}


@dataclass
class RunConfig:
    model: dict
    train: dict
    data: dict
    out_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "train": dict(self.train), "data": dict(self.data),
                "out_dir": self.out_dir, "seed": self.seed}

    def data_seed(self) -> int:
        return self.seed if self.data["seed"] is None else self.data["seed"]

    def dataset_geometry(self) -> tuple[int, int]:
        """(image_size, in_channels) implied by the data section."""
        if self.data["kind"] == "synthetic":
            return self.data["grid"] * self.data["cell"], 1
        return 32, 3

    def model_config(self) -> ModelConfig:
        values = dict(self.model)
        size, chans = self.dataset_geometry()
        if values["image_size"] is None:
            values["image_size"] = size
        if values["in_channels"] is None:
            values["in_channels"] = chans
        if (values["image_size"], values["in_channels"]) != (size, chans):
            raise ResolutionMismatch(
                f"model expects {values['in_channels']}x{values['image_size']}^2 inputs, "
                f"{self.data['kind']} data provides {chans}x{size}^2")
        return ModelConfig(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def synthetic_spec(self) -> SyntheticSpec:
        d, m = self.data, self.model
        return SyntheticSpec(classes=m["num_classes"], grid=d["grid"], cell=d["cell"], timesteps=m["timesteps"],
                             noise=d["noise"], active_cells=d["active_cells"], n_train=d["n_train"],
                             n_test=d["n_test"], seed=self.data_seed())

    def resolved(self) -> dict:
        """Everything, with dataset-implied model fields filled in."""
        out = self.to_dict()
        cfg = self.model_config()
        out["model"]["image_size"] = cfg.image_size
        out["model"]["in_channels"] = cfg.in_channels
        return out


def _check_type(section: str | None, key: str, value, default):
    name = f"{section}.{key}" if section else key
    optional = _OPTIONAL.get((section, key))
    if optional is not None:
        if value is None:
            return None
        expected = optional
    elif default is None:
        return value
    else:
        expected = type(default)
    if expected is bool:
        if not isinstance(value, bool):
            raise TypeMismatch(f"{name}: expected bool, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"{name}: expected int, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"{name}: expected number, got {value!r}")
        return float(value)
    if expected is list:
        if not isinstance(value, list):
            raise TypeMismatch(f"{name}: expected list, got {value!r}")
        return value
    if not isinstance(value, expected):
        raise TypeMismatch(f"{name}: expected {expected.__name__}, got {value!r}")
    return value


def _unknown(key: str, candidates) -> UnknownKey:
    close = difflib.get_close_matches(key, list(candidates), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return UnknownKey(key, f"unknown config key {key!r}{hint}")


class _Builder:
    def __init__(self):
        self.sections = _section_defaults()
        self.top = dict(TOP_DEFAULTS)

    def all_keys(self) -> list[str]:
        keys = list(self.top)
        for sec, values in self.sections.items():
            keys += [f"{sec}.{k}" for k in values] + list(values)
        return keys

    def set(self, key: str, value) -> None:
        if key in self.top:
            self.top[key] = _check_type(None, key, value, TOP_DEFAULTS[key])
            return
        if "." in key:
            sec, _, name = key.partition(".")
            if sec not in self.sections or name not in self.sections[sec]:
                raise _unknown(key, self.all_keys())
        else:
            owners = [s for s, values in self.sections.items() if key in values]
            if not owners:
                raise _unknown(key, self.all_keys())
            if len(owners) > 1:
                raise UnknownKey(key, f"key {key!r} is ambiguous; use one of "
                                      + ", ".join(f"{s}.{key}" for s in owners))
            sec, name = owners[0], key
        default = _section_defaults()[sec][name]
        self.sections[sec][name] = _check_type(sec, name, value, default)

    def merge(self, doc: dict) -> None:
        for key, value in doc.items():
            key = str(key)
            if key in self.sections:
                if value is None:
                    continue
                if not isinstance(value, dict):
                    raise TypeMismatch(f"section {key!r} must be a mapping")
                for sub, v in value.items():
                    self.set(f"{key}.{sub}", v)
            else:
                self.set(key, value)

    def build(self) -> RunConfig:
        run = RunConfig(model=copy.deepcopy(self.sections["model"]), train=dict(self.sections["train"]),
                        data=dict(self.sections["data"]), **self.top)
        if run.data["kind"] not in ("synthetic", "cifar10"):
            raise TypeMismatch(f"data.kind must be 'synthetic' or 'cifar10', got {run.data['kind']!r}")
        if run.data["kind"] == "cifar10" and not run.data["path"]:
            raise MissingFile("data.kind=cifar10 needs data.path")
        return run


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise TypeMismatch(f"override {item!r} is not key=value")
    key, _, raw = item.partition("=")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def parse_config(path: str | None = None, overrides=()) -> RunConfig:
    """Defaults, then the file (nested sections or flat keys), then overrides.

    Keys may be dotted (``model.depth``) or bare when the name is unique
    across sections (``depth``). Unknown keys raise UnknownKey.
    """
    builder = _Builder()
    if path is not None:
        if not os.path.isfile(path):
            raise MissingFile(f"no such config file: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise TypeMismatch(f"{path}: not a key-value document: {exc}") from None
        if doc is not None:
            if not isinstance(doc, dict):
                raise TypeMismatch(f"{path}: top level must be a mapping")
            builder.merge(doc)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        builder.set(key, value)
    return builder.build()


def dump_resolved(run: RunConfig) -> str:
    return yaml.safe_dump(run.resolved(), sort_keys=True, default_flow_style=False)
