"""Command-line entry point: train, eval, energy, dump-masks, selfcheck."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig, dump_resolved, parse_config
from .data import Dataset, generate_synthetic, load_cifar10
from .energy import measured_energy, write_report
from .errors import MissingFile, SmolMambaError
from .model import VisionSmolMamba
from .model.checkpoint import atomic_write, load_checkpoint, load_state, model_state
from .selfcheck import run_selfcheck
from .train import evaluate, train_loop

PRUNE_FIELDS = ("pruning_enabled", "z_threshold", "phi", "layer_z_thresholds", "layer_phis", "prune_epsilon")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-prune", action="store_true", help="disable token pruning")
    p.add_argument("--z-threshold", type=float)
    p.add_argument("--phi", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smolmamba", description="Spiking state-space vision model")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train and write checkpoint + metrics.csv")
    _common(p)
    for name, text in (("eval", "top-1 and per-layer keep/firing rates on the test split"),
                       ("energy", "estimated energy report (JSON)"),
                       ("dump-masks", "kept token indices per block and sample (JSON lines)")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", help="defaults to OUT/checkpoint.smb")
        if name == "dump-masks":
            p.add_argument("--limit", type=int, help="only the first N test samples")
    p = sub.add_parser("selfcheck", help="oracle, gradient and invariant suites")
    p.add_argument("--full", action="store_true", help="full-size case counts and an exhaustive gradient check")
    return parser


def resolve(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.out is not None:
        overrides.append(("out_dir", args.out))
    if args.no_prune:
        overrides.append(("model.pruning_enabled", False))
    if args.z_threshold is not None:
        overrides.append(("model.z_threshold", args.z_threshold))
    if args.phi is not None:
        overrides.append(("model.phi", args.phi))
    return parse_config(args.config, overrides)


def echo_config(run: RunConfig) -> None:
    atomic_write(os.path.join(run.out_dir, "resolved_config.yaml"), dump_resolved(run).encode())


def load_data(run: RunConfig) -> tuple[Dataset, Dataset]:
    if run.data["kind"] == "synthetic":
        return generate_synthetic(run.synthetic_spec())
    path, seed = run.data["path"], run.data_seed()
    train = load_cifar10(path, run.data["subset_size"], seed, "train")
    test = load_cifar10(path, run.data["test_subset_size"], seed, "test") if os.path.isdir(path) else train.subset([])
    return train, test


def _load_model(run: RunConfig, checkpoint: str | None) -> tuple[VisionSmolMamba, RunConfig]:
    """Checkpoint architecture with the run's pruning settings applied."""
    path = checkpoint or os.path.join(run.out_dir, "checkpoint.smb")
    if not os.path.isfile(path):
        raise MissingFile(f"no such checkpoint: {path}")
    stored = load_checkpoint(path)
    cfg = stored.cfg.to_dict()
    for key in PRUNE_FIELDS:
        cfg[key] = run.model[key]
    run.model.update({k: v for k, v in cfg.items() if k in run.model})
    model = VisionSmolMamba(run.model_config())
    load_state(model, model_state(stored))
    return model, run


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(run: RunConfig) -> int:
    echo_config(run)
    train, test = load_data(run)

    def log(rec):
        print(f"epoch {rec.epoch} {rec.split} loss={rec.loss:.4f} top1={rec.top1:.4f}", file=sys.stderr)

    result = train_loop(run.model_config(), run.train_config(), train, test, run.out_dir, log)
    _emit({"best_epoch": result.best_epoch, "best_val_top1": result.best_val_top1,
           "test_top1": None if result.test is None else result.test.top1,
           "checkpoint": result.checkpoint_path})
    return 0


def cmd_eval(run: RunConfig, checkpoint: str | None) -> int:
    model, run = _load_model(run, checkpoint)
    echo_config(run)
    _, test = load_data(run)
    res = evaluate(model, test, run.train["eval_batch_size"])
    out = {"top1": res.top1, "loss": res.loss, "keep_ratios": res.keep_ratios,
           "firing_rates": res.firing_rates, "token_counts": res.token_counts, "samples": len(test)}
    atomic_write(os.path.join(run.out_dir, "eval.json"), (json.dumps(out, indent=2, sort_keys=True) + "\n").encode())
    _emit(out)
    return 0


def cmd_energy(run: RunConfig, checkpoint: str | None) -> int:
    try:
        model, run = _load_model(run, checkpoint)
    except MissingFile:
        if checkpoint:
            raise
        model = VisionSmolMamba(run.model_config(), seed=run.seed)
    echo_config(run)
    _, test = load_data(run)
    report = measured_energy(model, test, run.train["eval_batch_size"])
    name = "energy.json" if run.model["pruning_enabled"] else "energy_noprune.json"
    write_report(os.path.join(run.out_dir, name), report)
    _emit({"e_total": report.e_total, "e_mac_total": report.e_mac_total, "e_ac_total": report.e_ac_total,
           "e_non_first": report.e_non_first, "scaling_index": report.scaling_index,
           "report": os.path.join(run.out_dir, name)})
    return 0


def cmd_dump_masks(run: RunConfig, checkpoint: str | None, limit: int | None) -> int:
    model, run = _load_model(run, checkpoint)
    echo_config(run)
    _, test = load_data(run)
    if limit is not None:
        test = test.subset(np.arange(min(limit, len(test))))
    model.eval()
    lines = []
    offset = 0
    for xb, _ in test.batches(run.train["eval_batch_size"]):
        _, diag = model(xb)
        for layer, blk in enumerate(diag.blocks):
            for i, kept in enumerate(blk.grid_indices):
                lines.append(json.dumps({"layer": layer, "sample_id": offset + i, "kept": [int(k) for k in kept]}))
        offset += len(xb)
    path = os.path.join(run.out_dir, "masks.jsonl")
    atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode())
    _emit({"records": len(lines), "path": path})
    return 0


def cmd_selfcheck(full: bool) -> int:
    results = run_selfcheck(quick=not full, log=lambda s: print(s, file=sys.stderr))
    _emit({"suites": {r.name: r.passed for r in results}, "passed": all(r.passed for r in results)})
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(args.full)
        run = resolve(args)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "eval":
            return cmd_eval(run, args.checkpoint)
        if args.command == "energy":
            return cmd_energy(run, args.checkpoint)
        return cmd_dump_masks(run, args.checkpoint, args.limit)
    except SmolMambaError as exc:
        record = {"error": exc.kind, "message": str(exc)}
        for attr in ("epoch", "batch", "key"):
            if getattr(exc, attr, None) is not None:
                record[attr] = getattr(exc, attr)
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
