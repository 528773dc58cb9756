import json

import pytest
import yaml

from smolmamba.cli import main
from smolmamba.config import dump_resolved, parse_config, parse_override
from smolmamba.errors import MissingFile, ResolutionMismatch, TypeMismatch, UnknownKey


def test_defaults_resolve():
    run = parse_config()
    cfg = run.model_config()
    assert (cfg.image_size, cfg.in_channels) == (16, 1)
    assert run.train_config().seed == 0


def test_nested_and_flat_files(tmp_path):
    nested = tmp_path / "a.yaml"
    nested.write_text("model:\n  depth: 3\ntrain:\n  epochs: 7\n")
    flat = tmp_path / "b.yaml"
    flat.write_text("depth: 3\ntrain.epochs: 7\n")
    a, b = parse_config(str(nested)), parse_config(str(flat))
    assert a.model["depth"] == b.model["depth"] == 3
    assert a.train["epochs"] == b.train["epochs"] == 7


def test_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"phi": 2}}))
    assert parse_config(str(path)).model["phi"] == 2


def test_overrides_win():
    run = parse_config(None, ["model.depth=4", "epochs=3", "warmup_epochs=1", "seed=5"])
    assert run.model["depth"] == 4 and run.train["epochs"] == 3
    assert run.train_config().seed == 5 and run.data_seed() == 5


def test_unknown_key_suggests():
    with pytest.raises(UnknownKey) as info:
        parse_config(None, ["model.dept=3"])
    assert "model.depth" in str(info.value)


def test_unknown_bare_key():
    with pytest.raises(UnknownKey):
        parse_config(None, ["seed_x=1"])
    with pytest.raises(UnknownKey):
        parse_config(None, ["model.seed=1"])


def test_type_checks():
    with pytest.raises(TypeMismatch):
        parse_config(None, ["model.depth=two"])
    with pytest.raises(TypeMismatch):
        parse_config(None, ["model.pruning_enabled=1"])
    assert parse_config(None, ["train.base_lr=1"]).train["base_lr"] == 1.0


def test_missing_file():
    with pytest.raises(MissingFile):
        parse_config("/nonexistent/run.yaml")


def test_geometry_mismatch():
    run = parse_config(None, ["model.image_size=32"])
    with pytest.raises(ResolutionMismatch):
        run.model_config()


def test_override_parsing():
    assert parse_override("a=[1, 2]") == ("a", [1, 2])
    assert parse_override("a=") == ("a", None)
    with pytest.raises(TypeMismatch):
        parse_override("novalue")


def test_resolved_round_trip(tmp_path):
    run = parse_config(None, ["model.phi=2"])
    path = tmp_path / "r.yaml"
    path.write_text(dump_resolved(run))
    again = parse_config(str(path))
    assert again.resolved() == run.resolved()
    assert yaml.safe_load(path.read_text())["model"]["image_size"] == 16


def test_cli_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    code = main(["eval", "--out", str(tmp_path)])
    assert code != 0
    assert json.loads(capsys.readouterr().err)["error"] == "MissingFile"


def test_cli_unknown_key_exit(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "model.dept=3"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "UnknownKey" and err["key"] == "model.dept"


def test_cli_pipeline(tmp_path, capsys):
    common = ["--out", str(tmp_path), "--set", "data.n_train=60", "--set", "data.n_test=20",
              "--set", "model.dim=8", "--set", "model.depth=1", "--set", "model.state_dim=2"]
    assert main(["train", *common, "--set", "train.epochs=1", "--set", "train.warmup_epochs=0"]) == 0
    for name in ("checkpoint.smb", "metrics.csv", "resolved_config.yaml"):
        assert (tmp_path / name).exists()
    assert main(["eval", *common]) == 0
    assert json.loads((tmp_path / "eval.json").read_text())["samples"] == 20
    assert main(["energy", *common]) == 0
    assert main(["energy", *common, "--no-prune"]) == 0
    pruned = json.loads((tmp_path / "energy.json").read_text())
    dense = json.loads((tmp_path / "energy_noprune.json").read_text())
    assert all(b["keep_ratio"] == 1.0 for b in dense["blocks"])
    assert pruned["totals"]["e_non_first"] <= dense["totals"]["e_non_first"]
    assert main(["dump-masks", *common, "--limit", "3"]) == 0
    lines = [json.loads(line) for line in (tmp_path / "masks.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    assert all(set(r) == {"layer", "sample_id", "kept"} for r in lines)
    assert all(0 <= k < 16 for r in lines for k in r["kept"])
