import json
import os

import pytest

from hloba import cli, config as config_mod

from conftest import small_config


def test_global_flags_before_and_after_subcommand():
    a = cli.build_parser().parse_args(["--seed", "4", "--out", "x", "run-da"])
    b = cli.build_parser().parse_args(["run-da", "--seed", "4", "--out", "x"])
    assert (a.seed, a.out) == (b.seed, b.out) == (4, "x")


def test_rejects_unknown_subcommand():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["plot"])


def test_seed_must_be_u64(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["--out", str(tmp_path), "--seed", "-1", "gradcheck"])


def test_gradcheck(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path), "gradcheck", "--points", "1"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_run_da_then_evaluate(tmp_path, artifact_cache):
    cfg = small_config(experiment={"cycles": 8, "spinup_cycles": 2})
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text(config_mod.dumps(cfg))
    out = tmp_path / "run"
    base = ["--config", str(cfg_path), "--out", str(out), "--cache", artifact_cache]
    assert cli.main(base + ["run-da"]) == 0
    for name in ("cycles.csv", "records.npz", "config.toml", "report.json"):
        assert (out / name).exists()
    first = json.loads((out / "report.json").read_text())
    os.remove(out / "report.json")
    assert cli.main(["--out", str(out), "evaluate"]) == 0
    again = json.loads((out / "report.json").read_text())
    assert again["mean_analysis_wrmse"] == first["mean_analysis_wrmse"]


def test_train_and_estimate(tmp_path, artifact_cache):
    cfg = small_config()
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text(config_mod.dumps(cfg))
    base = ["--config", str(cfg_path), "--out", str(tmp_path), "--cache", str(tmp_path / "cache")]
    assert cli.main(base + ["train-ae"]) == 0
    assert cli.main(base + ["train-o2l"]) == 0
    assert cli.main(base + ["estimate-cov"]) == 0
    doc = json.loads((tmp_path / "covariances.json").read_text())
    assert doc["Bz_clim"]["kind"] == "diagonal"
