from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from tjunction.cli import main
from tjunction.manifest import read_manifest
from tjunction.train import RunConfig


@pytest.fixture()
def tiny_config_file(tmp_path):
    cfg = RunConfig()
    cfg.train.n_envs = 2
    cfg.train.rollout_steps = 16
    cfg.train.minibatch_size = 64
    cfg.stage_steps = {"ego-initial": 64, "guiding": 64, "meta": 64, "ego-final": 64}
    cfg.traj_pretrain.collect_steps = 200
    cfg.traj_pretrain.updates = 10
    cfg.eval.kl_samples = 64
    cfg.eval.sweep_steps = 64
    cfg.eval.cross_episodes = 2
    cfg.eval.cross_seeds = 2
    cfg.validate()
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return p


def test_validate_config_ok(capsys):
    assert main(["validate-config", "--config", "configs/default.json"]) == 0
    assert capsys.readouterr().out.startswith("config-ok:")


def test_validate_config_invalid(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"gamma": 2.0}}))
    assert main(["validate-config", "--config", str(bad)]) == 3
    assert capsys.readouterr().err.startswith("invalid-config:")


def test_validate_config_missing_file(tmp_path, capsys):
    assert main(["validate-config", "--config", str(tmp_path / "nope.json")]) == 3


def test_unknown_command_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert capsys.readouterr().err.startswith("usage-error:")


def test_train_without_prerequisite_exits_4(tiny_config_file, tmp_path, capsys):
    code = main(
        ["train", "meta", "--config", str(tiny_config_file), "--seed", "1", "--out", str(tmp_path / "m")]
    )
    assert code == 4
    err = capsys.readouterr().err
    assert err.startswith("missing-prerequisite:")
    assert "ego-initial" in err or "guiding" in err


def test_train_eval_replay_roundtrip(tiny_config_file, tmp_path, capsys):
    cfgf = str(tiny_config_file)
    ei = tmp_path / "ei"
    assert main(["train", "ego-initial", "--config", cfgf, "--seed", "3", "--out", str(ei)]) == 0
    assert (ei / "checkpoint.json").exists() and (ei / "metrics.csv").exists()
    man = read_manifest(ei)
    assert man["stage"] == "ego-initial" and man["seed"] == 3

    gd = tmp_path / "gd"
    assert main(
        ["train", "guiding", "--config", cfgf, "--seed", "4", "--out", str(gd),
         "--ego-initial", str(ei / "checkpoint.json")]
    ) == 0
    mt = tmp_path / "mt"
    assert main(
        ["train", "meta", "--config", cfgf, "--seed", "5", "--out", str(mt),
         "--ego-initial", str(ei / "checkpoint.json"), "--guiding", str(gd / "checkpoint.json")]
    ) == 0
    ef = tmp_path / "ef"
    assert main(
        ["train", "ego-final", "--config", cfgf, "--seed", "6", "--out", str(ef),
         "--ego-initial", str(ei / "checkpoint.json"), "--meta", str(mt / "checkpoint.json")]
    ) == 0
    assert (ef / "trajae.json").exists()

    # eval cross with both egos and both meta families; 2 episodes, 2 seeds
    cross = tmp_path / "cross"
    assert main(
        ["eval", "cross", "--config", cfgf, "--seed", "7", "--out", str(cross),
         "--ego", str(ei / "checkpoint.json"), "--ego-final", str(ef / "checkpoint.json"),
         "--social", str(mt / "checkpoint.json"), "--episodes", "2", "--seeds", "2",
         "--archive-traces", "1"]
    ) == 0
    doc = json.loads((cross / "report.json").read_text())
    # 2 egos x 3 families (idm, meta-rl, meta-rl-u33) x 2 seeds
    assert len(doc["cells"]) == 12
    for cell in doc["cells"]:
        assert cell["success"] + cell["collision"] + cell["timeout"] == cell["episodes"]
    with open(cross / "cells.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    for row in rows:
        total = int(row["success"]) + int(row["collision"]) + int(row["timeout"])
        assert total == int(row["episodes"])

    traces = sorted((cross / "traces").rglob("*.jsonl"))
    assert traces
    # replay with verification must reproduce the trace byte for byte
    assert main(["replay", str(traces[0]), "--verify"]) == 0
    out = capsys.readouterr().out
    assert "byte-identical" in out


def test_eval_kl_and_sweep_and_probe(tiny_config_file, tmp_path):
    cfgf = str(tiny_config_file)
    ei = tmp_path / "ei"
    gd = tmp_path / "gd"
    mt = tmp_path / "mt"
    assert main(["train", "ego-initial", "--config", cfgf, "--seed", "3", "--out", str(ei)]) == 0
    assert main(["train", "guiding", "--config", cfgf, "--seed", "4", "--out", str(gd),
                 "--ego-initial", str(ei / "checkpoint.json")]) == 0
    assert main(["train", "meta", "--config", cfgf, "--seed", "5", "--out", str(mt),
                 "--ego-initial", str(ei / "checkpoint.json"), "--guiding", str(gd / "checkpoint.json")]) == 0

    kl = tmp_path / "kl"
    assert main(["eval", "kl", "--config", cfgf, "--seed", "8", "--out", str(kl),
                 "--ego", str(ei / "checkpoint.json"), "--social", str(mt / "checkpoint.json"),
                 "--samples", "64"]) == 0
    doc = json.loads((kl / "report.json").read_text())
    assert len(doc["kl_curves"]) == 9  # grid at 0.5 intervals over [-1, 3]
    assert all(row["kl"] >= 0 for row in doc["kl_curves"])
    assert all(row["low_sample_warning"] for row in doc["kl_curves"])  # 64 < 1000

    sw = tmp_path / "sw"
    assert main(["eval", "sweep", "--config", cfgf, "--seed", "9", "--out", str(sw),
                 "--ego", str(ei / "checkpoint.json"), "--social", str(mt / "checkpoint.json"),
                 "--samples", "64"]) == 0
    doc = json.loads((sw / "report.json").read_text())
    assert len(doc["reward_curves"]) == 9

    pr = tmp_path / "pr"
    assert main(["eval", "probe", "--config", cfgf, "--seed", "10", "--out", str(pr),
                 "--social", str(mt / "checkpoint.json")]) == 0
    doc = json.loads((pr / "report.json").read_text())
    assert len(doc["probe"]) == 9 + 5
    assert all(row["desired_speed"] in (0.0, 0.5, 3.0) for row in doc["probe"])


def test_eval_missing_checkpoint_exits_4(tiny_config_file, tmp_path, capsys):
    code = main(["eval", "kl", "--config", str(tiny_config_file), "--out", str(tmp_path / "x"),
                 "--ego", str(tmp_path / "missing.json"), "--social", str(tmp_path / "missing2.json")])
    assert code == 4


def test_rerun_from_manifest_byte_identical(tiny_config_file, tmp_path):
    cfgf = str(tiny_config_file)
    a = tmp_path / "a"
    assert main(["train", "ego-initial", "--config", cfgf, "--seed", "11", "--out", str(a)]) == 0
    b = tmp_path / "b"
    assert main(["train", "ego-initial", "--from-manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert read_manifest(a)["config_hash"] == read_manifest(b)["config_hash"]


def test_default_out_root_env(tiny_config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("TJUNCTION_RUN_ROOT", str(tmp_path / "root"))
    assert main(["train", "ego-initial", "--config", str(tiny_config_file), "--seed", "12"]) == 0
    assert (tmp_path / "root" / "train-ego-initial-seed12" / "checkpoint.json").exists()
