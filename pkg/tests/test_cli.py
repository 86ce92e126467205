import csv
import json

import numpy as np
import pytest

from tiltmatch import cli
from tiltmatch.config import ConfigError, RunConfig, from_dict

TINY = {
    "maze": {"width": 7, "body_length": 10, "n_prompts": 4},
    "model": {"embed_dim": 8, "hidden_dim": 16, "window": 1},
    "pretrain": {"n_paths": 128, "epochs": 2, "batch_size": 32,
                 "eval_rollouts_per_prompt": 4},
    "dtm": {"c": 1.0, "h": 1.0, "A": 2.0, "batch_size": 8},
    "buffer": {"size": 16, "refresh_interval": 4},
    "rollout": {"steps": 10, "block": 2},
    "finetune": {"total_steps": 8, "eval_rollouts_per_prompt": 4},
    "eval": {"rollouts_per_prompt": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# tiltmatch")
    return list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return str(cfg), root / "run"


def test_info(capsys):
    assert cli.main(["info"]) == 0
    out = capsys.readouterr().out
    assert "suites:" in out and '"schema_version": 1' in out


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dtm": {"cc": 1}}))
    assert cli.main(["info", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"schema_version": 99}))
    assert cli.main(["info", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert cli.main(["info", "--config", str(bad)]) == 2
    assert cli.main(["info", "--config", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(ConfigError):
        from_dict({"rollout": {"order": "sideways"}})


def test_config_round_trip():
    cfg = RunConfig()
    assert from_dict(json.loads(cfg.to_json())) == cfg


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as e:
        cli.main(["verify", "--suite", "nonsense"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["finetune"])
    assert e.value.code == 2


def test_verify_suite(tmp_path, capsys):
    assert cli.main(["verify", "--suite", "esscher", "--out", str(tmp_path)]) == 0
    report = (tmp_path / "verify_report.txt").read_text().splitlines()
    assert report[0].startswith("# tiltmatch")
    assert all(line.endswith("pass") for line in report[1:])
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 0
    assert not (tmp_path / ".lock").exists()


def test_lock_blocks_concurrent_runs(tmp_path, capsys):
    (tmp_path / ".lock").write_text("123")
    assert cli.main(["verify", "--suite", "esscher", "--out", str(tmp_path)]) == 1
    assert "locked" in capsys.readouterr().err


def test_pretrain_outputs(pretrained):
    _, run = pretrained
    rows = read_csv(run / "pretrain_metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert all(r["valid_frac"] for r in rows)
    assert (run / "base.ckpt").exists() and (run / "maze.txt").exists()


def test_pretrain_is_deterministic_and_resumable(pretrained, tmp_path):
    cfg, run = pretrained
    out = tmp_path / "resumed"
    assert cli.main(["pretrain", "--config", cfg, "--out", str(out), "--epochs", "1"]) == 0
    assert cli.main(["pretrain", "--config", cfg, "--out", str(out), "--resume"]) == 0
    for name in ("pretrain_metrics.csv", "base.ckpt"):
        assert (out / name).read_bytes() == (run / name).read_bytes()


def test_eval_matches_pretrain_validity(pretrained, tmp_path):
    cfg, run = pretrained
    out = tmp_path / "eval"
    assert cli.main(["eval", "--config", cfg, "--out", str(out), "--svg",
                     "--checkpoint", str(run / "base.ckpt")]) == 0
    rows = read_csv(out / "eval_metrics.csv")
    assert list(rows[0]) == cli.METRIC_COLUMNS
    assert rows[-1]["prompt_id"] == "all"
    final = read_csv(run / "pretrain_metrics.csv")[-1]
    assert abs(float(rows[-1]["valid_frac"]) - float(final["valid_frac"])) <= 0.02
    dump = read_csv(out / "rollouts.csv")
    assert len(dump) == 4 * 4
    assert set(dump[0]) == {"prompt_id", "path_tokens", "valid", "reward"}
    assert (out / "rollouts.svg").read_text().startswith("<svg")


def test_finetune_outputs(pretrained, tmp_path):
    cfg, run = pretrained
    out = tmp_path / "ft"
    assert cli.main(["finetune", "--config", cfg, "--out", str(out),
                     "--base", str(run / "base.ckpt")]) == 0
    rows = read_csv(out / "phase_logs.csv")
    assert list(rows[0]) == cli.PHASE_COLUMNS
    assert len(rows) == 8 and {r["phase_index"] for r in rows} == {"0", "1"}
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["phase_000.ckpt",
                                                                       "phase_001.ckpt"]
    evals = read_csv(out / "phase_eval.csv")
    assert [float(e["a"]) for e in evals] == [0.0, 1.0, 2.0]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["phases"] == 2 and summary["steps_per_phase"] == 4


def test_matched_compute():
    cfg = RunConfig()
    cfg.dtm.A, cfg.finetune.total_steps = 15.0, 600
    cfg.dtm.h = 2.5
    assert cli.matched_steps(cfg) == (6, 100)
    cfg.dtm.h = 7.5
    assert cli.matched_steps(cfg) == (2, 300)


def test_finetune_divergence_dump(pretrained, tmp_path, monkeypatch, capsys):
    cfg, run = pretrained
    monkeypatch.setattr(cli.MazeEnv, "reward", lambda self, seq: float("nan"))
    out = tmp_path / "nan"
    assert cli.main(["finetune", "--config", cfg, "--out", str(out),
                     "--base", str(run / "base.ckpt")]) == 1
    dump = json.loads((out / "divergence.json").read_text())
    assert dump["phase"] == 0 and dump["step"] == 0
    assert not (out / ".lock").exists()


def test_finetune_rejects_mismatched_checkpoint(pretrained, tmp_path):
    _, run = pretrained
    assert cli.main(["finetune", "--out", str(tmp_path), "--base", str(run / "base.ckpt")]) == 2


def test_build_id_is_stable():
    assert cli.build_id() == cli.build_id()
    assert len(cli.build_id()) == 12
