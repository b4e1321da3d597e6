import json
import subprocess
import sys

import pytest

from abl_lab import cli

CFG = ("[dataset]\ntrain_size = 200\ntest_size = 50\n"
       "[training]\nturning_epoch = 1\nmid_stage_epochs = 1\nunlearn_epochs = 1\nhidden = 8\n")


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(CFG)
    return p


def test_experiment_succeeds(cfg_path, tmp_path, capsys):
    code = cli.main(["experiment", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--seed", "3"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["seed"] == 3 and out["status"] == "ok"
    assert (tmp_path / "o/report.json").exists()


def test_train_mode_and_override(cfg_path, tmp_path, capsys):
    code = cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--mode", "standard",
                     "--override", "training.batch_size=32", "--override", "poison.target_label=2"])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["training"]["batch_size"] == 32
    assert report["config"]["poison"]["target_label"] == 2


@pytest.mark.parametrize("argv", [
    ["train", "--override", "training.gamma=oops"],
    ["train", "--override", "nosuch.key=1"],
    ["train", "--config", "/nonexistent/exp.ini"],
    ["sweep"],
    ["train", "--mode", "weird"],
    ["launch"],
    ["train", "--seed", "-1"],
])
def test_config_errors_exit_1(argv, tmp_path, capsys):
    assert cli.main([*argv, "--out", str(tmp_path)]) == 1


def test_runtime_error_exits_2(cfg_path, tmp_path, monkeypatch):
    from abl_lab import harness
    from abl_lab.errors import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss", 3)

    monkeypatch.setattr(harness, "cmd_isolate", boom)
    assert cli.main(["isolate", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2


def test_sweep_exit_codes(tmp_path, monkeypatch, capsys):
    p = tmp_path / "s.ini"
    p.write_text(CFG + "[sweep]\ngamma = 0.5\n")
    assert cli.main(["sweep", "--config", str(p), "--out", str(tmp_path / "ok")]) == 0
    from abl_lab import harness
    from abl_lab.errors import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss", 1)

    monkeypatch.setattr(harness, "defend", boom)
    assert cli.main(["sweep", "--config", str(p), "--out", str(tmp_path / "bad")]) == 2


def test_module_entry_point(cfg_path, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "abl_lab", "isolate", "--config", str(cfg_path),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "isolated_ids.txt").exists()
