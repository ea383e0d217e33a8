import json
import subprocess
import sys

import pytest

from friendq import cli, controllers as C


def run_cli(*args):
    return cli.main([str(a) for a in args])


def write_tiny_config(path, **extra):
    lines = ["[network]", "sim_duration = 120", "arrival_rate = 0.08",
             "[schedule]", "hidden = 8", "batch_size = 4",
             "[experiment]", "episodes = 2"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_complexity(capsys):
    assert run_cli("complexity", "--max-n", 4) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "junction_count,centralized_actions,friend_actions"
    assert out[-1] == "4,1296,24"


def test_complexity_bad_n(capsys):
    assert run_cli("complexity", "--max-n", 0) == 1


def test_run_and_plot(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path / "c.ini")
    out = tmp_path / "r"
    rc = run_cli("run", "--kinds", "fixed,friend", "--junctions", "2", "--seeds", "0,1",
                 "--config", cfg, "--out", out)
    assert rc == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == [
        "fixed_n2_s0", "fixed_n2_s1", "friend_n2_s0", "friend_n2_s1"]
    assert "friend_n2_s1" in capsys.readouterr().out
    assert run_cli("plot", "--dir", out) == 0
    assert (out / "learning_curves_n2.svg").exists()


def test_run_from_manifest(tmp_path):
    cfg = write_tiny_config(tmp_path / "c.ini", kinds="fixed", junctions=1)
    assert run_cli("run", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run_cli("run", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_run_invalid_spec(tmp_path, capsys):
    assert run_cli("run", "--kinds", "maxplus", "--out", tmp_path / "x") == 1
    assert run_cli("run", "--episodes", "0", "--out", tmp_path / "x") == 1
    assert "invalid spec" in capsys.readouterr().err


def test_run_partial_failure(tmp_path, monkeypatch):
    real = C.train

    def flaky(kind, *a, **kw):
        if C.ControllerKind.parse(kind) is C.ControllerKind.FRIEND_DQN:
            raise RuntimeError("diverged")
        return real(kind, *a, **kw)

    monkeypatch.setattr(C, "train", flaky)
    cfg = write_tiny_config(tmp_path / "c.ini")
    rc = run_cli("run", "--kinds", "fixed,friend", "--junctions", "2", "--config", cfg,
                 "--out", tmp_path / "r")
    assert rc == 2
    m = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert list(m["failures"]) == ["friend_n2_s0"]


def test_run_uses_env_out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("FRIENDQ_OUT", str(tmp_path / "root"))
    cfg = write_tiny_config(tmp_path / "c.ini", kinds="fixed", junctions=1)
    assert run_cli("run", "--config", cfg) == 0
    assert (tmp_path / "root" / "run" / "fixed_n1_s0" / "metrics.csv").exists()


def test_plot_empty_dir(tmp_path, capsys):
    assert run_cli("plot", "--dir", tmp_path) == 1
    assert "no results" in capsys.readouterr().err


def test_validate(tmp_path, capsys):
    good = write_tiny_config(tmp_path / "ok.ini")
    assert run_cli("validate", "--config", good) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nlane_length = -1\n")
    assert run_cli("validate", "--config", bad) == 1
    assert "invalid" in capsys.readouterr().err
    assert run_cli("validate", "--config", tmp_path / "missing.ini") == 1


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        run_cli()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "friendq.cli", "complexity", "--max-n", "2"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.splitlines()[-1] == "2,36,12"
