from __future__ import annotations

import subprocess
import sys

from dtfl.cli import EXIT_CONFIG, EXIT_OK, main
from dtfl.config import ExperimentSpec, parse_config_text


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 10


def test_print_defaults_round_trips(capsys):
    assert main(["print-defaults"]) == EXIT_OK
    assert parse_config_text(capsys.readouterr().out) == ExperimentSpec()
    assert main(["--print-defaults"]) == EXIT_OK


def test_missing_and_bad_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("scenario.num_nodes = 4\nscenario.num_clusters = 9\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("scenario.wat = 1\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "line 1" in capsys.readouterr().err


def test_no_command_shows_help(capsys):
    assert main([]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().out


def test_small_run(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("scenario.num_nodes = 4\nscenario.num_clusters = 2\nscenario.samples_per_node = 20\n"
                   "scenario.test_samples = 50\nscenario.hidden_dim = 4\nexperiment.repeats = 1\n"
                   "experiment.rounds = 2\nexperiment.mode = async_fixed(2)\n")
    assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out.strip()
    assert out.endswith("run")
    assert (tmp_path / "o" / "run" / "runs" / "pg0.6_k2_seed3.csv").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dtfl.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0
