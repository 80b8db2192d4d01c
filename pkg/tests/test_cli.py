import subprocess
import sys

import pytest

from rcpb.cli import SCHEMA, Config, ConfigError, build_parser, main

CONSTRAINED = """\
[system]
n = 100
lam = 0.9

[regime]
kind = constrained
c = 2
mu = 9

[experiment]
horizon = 200
"""

HIGH_MESSAGE = """\
[system]
lam = 0.9

[regime]
kind = high_message
c = 1
idle_rate = 1*n^1

[fluid]
initial = 0.7 0.7 0.7
horizon = 200
sample_dt = 0.05
"""


@pytest.fixture
def cfg(tmp_path):
    def write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os
    for var in list(os.environ):
        if var.startswith("RCPB_"):
            monkeypatch.delenv(var)


def test_simulate_prints_delay(cfg, capsys, tmp_path):
    rc = main(["simulate", "--config", cfg(CONSTRAINED), "--seed", "1", "--output", str(tmp_path / "o")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "delay=" in out and "message_rate=" in out
    assert (tmp_path / "o" / "run_seed1.csv").exists()


def test_simulate_is_byte_identical(cfg, tmp_path):
    text = CONSTRAINED + "trajectory = true\nsample_dt = 1\n"
    path = cfg(text)
    for name in ("a", "b"):
        assert main(["simulate", "--config", path, "--seed", "5", "--output", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["run_seed5.csv", "trajectory_seed5.csv"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_lambda_names_key(cfg, capsys):
    rc = main(["simulate", "--config", cfg(CONSTRAINED.replace("lam = 0.9", "lam = 1.5"))])
    err = capsys.readouterr().err
    assert rc != 0
    assert "lam" in err and "lambda out of range" in err


def test_unknown_key_and_section_rejected(cfg, capsys):
    assert main(["fluid", "--config", cfg(CONSTRAINED + "lamda = 0.5\n")]) != 0
    assert "unknown key 'lamda' in [experiment]" in capsys.readouterr().err
    assert main(["fluid", "--config", cfg(CONSTRAINED + "[extra]\nx = 1\n")]) != 0
    assert "unknown section [extra]" in capsys.readouterr().err


def test_missing_config_file_reports_path(capsys, tmp_path):
    path = str(tmp_path / "nope.ini")
    assert main(["fluid", "--config", path]) != 0
    assert path in capsys.readouterr().err


def test_unwritable_output_reports_path(cfg, capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    rc = main(["fluid", "--config", cfg(CONSTRAINED), "--equilibrium-only", "--output", str(blocker / "x")])
    assert rc != 0
    assert str(blocker / "x") in capsys.readouterr().err


def test_environment_override(cfg, capsys, monkeypatch):
    monkeypatch.setenv("RCPB_SYSTEM_LAM", "0.5")
    monkeypatch.setenv("RCPB_REGIME_MU", "1")
    assert main(["fluid", "--config", cfg(CONSTRAINED), "--equilibrium-only"]) == 0
    assert "P0*=0.333333" in capsys.readouterr().out
    monkeypatch.setenv("RCPB_BOGUS_X", "1")
    assert main(["fluid", "--config", cfg(CONSTRAINED)]) != 0
    assert "RCPB_BOGUS_X" in capsys.readouterr().err


def test_fluid_high_message(cfg, capsys, tmp_path):
    rc = main(["fluid", "--config", cfg(HIGH_MESSAGE), "--output", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "P0*=0 delay=0" in out
    text = (tmp_path / "trajectory.csv").read_text()
    assert ",hit," in text and ",release," in text
    assert "p0_star=0.0" in (tmp_path / "equilibrium.txt").read_text()


def test_fluid_equilibrium_only(cfg, capsys, tmp_path):
    rc = main(["fluid", "--config", cfg(CONSTRAINED), "--equilibrium-only", "--output", str(tmp_path)])
    assert rc == 0
    assert "delay=0.428571" in capsys.readouterr().out
    assert not (tmp_path / "trajectory.csv").exists()


def test_fluid_is_byte_identical(cfg, tmp_path):
    path = cfg(HIGH_MESSAGE)
    for name in ("a", "b"):
        assert main(["fluid", "--config", path, "--output", str(tmp_path / name)]) == 0
    for name in ("trajectory.csv", "equilibrium.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fluid_rejects_baseline_regime(cfg, capsys):
    text = "[system]\nlam = 0.5\n[regime]\nkind = pull\n"
    assert main(["fluid", "--config", cfg(text)]) != 0
    assert "[regime] kind" in capsys.readouterr().err


def test_sweep_figure4_preset(cfg, capsys, tmp_path):
    text = "[system]\nn = 100\n[experiment]\nlambdas = 0.5 0.9\nhorizon = 150\nwarmup = 50\nreplications = 2\n"
    rc = main(["sweep", "--preset", "figure4", "--config", cfg(text), "--output", str(tmp_path)])
    assert rc == 0
    from rcpb.experiments import read_table

    rows = read_table(tmp_path / "summary.csv")
    assert {(r["lam"], r["policy"]) for r in rows} == {
        (lam, p) for lam in (0.5, 0.9) for p in ("rcpb", "power_of_2", "pull")}
    assert len(rows) == 6


def test_sweep_convergence_preset(cfg, capsys, tmp_path):
    text = "[experiment]\npreset = convergence\nns = 100 1000\nhorizon = 5\nreplications = 3\n"
    assert main(["sweep", "--config", cfg(text), "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "n=100 gap=" in out and "n=1000 gap=" in out


def test_sweep_grid(cfg, capsys):
    text = CONSTRAINED + "alphas = 0.9\nreplications = 2\n"
    assert main(["sweep", "--config", cfg(text)]) == 0
    assert "nominal_rate=90" in capsys.readouterr().out


def test_compare_requires_fluid_section(cfg, capsys):
    assert main(["compare", "--config", cfg(CONSTRAINED)]) != 0
    assert "[fluid]" in capsys.readouterr().err


def test_compare_runs(cfg, capsys, tmp_path):
    text = CONSTRAINED + "[fluid]\nhorizon = 5\nsample_dt = 0.5\n"
    assert main(["compare", "--config", cfg(text), "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "fluid_delay=0.428571" in out and "trajectory_gap=" in out
    assert (tmp_path / "compare.csv").exists()


def test_help_lists_flags_and_every_config_key(capsys):
    parser = build_parser()
    for cmd in ("simulate", "fluid", "sweep", "compare"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--output", "--jobs", "--horizon"):
            assert flag in text
        for section, keys in SCHEMA.items():
            for key in keys:
                assert f"[{section}] {key}:" in text
    with pytest.raises(SystemExit):
        parser.parse_args(["fluid", "--help"])
    assert "--equilibrium-only" in capsys.readouterr().out


def test_readme_documents_every_config_key():
    from pathlib import Path

    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    for section, keys in SCHEMA.items():
        for key in keys:
            assert f"`{key}`" in readme, (section, key)
    assert "RCPB_" in readme


def test_config_load_without_file_uses_defaults():
    c = Config.load(None, environ={})
    assert c.system().n == 500
    with pytest.raises(ConfigError):
        Config.load(None, environ={"RCPB_SYSTEM_N": "abc"})


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "rcpb.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "rcpb 0.1.0" in res.stdout
