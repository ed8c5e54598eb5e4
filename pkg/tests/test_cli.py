from __future__ import annotations

import csv
import json

import pytest

from carpet_sim import cli
from carpet_sim.cli import ConfigError, RunConfig, load_config, parse_config_text, parse_exit_set, run_command
from carpet_sim.estimators import AllExits, BallSet, BoxSet, CellSet


def test_defaults():
    cfg = load_config()
    assert (cfg.alpha, cfg.dw, cfg.level, cfg.n_samples, cfg.seed) == (0.5, 2.097, 5, 10**5, None)


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nalpha = 0.3\nlevel=4\nsamples = 2e4\nseed = 5\n\n")
    cfg = load_config(path, {"level": 6, "seed": None})
    assert (cfg.alpha, cfg.level, cfg.n_samples, cfg.seed) == (0.3, 6, 20000, 5)


@pytest.mark.parametrize("text", ["colour = red", "alpha 0.3", "level = five"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("kw", [{"alpha": 2.0}, {"alpha": 0.0}, {"level": 11}, {"n_samples": 0}, {"threads": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_hash_excludes_threads_and_out():
    a = RunConfig(seed=1, threads=1, out="a.json").hashable()
    b = RunConfig(seed=1, threads=8, out="b.json").hashable()
    assert a == b


def test_parse_exit_set():
    assert isinstance(parse_exit_set("all"), AllExits)
    assert isinstance(parse_exit_set("ball:0,0,1/9"), BallSet)
    assert isinstance(parse_exit_set("box:1,inf,-inf,inf"), BoxSet)
    assert isinstance(parse_exit_set("cells:1:3,0;3,1"), CellSet)
    with pytest.raises(ConfigError):
        parse_exit_set("disc:0,0")


def test_usage_errors_exit_2(capsys):
    assert run_command([]) == 2
    assert run_command(["estimate", "hm", "--bogus"]) == 2
    assert run_command(["estimate", "hm", "--alpha", "3"]) == 2
    assert run_command(["verify", "lemma10"]) == 2
    assert "seed" in capsys.readouterr().err


def test_hypothesis_violation_exit_2(capsys):
    assert run_command(["verify", "bhp", "--alpha", "0.9", "--seed", "1"]) == 2
    assert "hypothesis violated: alpha=0.9 is not below 2(d-1)/dw=0.8515" in capsys.readouterr().err


def test_runtime_error_exit_3(monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("non-exit")

    monkeypatch.setattr(cli, "est_exit_time", boom)
    assert run_command(["estimate", "exit", "--level", "2", "--samples", "10"]) == 3
    assert "non-exit" in capsys.readouterr().err


def test_region_build_and_show(tmp_path, capsys):
    path = tmp_path / "ell.json"
    assert run_command(["region", "build", "--cells", "0,0;1,0;0,1", "--cell-level", "1", "--out", str(path)]) == 0
    assert run_command(["region", "show", "--region", str(path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["cell_level"] == 1
    assert run_command(["region", "show", "--region", str(tmp_path / "missing.json")]) == 2


def test_model_build(capsys):
    assert run_command(["model", "build", "--level", "2"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["explicit_states"] > 64
    assert info["hypothesis_flags"]["alpha_lt_2(d-1)/dw"]


def test_estimate_all_exits_and_plot(tmp_path, capsys):
    plot = tmp_path / "hm.csv"
    out = tmp_path / "hm.json"
    code = run_command(["estimate", "hm", "--set", "all", "--level", "3", "--samples", "500", "--seed", "1",
                        "--emit-plot", str(plot), "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out.startswith("hm = 1 ")
    rows = list(csv.reader(plot.open()))
    assert rows[0] == ["series", "x", "value", "stderr"] and float(rows[1][2]) == 1.0
    assert json.loads(out.read_text())["value"] == 1.0


def test_estimate_green_and_exit(capsys):
    assert run_command(["estimate", "green", "--level", "2", "--samples", "500", "--start", "2,2"]) == 0
    assert run_command(["estimate", "exit", "--level", "2", "--samples", "500"]) == 0
    out = capsys.readouterr().out
    assert "green = " in out and "exit = " in out


def test_oracle_solve_uses_fixture_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CARPET_SIM_FIXTURES", str(tmp_path / "env"))
    assert run_command(["oracle", "solve", "--level", "1"]) == 0
    assert len(list((tmp_path / "env").glob("oracle_*.json"))) == 1
    assert run_command(["oracle", "solve", "--level", "1", "--fixtures", str(tmp_path / "flag")]) == 0
    assert len(list((tmp_path / "flag").glob("oracle_*.json"))) == 1
    data = json.loads(capsys.readouterr().out.split("\n}\n")[0] + "\n}")
    assert len(data["exit_time"]) == 8


def test_oracle_compare_table(capsys):
    assert run_command(["oracle", "compare", "--level", "1", "--samples", "2000", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "max |MC - exact|" in out and "sigmas" in out


def test_verify_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    plot = tmp_path / "report.csv"
    code = run_command(["verify", "lemma10", "--seed", "3", "--level", "3", "--samples", "300", "--out", str(out),
                        "--emit-plot", str(plot)])
    assert code in (0, 1)
    data = json.loads(out.read_text())
    assert isinstance(data, list) and data[0]["check"] == "lemma10"
    assert {"config_hash", "hypothesis_flags", "timestamp", "status"} <= set(data[0])
    assert (code == 0) == (data[0]["status"] == "pass")
    assert "floor" in capsys.readouterr().out
    assert len(plot.read_text().splitlines()) > 1


def test_verify_all_marks_refused_checks(tmp_path, monkeypatch):
    calls = []

    def fake(name):
        def run(*a, **k):
            calls.append(name)
            raise cli.HypothesisViolation("hypothesis violated: test")
        return run

    for name in ("check_lemma10", "check_lemma11", "check_lemma12", "check_carleson", "check_bhp_pairs",
                 "check_step_decomposition"):
        monkeypatch.setattr(cli, name, fake(name))
    out = tmp_path / "all.json"
    assert run_command(["verify", "all", "--seed", "1", "--out", str(out)]) == 1
    data = json.loads(out.read_text())
    assert [d["status"] for d in data] == ["refused"] * 6
    assert len(calls) == 6
