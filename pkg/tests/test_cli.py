import json
import subprocess
import sys

import numpy as np
import pytest

from stiffinfer.cli import build_parser, main


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("STIFFINFER_THREADS", raising=False)


def digests(run_dir):
    m = json.loads((run_dir / "manifest.json").read_text())
    return {o["path"]: o["sha256"] for o in m["outputs"]}


def test_help_lists_every_flag_with_units(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--out", "--threads", "--config"):
        assert flag in text
    for cmd in ("mech", "scenario", "simulate", "rank", "infer", "jsd", "sweep"):
        assert cmd in text
    for sub in ("simulate", "infer", "sweep"):
        with pytest.raises(SystemExit):
            main([sub, "--help"])
        text = capsys.readouterr().out
        assert "(s)" in text or " s)" in text or "log10 s" in text


def test_bad_usage_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--model", "nope"])
    assert exc.value.code == 1
    assert main(["scenario", "show", "nope"]) == 1


def test_mech_validate(tmp_path, capsys):
    assert main(["mech", "validate"]) == 0
    assert json.loads(capsys.readouterr().out)["n_reactions"] == 28
    bad = tmp_path / "bad.yaml"
    bad.write_text("phases: [}\n")
    assert main(["mech", "validate", str(bad)]) == 1
    assert json.loads(capsys.readouterr().out)["valid"] is False


def test_scenario_show(capsys):
    assert main(["scenario", "show", "h2-autoignition"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["n_grid"] == 141 and d["anchors"]["T_anchor"] == 1200.0


def test_config_override(tmp_path, capsys):
    cfg = tmp_path / "o.toml"
    cfg.write_text("[sampler]\nn_draws = 7\n")
    assert main(["--config", str(cfg), "scenario", "show", "robertson"]) == 0
    assert json.loads(capsys.readouterr().out)["sampler"]["n_draws"] == 7
    cfg.write_text("x = [")
    assert main(["--config", str(cfg), "scenario", "show", "robertson"]) == 1


def test_global_flags_before_or_after_subcommand(tmp_path):
    assert main(["--out", "a", "simulate", "--model", "robertson", "--t-end", "1e-2"]) == 0
    assert main(["simulate", "--model", "robertson", "--t-end", "1e-2", "--out", "b"]) == 0
    assert (tmp_path / "a" / "trajectory.csv").is_file()
    assert (tmp_path / "b" / "trajectory.csv").is_file()


def test_simulate_deterministic(tmp_path):
    for d in ("r1", "r2"):
        assert main(["--out", d, "simulate", "--model", "robertson", "--sens"]) == 0
    assert digests(tmp_path / "r1") == digests(tmp_path / "r2")
    header = (tmp_path / "r1" / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["t", "A", "B", "C"] and "T" not in header and "A_3_3" in header


def test_simulate_h2_temperature(tmp_path):
    assert main(["--out", "h", "simulate", "--model", "h2-adiabatic", "--t-end", "1e-3"]) == 0
    rows = np.genfromtxt(tmp_path / "h" / "trajectory.csv", delimiter=",", names=True)
    assert rows["T"][0] == pytest.approx(1200.0)
    assert rows["T"][-1] > 2000.0


def test_numerical_failure_exit_2(tmp_path):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text("[solver]\nmax_steps = 2\n")
    assert main(["--config", str(cfg), "simulate", "--model", "robertson"]) == 2


def test_rank_h2(tmp_path, capsys):
    assert main(["--out", "rk", "rank", "--scenario", "h2-autoignition"]) == 0
    summary = json.loads((tmp_path / "rk" / "rank_summary.json").read_text())
    assert summary["h2-autoignition"]["final_rank_QAQ"] == 3
    data = np.genfromtxt(tmp_path / "rk" / "rank.csv", delimiter=",", names=True)
    assert np.all(data["rank_QAQ"] == 3)
    first = digests(tmp_path / "rk")
    assert main(["--out", "rk2", "rank", "--scenario", "h2-autoignition"]) == 0
    assert digests(tmp_path / "rk2") == first


@pytest.fixture
def small_infer(tmp_path):
    args = ["--seed", "5", "--out", "inf", "infer", "--scenario", "robertson", "--tobs", "1e-4",
            "--chains", "2", "--draws", "150", "--warmup", "150"]
    assert main(args) == 0
    return tmp_path / "inf", args


def test_infer_outputs_and_reproducibility(small_infer, tmp_path):
    d, args = small_infer
    for f in ("draws.csv", "truth.csv", "prior.csv", "report.json", "manifest.json"):
        assert (d / f).is_file()
    rep = json.loads((d / "report.json").read_text())
    assert rep["verdict"]["species"]["B"]["failed"] is False
    args[3] = "inf2"
    assert main(args) == 0
    assert (d / "draws.csv").read_text() == (tmp_path / "inf2" / "draws.csv").read_text()


def test_jsd(small_infer, tmp_path, capsys):
    d, _ = small_infer
    files = ["--draws", str(d / "draws.csv"), "--truth", str(d / "truth.csv"),
             "--prior", str(d / "prior.csv")]
    assert main(["--out", "j/v.json", "jsd", *files, "--scenario", "robertson"]) == 0
    v = json.loads((tmp_path / "j" / "v.json").read_text())
    assert set(v["species"]) == {"A", "B", "C"}
    # raw concentrations without --scenario are refused rather than binned into one cell
    assert main(["jsd", *files]) == 1


def test_sweep_small(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("[sampler]\nn_warmup = 100\nn_draws = 100\nn_chains = 2\n")
    assert main(["--seed", "7", "--config", str(cfg), "--out", "sw", "sweep", "--scenario",
                 "robertson", "--grid=-4:-3.5:2", "--species", "B"]) == 0
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "t_obs,species,jsd_truth,jsd_prior,failed"
    assert len(lines) == 3
    assert main(["sweep", "--scenario", "robertson", "--grid", "x"]) == 1


def test_threads_env(monkeypatch):
    monkeypatch.setenv("STIFFINFER_THREADS", "many")
    assert main(["infer", "--scenario", "robertson", "--tobs", "1e-4", "--draws", "5"]) == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "stiffinfer", "scenario", "list"],
                       capture_output=True, text=True, check=True)
    assert "robertson" in json.loads(r.stdout)


def test_parser_builds():
    assert build_parser().prog == "stiffinfer"
