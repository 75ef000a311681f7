import copy
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ncsfsp.cli import main, shipped_config
from ncsfsp.config import ConfigError, load_config, parse_config

RAW = json.loads(shipped_config().read_text())


def _quick(**scenario):
    raw = copy.deepcopy(RAW)
    raw["compensator"]["model_samples"] = 2000
    raw["stability"]["samples"] = 400
    raw["scenario"].update({"horizon": 4.0, "disturbance_time": 2.0, "replicas": 2})
    raw["scenario"].update(scenario)
    raw["output"]["trajectory_replicas"] = 2
    return raw


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def _run(*argv):
    return main([str(a) for a in argv])


# ------------------------------------------------------------- config

def test_shipped_config_parses_and_echoes_assumptions():
    cfg = load_config(shipped_config())
    assert cfg.compensator.alpha == 0.4
    assert cfg.assumptions[0].startswith("CACC plant with engine time constant tau = 0.5")


def test_unknown_key_rejected():
    raw = copy.deepcopy(RAW)
    raw["scenario"]["horizonn"] = 3
    with pytest.raises(ConfigError, match="horizonn"):
        parse_config(raw)


def test_size_mismatch_rejected():
    raw = copy.deepcopy(RAW)
    raw["timing"]["num_actuators"] = 3
    with pytest.raises(ConfigError, match="num_actuators"):
        parse_config(raw)


def test_lqr_block_designs_the_case_study_gains(tmp_path):
    raw = _quick()
    del raw["controller"]["gains"]
    raw["controller"]["lqr"] = {"Q": 2 / 3, "R": 1 / 3}
    out = tmp_path / "o"
    assert _run("design", "--config", _write(tmp_path, raw), "--out", out) == 0
    rep = json.loads((out / "design_report.json").read_text())
    np.testing.assert_allclose(rep["controller"]["Kx"], RAW["controller"]["gains"]["Kx"], atol=2e-4)


# ------------------------------------------------------------ validate

def test_validate_shipped_config(capsys):
    assert _run("validate") == 0
    assert "ok:" in capsys.readouterr().out


def test_jitter_violation_names_specification_1(tmp_path, capsys):
    raw = copy.deepcopy(RAW)
    raw["timing"]["jitter"] = {"kind": "uniform", "min": 0.0, "max": 0.1}
    assert _run("validate", "--config", _write(tmp_path, raw)) == 2
    assert "Specification 1" in capsys.readouterr().out


def test_missing_plant_block(tmp_path, capsys):
    raw = copy.deepcopy(RAW)
    del raw["plant"]
    assert _run("validate", "--config", _write(tmp_path, raw)) == 3
    assert "plant" in capsys.readouterr().err


def test_malformed_json_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "version": 1,\n  "plant": {,\n}')
    assert _run("validate", "--config", p) == 3
    assert "line 3" in capsys.readouterr().err


def test_bad_seed_env(monkeypatch, capsys):
    monkeypatch.setenv("NCS_SEED", "abc")
    assert _run("validate") == 3


# -------------------------------------------------------------- design

def test_design_report_contents(tmp_path):
    out = tmp_path / "o"
    assert _run("design", "--config", _write(tmp_path, _quick()), "--out", out) == 0
    rep = json.loads((out / "design_report.json").read_text())
    assert rep["compensators"]["3sfsp"]["alpha"] == 0.4
    assert rep["compensators"]["3sfsp"]["predictor_spectral_radius"] < 1
    assert set(rep["laws"]) == {"none", "fsp", "3sfsp", "ideal"}
    assert rep["assumptions"]


def test_design_failure_exit_code(tmp_path, capsys):
    raw = _quick()
    raw["compensator"]["orders"] = [[0, 1]] * 3
    assert _run("design", "--config", _write(tmp_path, raw), "--out", tmp_path / "o") == 4
    assert "raise the numerator degree" in capsys.readouterr().err


def test_seed_change_keeps_design_within_standard_errors(tmp_path):
    reps = []
    for seed in (1, 2):
        out = tmp_path / f"o{seed}"
        assert _run("design", "--config", _write(tmp_path, _quick()), "--out", out, "--seed", seed) == 0
        reps.append(json.loads((out / "design_report.json").read_text())["compensators"]["3sfsp"]["models"])
    for key in ("A", "B", "BJ", "Wx", "Wu"):
        a, b = np.array(reps[0][key]), np.array(reps[1][key])
        se = np.hypot(np.array(reps[0]["stderr"][key]), np.array(reps[1]["stderr"][key]))
        assert np.all(np.abs(a - b) <= 5 * se + 1e-14), key


# ----------------------------------------------------------- stability

def test_scalar_demo_stability(tmp_path, capsys):
    out = tmp_path / "o"
    assert _run("stability", "--config", shipped_config("scalar_demo.json"), "--out", out) == 0
    v = json.loads((out / "stability.json").read_text())
    assert v["spectral_radius"] == pytest.approx(0.25, abs=1e-12)
    assert (out / "poles.svg").exists()


def test_destabilized_gains_not_certified(tmp_path):
    raw = _quick()
    g = raw["controller"]["gains"]
    g["Kc"] = (10 * np.array(g["Kc"])).tolist()
    g["Kx"] = (10 * np.array(g["Kx"])).tolist()
    raw["compensator"]["mode"] = "none"
    out = tmp_path / "o"
    # the delay-free loop itself is unstable with these gains, so design refuses
    assert _run("stability", "--config", _write(tmp_path, raw), "--out", out) == 4


def test_mildly_destabilized_loop_not_certified(tmp_path):
    raw = _quick()
    g = raw["controller"]["gains"]
    g["Kx"] = (2.5 * np.array(g["Kx"])).tolist()
    raw["compensator"]["mode"] = "none"
    out = tmp_path / "o"
    assert _run("stability", "--config", _write(tmp_path, raw), "--out", out) == 5
    v = json.loads((out / "stability.json").read_text())
    assert v["verdict"] == "not-certified"


# ------------------------------------------------------------ simulate

def _simulate(tmp_path, raw, out, *extra):
    return _run("simulate", "--config", _write(tmp_path, raw), "--out", out, "--mode", "3sfsp", *extra)


def test_simulate_byte_identical_replay(tmp_path):
    raw = _quick(replicas=1)
    a, b = tmp_path / "a", tmp_path / "b"
    assert _simulate(tmp_path, raw, a, "--seed", 7) == 0
    assert _simulate(tmp_path, raw, b, "--seed", 7) == 0
    for name in ("trajectories_3sfsp.csv", "trajectories_ideal.csv", "stats.json",
                 "envelope_3sfsp.svg", "ratios.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_design_report_round_trips_into_simulate(tmp_path):
    raw = _quick()
    cfg = _write(tmp_path, raw)
    d = tmp_path / "d"
    assert _run("design", "--config", cfg, "--out", d) == 0
    direct, replay = tmp_path / "s1", tmp_path / "s2"
    assert _simulate(tmp_path, raw, direct) == 0
    assert _simulate(tmp_path, raw, replay, "--design", d / "design_report.json") == 0
    assert (direct / "stats.json").read_text() == (replay / "stats.json").read_text()


def test_seed_precedence(tmp_path, monkeypatch):
    raw = _quick(replicas=1)
    outs = {}
    for tag, env, flag in (("cfg", None, ()), ("env", "99", ()), ("flag", "99", ("--seed", 5)),
                           ("flag2", None, ("--seed", 5))):
        if env is None:
            monkeypatch.delenv("NCS_SEED", raising=False)
        else:
            monkeypatch.setenv("NCS_SEED", env)
        out = tmp_path / tag
        assert _simulate(tmp_path, raw, out, *flag) == 0
        outs[tag] = (out / "trajectories_3sfsp.csv").read_bytes()
    assert outs["cfg"] != outs["env"]
    assert outs["flag"] == outs["flag2"] != outs["env"]


def test_ideal_mode_ratio_one(tmp_path):
    out = tmp_path / "o"
    assert _run("simulate", "--config", _write(tmp_path, _quick()), "--out", out, "--mode", "ideal") == 0
    st = json.loads((out / "stats.json").read_text())["modes"]["ideal"]
    assert st["ratio"]["mean"] == st["ratio"]["max"] == 1.0


def test_reproduce_stability_only(tmp_path, capsys):
    out = tmp_path / "o"
    assert _run("reproduce", "--config", _write(tmp_path, _quick()), "--out", out, "--stability-only") == 0
    text = capsys.readouterr().out
    assert "# assumption: CACC plant" in text
    assert "MSS spectral radius" in text
    rows = json.loads((out / "reproduction.json").read_text())["rows"]
    assert [r["key"] for r in rows] == ["radius"]


def test_console_script_and_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ncsfsp.cli", "validate"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_numpy_fallback_matches_compiled_kernels(tmp_path):
    """The same replica under NCSFSP_DISABLE_NUMBA=1 reproduces the compiled run."""
    raw = _quick(replicas=2)
    cfg = _write(tmp_path, raw)
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, NCSFSP_DISABLE_NUMBA=flag)
        out = tmp_path / f"k{flag}"
        r = subprocess.run([sys.executable, "-m", "ncsfsp.cli", "simulate", "--config", str(cfg),
                            "--out", str(out), "--mode", "3sfsp"], capture_output=True, text=True, env=env)
        assert r.returncode == 0, r.stderr
        outs.append(json.loads((out / "stats.json").read_text())["modes"]["3sfsp"])
    assert outs[1]["J_mean"] == pytest.approx(outs[0]["J_mean"], rel=1e-9)
    assert outs[1]["J_max"] == pytest.approx(outs[0]["J_max"], rel=1e-9)


def test_results_independent_of_thread_count(tmp_path):
    raw = _quick(replicas=6)
    outs = []
    for n in (1, 4):
        out = tmp_path / f"t{n}"
        assert _simulate(tmp_path, raw, out, "--threads", n) == 0
        outs.append((out / "trajectories_3sfsp.csv").read_bytes())
    assert outs[0] == outs[1]
