import os
import subprocess
import sys

import numpy as np
import pytest

from hderm.cli import (EXIT_CONFIG, EXIT_GATE, EXIT_OK, ConfigError, main,
                       validate_config, w1_distance)

BASE = """
[model]
k = 1
k0 = 1
loss = "multinomial"
r00 = [[1.0]]
seed = 99
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_validate_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key model.bogus"):
        validate_config({"model": {"k": 1, "k0": 1, "loss": "multinomial",
                                   "r00": [[1.0]], "seed": 1, "bogus": 2}})
    with pytest.raises(ConfigError, match=r"unknown section \[extra\]"):
        validate_config({"model": {"k": 1, "k0": 1, "loss": "multinomial",
                                   "r00": [[1.0]], "seed": 1}, "extra": {}})


def test_validate_shape_and_empty_lists():
    with pytest.raises(ConfigError, match="r00"):
        validate_config({"model": {"k": 2, "k0": 2, "loss": "multinomial",
                                   "r00": [[1.0]], "seed": 1}})
    with pytest.raises(ConfigError, match="theory.alpha"):
        validate_config({"model": {"k": 1, "k0": 1, "loss": "multinomial",
                                   "r00": [[1.0]], "seed": 1},
                         "theory": {"alpha": [], "lambda": [0.1]}})


def test_usage_error_exit_code(tmp_path):
    missing = str(tmp_path / "absent.toml")
    assert main(["theory", "--config", missing, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_theory_and_simulate_and_compare_roundtrip(tmp_path):
    cfg = write(tmp_path, BASE + """
[theory]
alpha = [3.0]
lambda = [0.3]
nodes_per_dim = 10

[simulate]
d = 40
alpha = [3.0]
lambda = [0.3]
trials = 4

[compare]
theory_csv = "%s"
sim_csv = "%s"
""" % (tmp_path / "out" / "theory.csv", tmp_path / "out" / "sim_summary.csv"))
    out = str(tmp_path / "out")
    assert main(["theory", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["compare", "--config", cfg, "--out", out]) == EXIT_OK
    theory = (tmp_path / "out" / "theory.csv").read_text()
    assert theory.startswith("#meta ")
    header = theory.splitlines()[1]
    assert header == ("alpha,lambda,train_loss,test_loss,class_error,est_error,"
                      "resid1,resid2,converged,diverged")
    rows = theory.splitlines()[2:]
    assert len(rows) == 1 and rows[0].endswith(",1,0")
    cmp_lines = (tmp_path / "out" / "compare.csv").read_text().splitlines()
    assert cmp_lines[1].startswith("alpha,lambda,rel_err_train")
    vals = cmp_lines[2].split(",")
    assert float(vals[2]) < 0.5  # wild tolerance; d = 40 is tiny


def test_compare_against_itself_is_zero(tmp_path):
    # hand-written identical theory/sim summaries -> all error columns 0
    th = tmp_path / "theory.csv"
    th.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,resid1,resid2,converged,diverged\n"
        "3.0,0.1,0.7,1.1,0.5,2.0,1e-9,1e-9,1,0\n"
    )
    sm = tmp_path / "sim_summary.csv"
    sm.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,"
        "train_std,test_std,class_std,est_std,n_trials,n_nonexistent\n"
        "3.0,0.1,0.7,1.1,0.5,2.0,0,0,0,0,10,0\n"
    )
    cfg = write(tmp_path, BASE + f"""
[compare]
theory_csv = "{th}"
sim_csv = "{sm}"
gate = true
tol_train = 1e-12
tol_test = 1e-12
tol_class = 1e-12
tol_est = 1e-12
""")
    out = str(tmp_path)
    assert main(["compare", "--config", cfg, "--out", out]) == EXIT_OK
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    vals = [float(t) for t in lines[2].split(",")[2:6]]
    assert all(v == 0.0 for v in vals)


def test_compare_partial_join_warns_but_passes(tmp_path, capsys):
    th = tmp_path / "theory.csv"
    th.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,resid1,resid2,converged,diverged\n"
        "3.0,0.1,0.7,1.1,0.5,2.0,1e-9,1e-9,1,0\n"
    )
    sm = tmp_path / "sim_summary.csv"
    sm.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,"
        "train_std,test_std,class_std,est_std,n_trials,n_nonexistent\n"
        "3.0,0.1,0.7,1.1,0.5,2.0,0,0,0,0,10,0\n"
        "5.0,0.1,0.6,1.0,0.4,1.5,0,0,0,0,10,0\n"
    )
    cfg = write(tmp_path, BASE + f"""
[compare]
theory_csv = "{th}"
sim_csv = "{sm}"
""")
    assert main(["compare", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK


def test_gate_violation_exit_code(tmp_path):
    th = tmp_path / "theory.csv"
    th.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,resid1,resid2,converged,diverged\n"
        "3.0,0.1,0.7,1.1,0.5,2.0,1e-9,1e-9,1,0\n"
    )
    sm = tmp_path / "sim_summary.csv"
    sm.write_text(
        "alpha,lambda,train_loss,test_loss,class_error,est_error,"
        "train_std,test_std,class_std,est_std,n_trials,n_nonexistent\n"
        "3.0,0.1,0.9,1.1,0.5,2.0,0,0,0,0,10,0\n"
    )
    cfg = write(tmp_path, BASE + f"""
[compare]
theory_csv = "{th}"
sim_csv = "{sm}"
gate = true
tol_train = 0.01
""")
    assert main(["compare", "--config", cfg, "--out", str(tmp_path)]) == EXIT_GATE


def test_w1_distance_sanity():
    xs = np.linspace(-1, 2, 3001)
    dens = np.where((xs >= 0) & (xs <= 1), 1.0, 0.0)
    sample = np.random.default_rng(0).uniform(0, 1, size=200000)
    assert w1_distance(sample, xs, dens) <= 5e-3


def test_cli_subprocess_deterministic_across_threads(tmp_path):
    cfg_text = BASE + """
[simulate]
d = 30
alpha = [2.0, 4.0]
lambda = [0.2]
trials = 4
"""
    cfg = write(tmp_path, cfg_text)
    outputs = {}
    for threads in (1, 2):
        out = tmp_path / f"out{threads}"
        r = subprocess.run(
            [sys.executable, "-m", "hderm.cli", "simulate", "--config", cfg,
             "--out", str(out), "--threads", str(threads)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        outputs[threads] = (out / "sim_summary.csv").read_bytes()
    assert outputs[1] == outputs[2]
