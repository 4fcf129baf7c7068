import json
from pathlib import Path

import numpy as np
import pytest

from mfclab.lab import cli
from mfclab.lab.config import ConfigError, ExperimentConfig, load_config
from mfclab.lab.experiments import (
    ExperimentError,
    RateTable,
    fit_loglog_slope,
    run_chaos_experiment,
    run_config,
    run_crosscheck_experiment,
    run_value_rate_experiment,
)
from mfclab.model import SpecError
from mfclab.presets import PRESETS, build_preset, preset_params

CHAOS = """
[experiment]
kind = chaos
N_list = 8, 16, 32, 64
M = 60
n_steps = 10
seed = 3

[model]
preset = tanh-drift
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- slope fits -----------------------------------------------------------------------


def test_exact_inverse_rate():
    f = fit_loglog_slope([2, 4, 8], [0.5, 0.25, 0.125], min_points=3)
    assert f.slope == pytest.approx(-1.0, abs=1e-12) and f.r2 == 1.0
    assert f.ci[0] == pytest.approx(-1.0) and f.ci[1] == pytest.approx(-1.0)


def test_constant_statistic():
    f = fit_loglog_slope([2, 4, 8, 16], [3.0] * 4)
    assert f.slope == pytest.approx(0.0, abs=1e-12)


def test_noisy_inverse_rate():
    rng = np.random.default_rng(0)
    N = np.array([8, 16, 32, 64, 128, 256])
    slopes = []
    for _ in range(200):
        stat = 2.0 / N * (1 + 0.05 * rng.standard_normal(len(N)))
        slopes.append(fit_loglog_slope(N, stat, 0.05 * stat).slope)
    assert -1.15 <= min(slopes) and max(slopes) <= -0.85


def test_fit_refusals():
    with pytest.raises(ExperimentError):
        fit_loglog_slope([2, 4, 8], [1, 2, 3])
    with pytest.raises(ExperimentError):
        fit_loglog_slope([2, 4, 8, 16], [1, 0, 3, 4])
    t = RateTable("x", [2, 4, 8, 16], [1.0, 0.5, 0.2, 0.1], [0.1, 0.4, 0.01, 0.01], [5] * 4)
    with pytest.raises(ExperimentError, match="under-powered"):
        t.fit_slope(max_rel_stderr=0.5)


def test_rate_table_csv_contract():
    t = RateTable("x", [2, 4], [0.5, 0.25], [0.01, 0.02], [10, 10])
    text = t.to_csv()
    assert text.splitlines()[0] == "N,stat,stderr,reps"
    assert text.splitlines()[1] == "2,0.5,0.01,10"
    z = RateTable("z", [2, 4, 8, 16], [0.0] * 4, [0.0] * 4, [1] * 4)
    assert z.fit_slope() is None and z.exact_zero


# --- configs ----------------------------------------------------------------------------


def test_load_and_inherit(tmp_path):
    write(tmp_path, "base.ini", CHAOS)
    child = write(tmp_path, "child.ini", "[experiment]\nbase = base.ini\nM = 20\nvariant = iid\n[model]\nlam = 0.25\n")
    cfg = load_config(child)
    assert cfg.kind == "chaos" and cfg.M == 20 and cfg.N_list == (8, 16, 32, 64)
    assert cfg.preset == "tanh-drift" and cfg.overrides == {"lam": 0.25}
    assert cfg.get("variant", kind=str) == "iid"


def test_config_errors(tmp_path):
    a = write(tmp_path, "a.ini", "[experiment]\nbase = b.ini\nkind = chaos\n")
    write(tmp_path, "b.ini", "[experiment]\nbase = a.ini\n")
    with pytest.raises(ConfigError, match="circular"):
        load_config(a)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "c.ini", "[experiment]\nkind = chaos\n[extra]\nx = 1\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "d.ini", "[experiment]\nkind = chaos\nN_list = 8, x\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "e.ini", "[experiment]\nkind = chaos\nN_list = 16, 8\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "f.ini", "[experiment]\nkind = bogus\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "g.ini", "[experiment]\nkind = chaos\n[model]\nlam = big\n"))
    with pytest.raises(SpecError):
        load_config(write(tmp_path, "h.ini", "[experiment]\nkind = chaos\n[model]\npreset = nope\n"))
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="chaos", M=0)


def test_seed_override_shifts_seed_list():
    cfg = ExperimentConfig(kind="value-rate", seed=1, seeds=(1, 2, 3)).with_seed(11)
    assert cfg.seed == 11 and cfg.seed_list == (11, 12, 13)


def test_presets():
    assert set(PRESETS) >= {"lq", "tanh-drift", "partial-obs-lqg"}
    assert preset_params("lq", {"c": 2}).c == 2.0
    assert build_preset("partial-obs-lqg").lqg.eta == 1.0
    assert build_preset("lq-interact").interacting
    with pytest.raises(SpecError):
        preset_params("lq", {"kappa": 1.0})


# --- experiments ----------------------------------------------------------------------


def test_chaos_csv_and_determinism(tmp_path):
    path = write(tmp_path, "c.ini", CHAOS)
    code1, r1 = run_config(path, out=tmp_path / "o1")
    code2, r2 = run_config(path, out=tmp_path / "o2", threads=3)
    a = (tmp_path / "o1" / "results.csv").read_bytes()
    assert a.splitlines()[0] == b"N,stat,stderr,reps"
    assert a == (tmp_path / "o2" / "results.csv").read_bytes()
    s = json.loads((tmp_path / "o1" / "summary.json").read_text())
    assert s["schema_version"] == 1 and s["kind"] == "chaos" and s["seed"] == 3
    assert s["passed"] == (code1 == 0)
    assert (tmp_path / "o1" / "report.txt").read_text().startswith("experiment: chaos")


def test_chaos_without_interaction_is_exact_zero():
    cfg = ExperimentConfig(kind="chaos", preset="lq", N_list=(8, 16, 32, 64), M=20, n_steps=5)
    res = run_chaos_experiment(cfg)
    assert res.table.exact_zero and res.passed


def test_chaos_iid_variant_rate():
    cfg = ExperimentConfig(kind="chaos", preset="tanh-drift", N_list=(8, 16, 32, 64, 128), M=100, n_steps=10,
                           extra={"variant": "iid"})
    res = run_chaos_experiment(cfg)
    assert res.passed, res.report()


def test_value_rate_zero_costs_exact():
    cfg = ExperimentConfig(kind="value-rate", preset="lq", overrides={"c": 0.0, "gamma": 0.0}, N_list=(2, 4, 8, 16),
                           M=400, n_steps=10, N_inner=32, seeds=(1, 2))
    res = run_value_rate_experiment(cfg)
    assert res.table.exact_zero and res.passed
    assert "cells.csv" in res.extra_csv


def test_crosscheck_small_budget():
    cfg = ExperimentConfig(kind="cross-check", preset="lq", M=4000, n_steps=25, N_inner=256,
                           extra={"n_t": "200", "n_x": "200"})
    res = run_crosscheck_experiment(cfg)
    assert res.statistics["pde_vs_bsde_relerr"] <= 0.025 and res.passed
    with pytest.raises(SpecError):
        run_crosscheck_experiment(ExperimentConfig(kind="cross-check", preset="tanh-drift"))


# --- CLI ----------------------------------------------------------------------------------


def test_cli_hjb(tmp_path, capsys):
    cfg = write(tmp_path, "h.ini", "[experiment]\nkind = hjb\nn_t = 100\nn_x = 100\nwrite_field = yes\n")
    assert cli.main(["hjb", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "[PASS] relerr <= 0.005" in capsys.readouterr().out
    assert (tmp_path / "o" / "field.csv").read_text().startswith("t,x,U,DxU,DxxU")


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "b.ini", "[experiment]\nkind = chaos\n[model]\npreset = nope\n")
    assert cli.main(["chaos", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    failing = write(tmp_path, "f.ini", CHAOS.replace("seed = 3", "seed = 3\nslope_lo = 5\nslope_hi = 6"))
    assert cli.main(["chaos", "--config", str(failing)]) == 1
    with pytest.raises(SystemExit):
        cli.main(["bogus"])


def test_cli_seed_flag_changes_output(tmp_path):
    path = write(tmp_path, "c.ini", CHAOS)
    cli.main(["chaos", "--config", str(path), "--out", str(tmp_path / "a")])
    cli.main(["chaos", "--config", str(path), "--seed", "4", "--out", str(tmp_path / "b")])
    assert Path(tmp_path / "a" / "results.csv").read_text() != Path(tmp_path / "b" / "results.csv").read_text()
