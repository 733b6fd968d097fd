import json

import numpy as np
import pytest

from acbroker import (AgentParams, ConfigError, InvalidProblem, MarketParams,
                      ProblemSession, TimeGrid)
from acbroker.cli import main
from acbroker.experiments import (load_config, relative_values, resolve_config,
                                  run)


def write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def test_preset_resolves_full_parameters(tmp_path):
    cfg = load_config(write_config(tmp_path, {"preset": "fig1"}))
    assert cfg.kind == "sweep2d"
    assert cfg.market.kappa0 == pytest.approx(0.1)
    assert cfg.market.lambda0 == pytest.approx(1e-3)
    assert len(cfg.agents) == 2
    assert all(a.kappa == pytest.approx(0.1) for a in cfg.agents)
    assert cfg.sweep["x_count"] == 10


def test_agents_and_generator_are_exclusive(tmp_path):
    payload = {
        "kind": "solve", "kappa0": 0.1,
        "agents": [{"kappa": 0.1, "lam": 0.01}],
        "agent_generator": {"type": "uniform", "n": 2, "seed": 1,
                            "kappa": 0.1, "lam": 0.01},
    }
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, payload))


def test_missing_file_reports_not_found(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(write_config(tmp_path, {"kind": "solve", "kappa0": 0.1,
                                            "agents": [], "typo_key": 1}))


def test_parse_error_carries_location(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\n  \"kind\": \n}")
    with pytest.raises(ConfigError, match="line"):
        load_config(path)


def test_generator_requires_seed():
    with pytest.raises(ConfigError, match="seed"):
        resolve_config({"kind": "solve", "kappa0": 0.1,
                        "agent_generator": {"type": "uniform", "n": 2,
                                            "kappa": 0.1, "lam": 0.01}})


def test_ramp_generator_values():
    cfg = resolve_config({"preset": "fig5"})
    assert len(cfg.agents) == 8
    assert cfg.agents[-1].kappa == pytest.approx(1e-1)
    assert cfg.agents[-1].lam == pytest.approx(1e-3)
    assert cfg.agents[0].kappa == pytest.approx(1e-2 + 9e-2 / 8)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def test_sweep_run_writes_rows_and_heatmap(tmp_path):
    cfg = resolve_config({
        "preset": "fig1", "out": str(tmp_path / "out"),
        "sweep": {"x": "lambda1", "y": "lambda2",
                  "x_range": [1e-3, 5e-2], "y_range": [1e-3, 5e-2],
                  "x_count": 3, "y_count": 3},
        "grid": 100,
    })
    out = run(cfg)
    assert len(out.rows) == 9
    assert all(r["theta_star"] == "(1,1)" for r in out.rows)
    assert all("margin" in r for r in out.rows)
    header = out.results_csv.read_text().splitlines()[0]
    assert "V_P" in header and "margin" in header
    hm = out.heatmap_csv.read_text().splitlines()
    assert hm[0] == "x,y,value"
    assert len(hm) == 10
    meta = json.loads(out.meta_json.read_text())
    assert meta["rows"] == 9 and meta["grid"] == 100


def test_empty_sweep_zero_rows_exit_zero(tmp_path):
    payload = {
        "preset": "fig1", "out": str(tmp_path / "out"),
        "sweep": {"x": "lambda1", "y": "lambda2",
                  "x_range": [1e-3, 5e-2], "y_range": [1e-3, 5e-2],
                  "x_count": 0, "y_count": 3},
        "grid": 50,
    }
    code = main(["sweep", "--config", str(write_config(tmp_path, payload))])
    assert code == 0
    assert (tmp_path / "out" / "results.csv").read_text() == ""


def test_run_is_byte_deterministic(tmp_path):
    payload = {
        "preset": "fig1",
        "sweep": {"x": "lambda1", "y": "lambda2",
                  "x_range": [1e-3, 5e-2], "y_range": [1e-3, 5e-2],
                  "x_count": 2, "y_count": 2},
        "grid": 60,
    }
    cfg = resolve_config(payload)
    out1 = run(cfg, out_dir=tmp_path / "a")
    out2 = run(cfg, out_dir=tmp_path / "b", threads=2)
    assert out1.results_csv.read_bytes() == out2.results_csv.read_bytes()


def test_solve_kind(tmp_path):
    payload = {"kind": "solve", "mu": 1.0, "kappa0": 0.1, "lambda0": 1e-3,
               "agents": [{"kappa": 0.1, "lam": 0.0255},
                          {"kappa": 0.1, "lam": 0.0255}],
               "theta": [1, 1], "grid": 100, "out": str(tmp_path / "out")}
    code = main(["solve", "--config", str(write_config(tmp_path, payload))])
    assert code == 0
    rows = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert len(rows) == 2
    assert rows[1].startswith('"(1,1)"')


def test_subcommand_kind_mismatch(tmp_path, capsys):
    payload = {"kind": "solve", "kappa0": 0.1,
               "agents": [{"kappa": 0.1, "lam": 0.01}]}
    code = main(["mc", "--config", str(write_config(tmp_path, payload))])
    assert code == 1
    err = json.loads(capsys.readouterr().out)
    assert err["error"] == "ConfigError"


def test_cli_error_json_on_bad_config(tmp_path, capsys):
    code = main(["solve", "--config", str(tmp_path / "missing.json")])
    assert code == 1
    err = json.loads(capsys.readouterr().out)
    assert err["error"] == "ConfigError"
    assert "not found" in err["message"]


def test_env_override_out(tmp_path, monkeypatch):
    payload = {"kind": "solve", "kappa0": 0.1, "lambda0": 1e-3,
               "agents": [{"kappa": 0.1, "lam": 0.01}], "theta": [1],
               "grid": 50}
    monkeypatch.setenv("ACBROKER_OUT", str(tmp_path / "envout"))
    code = main(["solve", "--config", str(write_config(tmp_path, payload))])
    assert code == 0
    assert (tmp_path / "envout" / "results.csv").exists()


def test_grid_flag_overrides_config(tmp_path):
    payload = {"kind": "solve", "kappa0": 0.1, "lambda0": 1e-3,
               "agents": [{"kappa": 0.1, "lam": 0.01}], "theta": [1],
               "grid": 100, "out": str(tmp_path / "out")}
    code = main(["solve", "--config", str(write_config(tmp_path, payload)),
                 "--grid", "64"])
    assert code == 0
    meta = json.loads((tmp_path / "out" / "meta.json").read_text())
    assert meta["grid"] == 64
    assert meta["version"]


def test_montecarlo_kind(tmp_path):
    payload = {"kind": "montecarlo", "kappa0": 0.1, "lambda0": 1e-3,
               "agents": [{"kappa": 0.1, "lam": 0.0255},
                          {"kappa": 0.08, "lam": 0.015}],
               "theta": [1, 0], "grid": 100,
               "montecarlo": {"n_paths": 50, "seed": 4},
               "out": str(tmp_path / "out")}
    code = main(["mc", "--config", str(write_config(tmp_path, payload))])
    assert code == 0
    lines = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert len(lines) == 2  # header + one client row
    assert lines[0].startswith("agent,reservation,expected_fee")


def test_percentile_kind_rows(tmp_path):
    cfg = resolve_config({"preset": "fig3", "percentile": {
        "key": "lambda", "directions": ["lowest"], "p_list": [0.1, 0.5]},
        "agent_generator": {"type": "uniform", "n": 6, "seed": 1,
                            "kappa": 5e-2, "lam_low": 1e-4, "lam_high": 1e-3},
        "grid": 60})
    out = run(cfg, out_dir=tmp_path / "out")
    assert len(out.rows) == 2
    assert out.rows[0]["n_clients"] == 1
    assert out.rows[1]["n_clients"] == 3


# ---------------------------------------------------------------------------
# relative values
# ---------------------------------------------------------------------------

def test_relative_values_self_difference_zero():
    market = MarketParams(1.0, 1.0, 1.0, 0.1, 1e-3)
    agents = [AgentParams(0.1, 0.0255), AgentParams(0.08, 0.015)]
    sess = ProblemSession(market, agents, TimeGrid(80, 1.0))
    base = sess.report((0, 0))
    rel = relative_values(base, base)
    assert all(v == 0.0 for v in rel.values())


def test_relative_values_requires_matching_parameters():
    market = MarketParams(1.0, 1.0, 1.0, 0.1, 1e-3)
    agents = [AgentParams(0.1, 0.0255), AgentParams(0.08, 0.015)]
    sess = ProblemSession(market, agents, TimeGrid(80, 1.0))
    other = ProblemSession(MarketParams(1.0, 1.0, 1.0, 0.09, 1e-3), agents,
                           TimeGrid(80, 1.0))
    with pytest.raises(InvalidProblem):
        relative_values(sess.report((1, 0)), other.report((0, 0)))
    with pytest.raises(InvalidProblem):
        relative_values(sess.report((1, 0)), sess.report((0, 1)))


def test_relative_values_star_vs_baseline():
    market = MarketParams(1.0, 1.0, 1.0, 0.1, 1e-3)
    agents = [AgentParams(0.1, 0.0255), AgentParams(0.08, 0.015)]
    sess = ProblemSession(market, agents, TimeGrid(80, 1.0))
    star = sess.report((1, 0))
    base = sess.report((0, 0))
    rel = relative_values(star, base)
    assert rel[0] == pytest.approx(star.reservations[0] - base.independent_values[0])
    assert rel[1] == pytest.approx(star.independent_values[1] - base.independent_values[1])
