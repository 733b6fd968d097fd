"""Experiment runner: config loading, suite execution, CSV/JSON emission.

The configuration is one flat JSON document.  Presets from ``presets.py``
resolve first and explicit keys override them.  Output is deterministic:
rows are emitted in sweep order regardless of worker completion order, and
numbers are printed with 17 significant digits and UNIX line endings.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, InvalidProblem, WellPosednessViolated
from .model import AgentParams, MarketParams, Portfolio, TimeGrid
from .montecarlo import SimConfig, simulate
from .presets import PRESETS
from .search import exhaustive_search, percentile_portfolios
from .valuation import ProblemSession, ValuationReport

_TOP_KEYS = {
    "preset", "kind", "mu", "sigma", "horizon", "kappa0", "lambda0",
    "agents", "agent_generator", "grid", "theta", "sweep", "percentile",
    "kappa0_range", "kappa0_count", "montecarlo", "out", "threads", "n_max",
}
_KINDS = {"solve", "search", "sweep2d", "percentile", "kappa0_sweep", "montecarlo"}

_DEFAULTS = {
    "mu": 1.0, "sigma": 1.0, "horizon": 1.0, "lambda0": 0.0,
    "grid": 200, "out": "results", "threads": 1, "n_max": 16,
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    market: MarketParams
    agents: tuple[AgentParams, ...]
    grid_size: int
    out: str
    threads: int
    n_max: int
    theta: tuple[int, ...] | None = None
    sweep: dict | None = None
    percentile: dict | None = None
    kappa0_range: tuple[float, float] | None = None
    kappa0_count: int | None = None
    montecarlo: dict | None = None
    raw: dict = field(default_factory=dict)


def _generate_agents(spec: dict) -> list[AgentParams]:
    kind = spec.get("type")
    n = spec.get("n")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("agent_generator needs a positive integer 'n'")
    x0 = float(spec.get("x0", 0.0))
    if kind == "uniform":
        if "seed" not in spec:
            raise ConfigError("uniform agent_generator requires a 'seed'")
        rng = np.random.default_rng(int(spec["seed"]))
        if "kappa" in spec:
            kappas = np.full(n, float(spec["kappa"]))
        else:
            kappas = rng.uniform(float(spec["kappa_low"]), float(spec["kappa_high"]), n)
        if "lam" in spec:
            lams = np.full(n, float(spec["lam"]))
        else:
            lams = rng.uniform(float(spec["lam_low"]), float(spec["lam_high"]), n)
        return [AgentParams(kappa=float(k), lam=float(l), x0=x0)
                for k, l in zip(kappas, lams)]
    if kind == "ramp":
        out = []
        for i in range(1, n + 1):
            kappa = spec["kappa_base"] + (i / n) * (spec["kappa_end"] - spec["kappa_base"])
            lam = spec["lam_base"] + (i / n) * (spec["lam_end"] - spec["lam_base"])
            out.append(AgentParams(kappa=float(kappa), lam=float(lam), x0=x0))
        return out
    raise ConfigError(f"unknown agent_generator type {kind!r}")


def load_config(path) -> ExperimentConfig:
    """Read, preset-resolve and validate one experiment configuration."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(user)


def resolve_config(user: dict) -> ExperimentConfig:
    unknown = set(user) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(_DEFAULTS)
    preset_name = user.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; "
                              f"available: {sorted(PRESETS)}")
        merged.update(PRESETS[preset_name])
    merged.update({k: v for k, v in user.items() if k != "preset"})

    kind = merged.get("kind")
    if kind not in _KINDS:
        raise ConfigError(f"config needs exactly one experiment kind from {sorted(_KINDS)}")
    if "agents" in merged and "agent_generator" in merged:
        raise ConfigError("'agents' and 'agent_generator' are mutually exclusive")
    if "agents" in merged:
        try:
            agents = [AgentParams(kappa=float(a["kappa"]), lam=float(a["lam"]),
                                  x0=float(a.get("x0", 0.0)))
                      for a in merged["agents"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed 'agents' entry: {exc}") from exc
    elif "agent_generator" in merged:
        agents = _generate_agents(merged["agent_generator"])
    else:
        raise ConfigError("config needs 'agents' or 'agent_generator'")
    if "kappa0" not in merged:
        raise ConfigError("config needs 'kappa0'")

    market = MarketParams(mu=float(merged["mu"]), sigma=float(merged["sigma"]),
                          horizon=float(merged["horizon"]),
                          kappa0=float(merged["kappa0"]),
                          lambda0=float(merged["lambda0"]))
    theta = tuple(int(v) for v in merged["theta"]) if "theta" in merged else None
    kr = merged.get("kappa0_range")
    return ExperimentConfig(
        kind=kind, market=market, agents=tuple(agents),
        grid_size=int(merged["grid"]), out=str(merged["out"]),
        threads=int(merged["threads"]), n_max=int(merged["n_max"]),
        theta=theta, sweep=merged.get("sweep"), percentile=merged.get("percentile"),
        kappa0_range=tuple(float(v) for v in kr) if kr else None,
        kappa0_count=merged.get("kappa0_count"), montecarlo=merged.get("montecarlo"),
        raw=merged)


# ---------------------------------------------------------------------------
# parameter axes for sweeps
# ---------------------------------------------------------------------------

_AXIS_RE = re.compile(r"^(lambda|kappa)(\d+)$")


def _apply_axis(market: MarketParams, agents: tuple[AgentParams, ...],
                name: str, value: float):
    if name in ("mu", "kappa0", "lambda0"):
        return dataclasses.replace(market, **{name: value}), agents
    match = _AXIS_RE.match(name)
    if not match:
        raise ConfigError(f"unknown sweep parameter {name!r}")
    idx = int(match.group(2)) - 1
    if not 0 <= idx < len(agents):
        raise ConfigError(f"sweep parameter {name!r} addresses a missing agent")
    fieldname = "lam" if match.group(1) == "lambda" else "kappa"
    updated = list(agents)
    updated[idx] = dataclasses.replace(agents[idx], **{fieldname: value})
    return market, tuple(updated)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return "(" + ",".join(str(int(v)) for v in value) + ")"
    return str(value)


def _theta_str(theta) -> str:
    return "(" + ",".join(str(int(v)) for v in theta) + ")"


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------


def _agent_value_columns(n: int) -> list[str]:
    return [f"value_agent_{i}" for i in range(n)]


def _report_agent_values(report: ValuationReport) -> dict[str, float]:
    return {f"value_agent_{i}": report.agent_value(i)
            for i in range(len(report.agents))}


def _run_solve(config: ExperimentConfig, grid: TimeGrid, threads: int):
    theta = config.theta if config.theta is not None else (1,) * len(config.agents)
    session = ProblemSession(config.market, config.agents, grid)
    report = session.report(theta)
    row = {"theta": _theta_str(theta), "V_P": report.broker_value,
           "objective": report.objective_value, "margin": report.margin}
    row.update(_report_agent_values(report))
    for i in report.part.clients:
        row[f"fee_agent_{i}"] = report.expected_fees[i]
    return [row], {}


def _run_search(config: ExperimentConfig, grid: TimeGrid, threads: int):
    session = ProblemSession(config.market, config.agents, grid)
    result = exhaustive_search(session, n_max=config.n_max)
    rows = []
    for theta, value in result.evaluated:
        rep = result.reports[theta]
        row = {"theta": _theta_str(theta), "V_P": value,
               "is_best": int(theta == result.best_theta.theta),
               "margin": rep.margin}
        row.update(_report_agent_values(rep))
        rows.append(row)
    meta = {"best_theta": _theta_str(result.best_theta.theta),
            "best_value": result.best_value,
            "failures": [{"theta": _theta_str(t), "reason": r}
                         for t, r in result.failures]}
    return rows, meta


def _sweep_points(config: ExperimentConfig):
    sw = config.sweep or {}
    for key in ("x", "y", "x_range", "y_range", "x_count", "y_count"):
        if key not in sw:
            raise ConfigError(f"sweep2d config needs sweep.{key}")
    xs = np.linspace(sw["x_range"][0], sw["x_range"][1], int(sw["x_count"]))
    ys = np.linspace(sw["y_range"][0], sw["y_range"][1], int(sw["y_count"]))
    return sw["x"], sw["y"], [(float(x), float(y)) for x in xs for y in ys]


def _run_sweep2d(config: ExperimentConfig, grid: TimeGrid, threads: int):
    x_name, y_name, points = _sweep_points(config)

    def evaluate(point):
        x, y = point
        market, agents = _apply_axis(config.market, config.agents, x_name, x)
        market, agents = _apply_axis(market, agents, y_name, y)
        session = ProblemSession(market, agents, grid)
        result = exhaustive_search(session, n_max=config.n_max)
        report = result.reports[result.best_theta.theta]
        row = {x_name: x, y_name: y, "V_P": result.best_value,
               "theta_star": _theta_str(result.best_theta.theta),
               "margin": report.margin}
        row.update(_report_agent_values(report))
        failures = [{"theta": _theta_str(t), "reason": r} for t, r in result.failures]
        return row, failures

    rows, all_failures = [], []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for row, failures in pool.map(evaluate, points):
            rows.append(row)
            all_failures.extend(failures)
    heatmap = [{"x": r[x_name], "y": r[y_name], "value": r["V_P"]} for r in rows]
    return rows, {"failures": all_failures, "heatmap": heatmap}


def _run_percentile(config: ExperimentConfig, grid: TimeGrid, threads: int):
    pc = config.percentile or {}
    key = pc.get("key", "lambda")
    directions = pc.get("directions", ["lowest", "highest"])
    if "p_list" in pc:
        p_list = [float(p) for p in pc["p_list"]]
    else:
        count = int(pc.get("p_count", 10))
        p_list = [k / count for k in range(1, count + 1)]
    session = ProblemSession(config.market, config.agents, grid)
    rows = []
    for direction in directions:
        for entry in percentile_portfolios(session, key, direction, p_list):
            rows.append({
                "direction": direction, "p": entry.p,
                "theta": _theta_str(entry.theta),
                "n_clients": sum(entry.theta),
                "V_P": entry.value if entry.ok else "",
                "margin": entry.margin,
                "error": entry.error or "",
            })
    return rows, {}


def _run_kappa0_sweep(config: ExperimentConfig, grid: TimeGrid, threads: int):
    if config.kappa0_range is None or config.kappa0_count is None:
        raise ConfigError("kappa0_sweep needs kappa0_range and kappa0_count")
    lo, hi = config.kappa0_range
    values = np.linspace(lo, hi, int(config.kappa0_count))
    baseline_theta = (0,) * len(config.agents)

    def evaluate(kappa0):
        market = dataclasses.replace(config.market, kappa0=float(kappa0))
        session = ProblemSession(market, config.agents, grid)
        result = exhaustive_search(session, n_max=config.n_max)
        best = result.reports[result.best_theta.theta]
        baseline = result.reports[baseline_theta]
        rel = relative_values(best, baseline)
        row = {"kappa0": float(kappa0), "theta_star": _theta_str(best.theta),
               "n_clients": sum(best.theta), "V_P": result.best_value,
               "margin": best.margin}
        row.update({f"relative_value_agent_{i}": rel[i] for i in sorted(rel)})
        failures = [{"kappa0": float(kappa0), "theta": _theta_str(t), "reason": r}
                    for t, r in result.failures]
        return row, failures

    rows, all_failures = [], []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for row, failures in pool.map(evaluate, [float(v) for v in values]):
            rows.append(row)
            all_failures.extend(failures)
    return rows, {"failures": all_failures}


def _run_montecarlo(config: ExperimentConfig, grid: TimeGrid, threads: int):
    mc = config.montecarlo or {}
    n_paths = int(mc.get("n_paths", 1000))
    seed = int(mc.get("seed", 0))
    theta = config.theta if config.theta is not None else (1,) * len(config.agents)
    session = ProblemSession(config.market, config.agents, grid)
    report = session.report(theta)
    summary = simulate(report, SimConfig(n_paths=n_paths, seed=seed, grid=grid))
    fee_mean, fee_std = summary.fee_mean(), summary.fee_std()
    net_mean, net_std = summary.net_mean(), summary.net_std()
    rows = []
    for j, label in enumerate(summary.client_labels):
        R = report.reservations[label]
        rows.append({
            "agent": label, "reservation": R,
            "expected_fee": report.expected_fees[label],
            "fee_mean": fee_mean[label], "fee_std": fee_std[label],
            "net_mean": net_mean[label], "net_std": net_std[label],
            "max_abs_net_minus_R": float(np.max(np.abs(summary.client_net[:, j] - R))),
            "margin": report.margin,
        })
    return rows, {"n_paths": n_paths, "seed": seed, "theta": _theta_str(theta)}


_RUNNERS = {
    "solve": _run_solve,
    "search": _run_search,
    "sweep2d": _run_sweep2d,
    "percentile": _run_percentile,
    "kappa0_sweep": _run_kappa0_sweep,
    "montecarlo": _run_montecarlo,
}


def relative_values(star: ValuationReport, baseline: ValuationReport) -> dict[int, float]:
    """Per-agent equilibrium value under star's portfolio minus the no-broker value.

    Clients are valued at their reservation (the contract pins them there);
    the baseline must be the all-independent run of the same problem.
    """
    if any(baseline.theta):
        raise InvalidProblem("baseline run must use the all-zeros portfolio")
    if (star.market != baseline.market or star.agents != baseline.agents
            or star.grid != baseline.grid):
        raise InvalidProblem("relative values need runs with identical parameters")
    return {i: star.agent_value(i) - baseline.independent_values[i]
            for i in range(len(star.agents))}


def _write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="\n") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) if not isinstance(v, str) else v
                             for k, v in row.items()})


@dataclass(frozen=True)
class RunOutput:
    out_dir: Path
    results_csv: Path
    meta_json: Path
    heatmap_csv: Path | None
    rows: list[dict]


def run(config: ExperimentConfig, out_dir=None, grid_size: int | None = None,
        threads: int | None = None) -> RunOutput:
    """Execute the configured experiment and write results.csv / meta.json
    (plus heatmap.csv for 2-D sweeps)."""
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    n_grid = int(grid_size if grid_size is not None else config.grid_size)
    n_threads = max(1, int(threads if threads is not None else config.threads))
    grid = TimeGrid(n_grid, config.market.horizon)

    # parallelism lives at the sweep-point level; the per-solve matrices are
    # far too small for BLAS threading to help
    with threadpool_limits(limits=1):
        rows, extra_meta = _RUNNERS[config.kind](config, grid, n_threads)

    results_csv = out / "results.csv"
    _write_csv(results_csv, rows)

    heatmap_csv = None
    heatmap = extra_meta.pop("heatmap", None)
    if heatmap is not None:
        heatmap_csv = out / "heatmap.csv"
        _write_csv(heatmap_csv, heatmap)

    meta = {
        "version": __version__,
        "kind": config.kind,
        "grid": n_grid,
        "threads": n_threads,
        "config": config.raw,
        "agents": [dataclasses.asdict(a) for a in config.agents],
        "market": dataclasses.asdict(config.market),
        "rows": len(rows),
    }
    meta.update(extra_meta)
    meta_json = out / "meta.json"
    meta_json.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return RunOutput(out_dir=out, results_csv=results_csv, meta_json=meta_json,
                     heatmap_csv=heatmap_csv, rows=rows)
