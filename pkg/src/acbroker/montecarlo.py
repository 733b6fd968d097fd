"""Monte Carlo verification of the deterministic pipeline.

Simulates Brownian price paths, realizes the first-best fees pathwise and
checks the contract properties the deterministic solver asserts: each
client's net profit equals its reservation (up to an O(dt) quadrature
convention gap that vanishes at sigma = 0), and no agent gains from
unilateral deviations.

Quadrature conventions: the deterministic component of int nu P dt is the
exact cell average for piecewise-constant rates on both sides; the Brownian
component is sampled with the node trapezoid in the fee realization and with
the left node (the non-anticipating trader convention) in the client's cash
P&L.  The two coincide in expectation and at sigma = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidProblem
from .model import FlowPath, TimeGrid
from .valuation import (ValuationReport, build_price_components,
                        independent_agent_value)


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    seed: int
    grid: TimeGrid

    def __post_init__(self):
        if self.n_paths < 1:
            raise InvalidProblem(f"n_paths must be >= 1, got {self.n_paths}")


def brownian_increments(config: SimConfig, path_index: int) -> np.ndarray:
    """Increments of one path from a splittable stream keyed by (seed, path).

    Streams are independent per path index, so changing n_paths never
    reshuffles earlier paths.
    """
    seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(path_index,))
    rng = np.random.Generator(np.random.Philox(seq))
    return rng.standard_normal(config.grid.n_steps) * np.sqrt(config.grid.dt)


@dataclass(frozen=True)
class PathRealization:
    """One simulated path: price, inventories, realized fees and profits."""

    increments: np.ndarray
    price_nodes: np.ndarray
    inventories: dict[int, np.ndarray]
    fees: dict[int, float]
    net_profits: dict[int, float]


@dataclass(frozen=True)
class SimulationSummary:
    client_labels: tuple[int, ...]
    independent_labels: tuple[int, ...]
    fees: np.ndarray           # (n_paths, n_clients)
    client_net: np.ndarray     # (n_paths, n_clients)
    independent_profit: np.ndarray  # (n_paths, n_independents)

    def fee_mean(self):
        return dict(zip(self.client_labels, np.mean(self.fees, axis=0)))

    def fee_std(self):
        return dict(zip(self.client_labels, np.std(self.fees, axis=0, ddof=1)))

    def net_mean(self):
        return dict(zip(self.client_labels, np.mean(self.client_net, axis=0)))

    def net_std(self):
        return dict(zip(self.client_labels, np.std(self.client_net, axis=0)))


def _deterministic_pieces(report: ValuationReport):
    part = report.part
    agents = report.agents
    indep_params = [agents[i] for i in part.independents]
    price = build_price_components(
        report.market, report.grid,
        indep_flows=report.equilibrium.nu_star,
        indep_x0=[agents[i].x0 for i in part.independents],
        client_flows=[report.client_flows[i] for i in part.clients],
        client_x0=[agents[i].x0 for i in part.clients],
        indep_params=indep_params)
    return price


def simulate(report: ValuationReport, config: SimConfig,
             keep_paths: bool = False):
    """Realize fees and profits on config.n_paths Brownian paths.

    Returns a SimulationSummary (and the list of PathRealization objects when
    keep_paths is set).
    """
    if config.grid != report.grid:
        raise InvalidProblem("simulation grid must match the report grid")
    grid = report.grid
    n = grid.n_steps
    dt = grid.dt
    sigma = report.market.sigma
    part = report.part
    agents = report.agents
    price = _deterministic_pieces(report)

    client_labels = part.clients
    indep_labels = part.independents
    client_flows = [report.client_flows[i] for i in client_labels]
    client_xT = [f.inventory(agents[i].x0)[-1] for i, f in zip(client_labels, client_flows)]
    indep_flows = list(report.equilibrium.nu_star)
    indep_xT = [f.inventory(agents[i].x0)[-1] for i, f in zip(indep_labels, indep_flows)]

    fees = np.empty((config.n_paths, len(client_labels)))
    nets = np.empty((config.n_paths, len(client_labels)))
    indep_profit = np.empty((config.n_paths, len(indep_labels)))
    paths = []

    for p in range(config.n_paths):
        dB = brownian_increments(config, p)
        B = np.concatenate([[0.0], np.cumsum(dB)])
        terminal_price = price.det_nodes[-1] + sigma * B[-1]
        cell_trapezoid = price.det_cells + sigma * (B[:-1] + B[1:]) / 2.0
        cell_ito = price.det_cells + sigma * B[:-1]

        fee_row = np.empty(len(client_labels))
        net_row = np.empty(len(client_labels))
        for c, (label, flow, xT) in enumerate(zip(client_labels, client_flows, client_xT)):
            lam = agents[label].lam
            gross_contract = (terminal_price * xT
                              - dt * float(flow.values @ cell_trapezoid)
                              - lam * xT ** 2 / 2.0)
            fee_row[c] = gross_contract - report.reservations[label]
            cash_pnl = (terminal_price * xT
                        - dt * float(flow.values @ cell_ito)
                        - lam * xT ** 2 / 2.0)
            net_row[c] = cash_pnl - fee_row[c]
        fees[p] = fee_row
        nets[p] = net_row

        for c, (label, flow, xT) in enumerate(zip(indep_labels, indep_flows, indep_xT)):
            lam = agents[label].lam
            indep_profit[p, c] = (terminal_price * xT
                                  - dt * float(flow.values @ cell_ito)
                                  - lam * xT ** 2 / 2.0)

        if keep_paths:
            price_nodes = price.det_nodes + sigma * B
            inventories = {label: flow.inventory(agents[label].x0)
                           for label, flow in zip(client_labels, client_flows)}
            inventories.update({label: flow.inventory(agents[label].x0)
                                for label, flow in zip(indep_labels, indep_flows)})
            net_all = dict(zip(client_labels, net_row))
            net_all.update(dict(zip(indep_labels, indep_profit[p])))
            paths.append(PathRealization(
                increments=dB, price_nodes=price_nodes, inventories=inventories,
                fees=dict(zip(client_labels, fee_row)), net_profits=net_all))

    summary = SimulationSummary(
        client_labels=client_labels, independent_labels=indep_labels,
        fees=fees, client_net=nets, independent_profit=indep_profit)
    return (summary, paths) if keep_paths else summary


def deviation_test(report: ValuationReport, agent: int, n_directions: int = 20,
                   eps: float = 1e-3, seed: int = 0) -> float:
    """Largest objective gain agent can achieve by a unilateral cellwise
    perturbation of size eps (both signs tried per direction).

    Independent agents are evaluated through their equilibrium objective;
    clients through realized contract accounting, where the first-best fee
    makes the net profit identically the reservation.
    """
    grid = report.grid
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_directions, grid.n_steps))

    if agent in report.part.independents:
        pos = report.part.independents.index(agent)
        x0 = report.agents[agent].x0
        base = independent_agent_value(pos, report.equilibrium, report.mats,
                                       report.market, x0_i=x0)
        best = -np.inf
        for phi in directions:
            for s in (eps, -eps):
                val = independent_agent_value(pos, report.equilibrium, report.mats,
                                              report.market, x0_i=x0,
                                              own_delta=s * phi)
                best = max(best, val - base)
        return float(best)

    if agent not in report.part.clients:
        raise InvalidProblem(f"agent {agent} not in the portfolio")
    # A client's deviation changes the broker flow and hence the price, but the
    # fee recomputes from the realized path, so the net profit stays at R.
    label_pos = report.part.clients.index(agent)
    base_flow = report.client_flows[agent]
    lam = report.agents[agent].lam
    x0 = report.agents[agent].x0
    R = report.reservations[agent]
    best = -np.inf
    for phi in directions:
        for s in (eps, -eps):
            flow = FlowPath(grid, base_flow.values + s * phi)
            client_flows = [report.client_flows[i] for i in report.part.clients]
            client_flows[label_pos] = flow
            price = build_price_components(
                report.market, grid,
                indep_flows=report.equilibrium.nu_star,
                indep_x0=[report.agents[i].x0 for i in report.part.independents],
                client_flows=client_flows,
                client_x0=[report.agents[i].x0 for i in report.part.clients],
                indep_params=[report.agents[i] for i in report.part.independents])
            xT = flow.inventory(x0)[-1]
            gross = (price.det_nodes[-1] * xT
                     - grid.dt * float(flow.values @ price.det_cells)
                     - lam * xT ** 2 / 2.0)
            fee = gross - R
            best = max(best, (gross - fee) - R)
    return float(best)
