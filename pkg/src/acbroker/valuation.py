"""Agent values, endogenous reservations, fees and the broker value report.

Two quadrature tiers coexist deliberately:

* money flows (prices, fees, the broker objective) live on the cellwise
  grid where flows are piecewise constant, so the fee/value accounting
  identities hold to rounding;
* agent *values* (reservations, independent profits, deviation checks) are
  integrated per cell with Simpson's rule on (node, midpoint, node) samples
  of the smooth equilibrium objects, which reproduces closed-form values to
  O(dt^4) instead of the O(dt^2) a plug-in cell quadrature would give.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .broker import (BrokerObjectiveContext, BrokerSolutionFlow, build_context,
                     check_wellposedness, eval_objective, solve_optimal_flow)
from .equilibrium import (EquilibriumSolution, ExpTables, InteractionMatrices,
                          build_matrices, exp_table, solve_equilibrium)
from .errors import InvalidProblem, WellPosednessViolated
from .model import (AgentParams, FlowPath, MarketParams, Partition, Portfolio,
                    TimeGrid, partition, validate_problem)

# ---------------------------------------------------------------------------
# half-grid path calculus (cell samples at left node, midpoint, right node)
# ---------------------------------------------------------------------------


def _simpson_cells(dt: float, left, mid, right) -> float:
    """Integral over [0, T] of a path sampled per cell; exact through cubics."""
    return float(np.sum(left + 4.0 * mid + right) * dt / 6.0)


def _cumulate_cells(dt: float, left, mid, right, x0: float):
    """Cumulative integral of a per-cell sampled rate.

    Returns values at cell left nodes, midpoints and right nodes; the half-cell
    rules are the quadratic-exact Newton-Cotes weights on the 3 samples.
    """
    h = dt / 2.0
    first_half = h * (5.0 * left + 8.0 * mid - right) / 12.0
    full = dt * (left + 4.0 * mid + right) / 6.0
    x_left = x0 + np.concatenate([[0.0], np.cumsum(full)[:-1]])
    return x_left, x_left + first_half, x_left + full


def _rate_samples(eq: EquilibriumSolution, mats: InteractionMatrices, kappa0: float):
    """Equilibrium rate samples (left, mid, right), each (n, m).

    The adjoint-driven part is continuous; the broker-flow part is constant
    within each cell, so the one-sided node samples use the cell's u value.
    """
    m = mats.m
    mp1 = m + 1
    uv = eq.u.values
    yn, ym = eq.y.nodes, eq.y.mids
    s_nodes = np.sum(yn, axis=1, keepdims=True)
    s_mids = np.sum(ym, axis=1, keepdims=True)
    smooth_nodes = (yn - s_nodes / mp1) / mats.kappas[None, :]
    smooth_mids = (ym - s_mids / mp1) / mats.kappas[None, :]
    const = -(kappa0 / mp1) * uv[:, None] / mats.kappas[None, :]
    left = smooth_nodes[:-1] + const
    mid = smooth_mids + const
    right = smooth_nodes[1:] + const
    return left, mid, right


def independent_agent_value(i: int, eq: EquilibriumSolution, mats: InteractionMatrices,
                            market: MarketParams, x0_i: float = 0.0,
                            own_delta: np.ndarray | None = None) -> float:
    """Expected profit of independent agent i (internal index) in equilibrium.

    J_i = int X_i (mu + sum_{j != i} lambda_j nu_j + lambda0 u) dt
          - int nu_i (sum_j kappa_j nu_j + kappa0 u) dt - lambda_i x0_i^2 / 2.

    ``own_delta`` adds a cellwise perturbation to agent i's own rate, which is
    what the Nash deviation checks exercise.
    """
    m = mats.m
    if not 0 <= i < m:
        raise InvalidProblem(f"agent index {i} outside 0..{m - 1}")
    dt = eq.u.grid.dt
    uv = eq.u.values
    left, mid, right = _rate_samples(eq, mats, market.kappa0)
    own = [left[:, i].copy(), mid[:, i].copy(), right[:, i].copy()]
    if own_delta is not None:
        delta = np.asarray(own_delta, dtype=float)
        own = [s + delta for s in own]

    lam_i, kap_i = mats.lambdas[i], mats.kappas[i]
    value = 0.0
    x_parts = _cumulate_cells(dt, own[0], own[1], own[2], x0_i)
    for s, (rates, own_s, x_i) in enumerate(zip((left, mid, right), own, x_parts)):
        drive = market.mu + market.lambda0 * uv + rates @ mats.lambdas - lam_i * rates[:, i]
        cost = rates @ mats.kappas - kap_i * rates[:, i] + kap_i * own_s + market.kappa0 * uv
        integrand = x_i * drive - own_s * cost
        weight = 4.0 if s == 1 else 1.0
        value += weight * np.sum(integrand)
    return float(value * dt / 6.0 - lam_i * x0_i ** 2 / 2.0)


# ---------------------------------------------------------------------------
# client side: allocation, prices, fees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientAllocation:
    """Terminal inventories and a feasible per-client split of the broker flow."""

    terminal_inventories: tuple[float, ...]
    flows: tuple[FlowPath, ...]
    penalty: float  # attained sum of lambda_i X_i(T)^2 / 2


def client_allocation(u_star: FlowPath, clients: Sequence[AgentParams]) -> ClientAllocation:
    """Quadratic-penalty-minimal terminal inventories and a matching flow split.

    X_i(T) = (X0(T) + sum_j x0_j) / (lambda_i sum_j 1/lambda_j); the flows are
    proportional shares of u plus constant corrections that sum to zero and
    land each client exactly on X_i(T).
    """
    if not clients:
        raise InvalidProblem("client allocation needs a non-empty client set")
    lams = np.array([a.lam for a in clients])
    x0s = np.array([a.x0 for a in clients])
    inv_sum = float(np.sum(1.0 / lams))
    x0_total = float(np.sum(x0s))
    x_total = u_star.total() + x0_total
    weights = 1.0 / (lams * inv_sum)
    terminal = x_total * weights
    corrections = (x0_total * weights - x0s) / u_star.grid.horizon
    flows = tuple(FlowPath(u_star.grid, w * u_star.values + c)
                  for w, c in zip(weights, corrections))
    penalty = float(np.sum(lams * terminal ** 2) / 2.0)
    return ClientAllocation(terminal_inventories=tuple(terminal), flows=flows,
                            penalty=penalty)


@dataclass(frozen=True)
class PriceComponents:
    """Deterministic part of the price path on the grid.

    det_nodes[j] is the price at node j (terminal node carries no temporary
    impact: rates vanish at T); det_cells[k] is the exact cell average of the
    deterministic price over cell k given piecewise-constant rates.
    """

    det_nodes: np.ndarray
    det_cells: np.ndarray


def build_price_components(market: MarketParams, grid: TimeGrid,
                           indep_flows: Sequence[FlowPath], indep_x0: Sequence[float],
                           client_flows: Sequence[FlowPath], client_x0: Sequence[float],
                           indep_params: Sequence[AgentParams],
                           ) -> PriceComponents:
    n = grid.n_steps
    u = np.sum([f.values for f in client_flows], axis=0) if client_flows else np.zeros(n)
    temp = market.kappa0 * u
    perm = np.zeros(n + 1)
    for f, x0 in zip(client_flows, client_x0):
        perm += market.lambda0 * f.inventory(x0)
    for f, x0, a in zip(indep_flows, indep_x0, indep_params):
        temp += a.kappa * f.values
        perm += a.lam * f.inventory(x0)
    det_nodes = market.mu * grid.nodes + perm
    det_nodes[:-1] += temp
    det_cells = market.mu * grid.midpoints + temp + (perm[:-1] + perm[1:]) / 2.0
    return PriceComponents(det_nodes=det_nodes, det_cells=det_cells)


def expected_client_pnl(flow: FlowPath, x0: float, lam: float,
                        price: PriceComponents) -> float:
    """E[P_T X_T - int nu P dt] - lambda X_T^2 / 2 with deterministic paths."""
    x_T = flow.inventory(x0)[-1]
    dt = flow.grid.dt
    return float(price.det_nodes[-1] * x_T
                 - dt * float(flow.values @ price.det_cells)
                 - lam * x_T ** 2 / 2.0)


def expected_fee(flow: FlowPath, x0: float, lam: float, price: PriceComponents,
                 reservation: float) -> float:
    """Expected first-best fee: the client's gross trading P&L minus R."""
    return expected_client_pnl(flow, x0, lam, price) - reservation


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoreSolution:
    """Reservation-free solve for one portfolio: u*, equilibrium, agent values."""

    theta: tuple[int, ...]
    part: Partition
    mats: InteractionMatrices
    tables: ExpTables
    ctx: BrokerObjectiveContext | None
    flow_solution: BrokerSolutionFlow | None
    u_star: FlowPath
    equilibrium: EquilibriumSolution
    independent_values: dict[int, float]
    margin: float
    assumption_holds: bool

    @property
    def objective_zero_reservations(self) -> float:
        return self.flow_solution.objective_value if self.flow_solution else 0.0


@dataclass(frozen=True)
class ValuationReport:
    """Full valuation of one portfolio.

    broker_value is the sum of expected first-best fees (what the broker
    collects); objective_value is the reduced objective at u*, which matches
    broker_value exactly on all-client portfolios and to O(dt^2) otherwise.
    """

    theta: tuple[int, ...]
    broker_value: float
    objective_value: float
    reservations: dict[int, float]
    independent_values: dict[int, float]
    expected_fees: dict[int, float]
    client_terminal_inventories: dict[int, float]
    client_flows: dict[int, FlowPath]
    u_star: FlowPath
    equilibrium: EquilibriumSolution
    mats: InteractionMatrices
    part: Partition
    margin: float
    assumption_holds: bool
    market: MarketParams
    agents: tuple[AgentParams, ...]
    grid: TimeGrid

    def agent_value(self, i: int) -> float:
        """Equilibrium value of agent i: reservation if client, profit if not."""
        if i in self.reservations:
            return self.reservations[i]
        return self.independent_values[i]


class ProblemSession:
    """Shared state for valuing many portfolios of one agent population.

    Core solves are memoized per portfolio (they are reused both as full
    evaluations and as flipped-portfolio reservation sub-solves); the cache
    uses insert-or-get semantics and is safe for concurrent readers.
    """

    def __init__(self, market: MarketParams, agents: Sequence[AgentParams],
                 grid: TimeGrid | None = None, memoize: bool = True,
                 strict_wellposed: bool = False):
        report = validate_problem(market, agents)
        if not report.ok:
            raise InvalidProblem("; ".join(report.violations))
        self.market = market
        self.agents = tuple(agents)
        self.grid = grid or TimeGrid(200, market.horizon)
        self.memoize = memoize
        self.strict_wellposed = strict_wellposed
        self._cores: dict[tuple[int, ...], CoreSolution] = {}
        self._lock = threading.Lock()

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def _as_theta(self, portfolio) -> tuple[int, ...]:
        theta = portfolio.theta if isinstance(portfolio, Portfolio) else tuple(portfolio)
        if len(theta) != self.n_agents:
            raise InvalidProblem(
                f"portfolio has {len(theta)} entries for {self.n_agents} agents")
        return theta

    def core(self, portfolio) -> CoreSolution:
        theta = self._as_theta(portfolio)
        if self.memoize:
            with self._lock:
                hit = self._cores.get(theta)
            if hit is not None:
                return hit
        sol = self._solve_core(theta)
        if self.memoize:
            with self._lock:
                sol = self._cores.setdefault(theta, sol)
        return sol

    def _solve_core(self, theta: tuple[int, ...]) -> CoreSolution:
        part = partition(Portfolio(theta))
        independents = [self.agents[i] for i in part.independents]
        clients = [self.agents[i] for i in part.clients]
        mats = build_matrices(independents, self.market)
        tables = exp_table(mats.A, self.grid)
        wp = check_wellposedness(mats, self.market)
        if clients:
            ctx = build_context(mats, self.grid, self.market, clients,
                                reservation_sum=0.0, tables=tables)
            try:
                flow_solution = solve_optimal_flow(ctx, strict=self.strict_wellposed)
            except WellPosednessViolated as exc:
                raise WellPosednessViolated(
                    f"portfolio {theta}: {exc}", theta=theta, margin=wp.margin) from exc
            u_star = flow_solution.u_star
        else:
            ctx = None
            flow_solution = None
            u_star = FlowPath.zero(self.grid)
        eq = solve_equilibrium(mats, u_star, self.market, self.grid, tables)
        values = {
            label: independent_agent_value(pos, eq, mats, self.market,
                                           x0_i=self.agents[label].x0)
            for pos, label in enumerate(part.independents)
        }
        return CoreSolution(theta=theta, part=part, mats=mats, tables=tables,
                            ctx=ctx, flow_solution=flow_solution, u_star=u_star,
                            equilibrium=eq, independent_values=values,
                            margin=wp.margin, assumption_holds=wp.holds)

    def wellposedness_margin(self, portfolio) -> float:
        """Assumption margin for one portfolio without running a solve."""
        theta = self._as_theta(portfolio)
        part = partition(Portfolio(theta))
        mats = build_matrices([self.agents[i] for i in part.independents], self.market)
        return check_wellposedness(mats, self.market).margin

    def reservations(self, portfolio) -> dict[int, float]:
        """Endogenous reservation of each client: its independent value in the
        portfolio with its own entry flipped to zero."""
        theta = self._as_theta(portfolio)
        out: dict[int, float] = {}
        for i, flag in enumerate(theta):
            if flag:
                flipped = Portfolio(theta).flip(i).theta
                out[i] = self.core(flipped).independent_values[i]
        return out

    def report(self, portfolio) -> ValuationReport:
        theta = self._as_theta(portfolio)
        core = self.core(theta)
        part = core.part
        clients = [self.agents[i] for i in part.clients]
        reservations = self.reservations(theta)
        reservation_sum = sum(reservations.values())

        if clients:
            alloc = client_allocation(core.u_star, clients)
            price = build_price_components(
                self.market, self.grid,
                indep_flows=core.equilibrium.nu_star,
                indep_x0=[self.agents[i].x0 for i in part.independents],
                client_flows=alloc.flows,
                client_x0=[a.x0 for a in clients],
                indep_params=[self.agents[i] for i in part.independents])
            fees = {
                label: expected_fee(flow, a.x0, a.lam, price, reservations[label])
                for label, a, flow in zip(part.clients, clients, alloc.flows)
            }
            broker_value = float(sum(fees.values()))
            objective_value = core.objective_zero_reservations - reservation_sum
            terminal = dict(zip(part.clients, alloc.terminal_inventories))
            client_flows = dict(zip(part.clients, alloc.flows))
        else:
            fees = {}
            broker_value = 0.0
            objective_value = 0.0
            terminal = {}
            client_flows = {}

        return ValuationReport(
            theta=theta, broker_value=broker_value, objective_value=objective_value,
            reservations=reservations, independent_values=dict(core.independent_values),
            expected_fees=fees, client_terminal_inventories=terminal,
            client_flows=client_flows, u_star=core.u_star,
            equilibrium=core.equilibrium, mats=core.mats, part=part,
            margin=core.margin, assumption_holds=core.assumption_holds,
            market=self.market, agents=self.agents, grid=self.grid)


def reservation_values(session: ProblemSession, portfolio) -> dict[int, float]:
    """Module-level alias of ProblemSession.reservations."""
    return session.reservations(portfolio)


def broker_value(session: ProblemSession, portfolio) -> ValuationReport:
    """Module-level alias of ProblemSession.report."""
    return session.report(portfolio)
