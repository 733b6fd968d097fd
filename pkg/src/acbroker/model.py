"""Problem data, portfolio encoding, time grid and quadrature primitives.

Conventions used throughout the package:

* Trading rates (order flows) are piecewise constant on the cells of a
  uniform grid; ``values[k]`` is the rate on ``[t_k, t_{k+1})``.
* Inventories are continuous piecewise-linear and sampled at grid nodes.
* All containers are frozen; nothing mutates after construction, so every
  object can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidProblem


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MarketParams:
    """Market-wide data: price drift/volatility, horizon, broker impacts."""

    mu: float
    sigma: float
    horizon: float
    kappa0: float   # broker temporary impact, > 0
    lambda0: float  # broker permanent impact, >= 0


@dataclass(frozen=True)
class AgentParams:
    """Per-agent temporary impact, permanent impact and initial inventory."""

    kappa: float
    lam: float
    x0: float = 0.0


@dataclass(frozen=True)
class Portfolio:
    """Binary client selection: theta[i] == 1 means agent i trades via the broker."""

    theta: tuple[int, ...]

    def __init__(self, theta: Sequence[int]):
        t = tuple(int(v) for v in theta)
        if any(v not in (0, 1) for v in t):
            raise InvalidProblem(f"portfolio entries must be 0 or 1, got {t}")
        object.__setattr__(self, "theta", t)

    def __len__(self) -> int:
        return len(self.theta)

    def flip(self, i: int) -> "Portfolio":
        """Copy with agent i forced independent (entry set to 0)."""
        t = list(self.theta)
        t[i] = 0
        return Portfolio(t)

    @property
    def n_clients(self) -> int:
        return sum(self.theta)


@dataclass(frozen=True)
class Partition:
    """Index sets of a portfolio, in original agent labels.

    Independent agents are relabeled internally to occupy positions
    0..m-1 in the order of ``independents``; the index tuples double as the
    permutation record mapping internal positions back to original labels.
    """

    clients: tuple[int, ...]
    independents: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.independents)


def partition(portfolio: Portfolio) -> Partition:
    """Split agents into clients and independents, keeping original labels."""
    clients = tuple(i for i, v in enumerate(portfolio.theta) if v == 1)
    independents = tuple(i for i, v in enumerate(portfolio.theta) if v == 0)
    return Partition(clients=clients, independents=independents)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with n_steps cells."""

    n_steps: int
    horizon: float
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    midpoints: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidProblem(f"n_steps must be positive, got {self.n_steps}")
        if not self.horizon > 0:
            raise InvalidProblem(f"horizon must be positive, got {self.horizon}")
        nodes = np.linspace(0.0, self.horizon, self.n_steps + 1)
        object.__setattr__(self, "nodes", _readonly(nodes))
        object.__setattr__(self, "midpoints", _readonly((nodes[:-1] + nodes[1:]) / 2.0))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def __eq__(self, other):
        return (
            isinstance(other, TimeGrid)
            and self.n_steps == other.n_steps
            and self.horizon == other.horizon
        )

    def __hash__(self):
        return hash((self.n_steps, self.horizon))


@dataclass(frozen=True)
class FlowPath:
    """Piecewise-constant trading rate on a TimeGrid; values[k] acts on cell k."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = _readonly(self.values)
        if v.shape != (self.grid.n_steps,):
            raise InvalidProblem(
                f"flow needs {self.grid.n_steps} cell values, got shape {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def zero(cls, grid: TimeGrid) -> "FlowPath":
        return cls(grid, np.zeros(grid.n_steps))

    @classmethod
    def constant(cls, grid: TimeGrid, level: float) -> "FlowPath":
        return cls(grid, np.full(grid.n_steps, float(level)))

    def inventory(self, x0: float = 0.0) -> np.ndarray:
        """Node-sampled inventory x0 + integral of the rate (length n_steps + 1)."""
        out = np.empty(self.grid.n_steps + 1)
        out[0] = x0
        np.cumsum(self.values * self.grid.dt, out=out[1:])
        out[1:] += x0
        return out

    def total(self) -> float:
        """Integral of the rate over the whole horizon."""
        return float(np.sum(self.values) * self.grid.dt)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]


def validate_problem(market: MarketParams, agents: Sequence[AgentParams]) -> ValidationReport:
    """Check every positivity invariant of the problem data; never raises."""
    bad: list[str] = []
    if not market.horizon > 0:
        bad.append("horizon must be positive")
    if not market.kappa0 > 0:
        bad.append("kappa0 must be positive")
    if market.sigma < 0:
        bad.append("sigma must be nonnegative")
    if market.lambda0 < 0:
        bad.append("lambda0 must be nonnegative")
    for i, a in enumerate(agents):
        if not a.kappa > 0:
            bad.append(f"agent {i}: kappa must be positive")
        if not a.lam > 0:
            bad.append(f"agent {i}: lambda must be positive")
    return ValidationReport(ok=not bad, violations=tuple(bad))


def integrate(grid: TimeGrid, values: np.ndarray) -> float:
    """Integrate over [0, horizon].

    Accepts either node samples (length n_steps + 1, composite trapezoid,
    exact for piecewise-linear integrands) or cell values (length n_steps,
    exact for piecewise-constant integrands).
    """
    v = np.asarray(values, dtype=float)
    n = grid.n_steps
    if v.shape == (n + 1,):
        return float(np.trapezoid(v, dx=grid.dt))
    if v.shape == (n,):
        return float(np.sum(v) * grid.dt)
    raise ValueError(
        f"expected {n} cell values or {n + 1} node values, got shape {v.shape}"
    )
