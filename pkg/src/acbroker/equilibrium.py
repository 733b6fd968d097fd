"""Nash equilibrium of the independent agents for a given broker order flow.

For a deterministic piecewise-constant broker flow u the equilibrium is
semi-explicit: a linear terminal-value ODE system for the adjoint paths Y,

    dY/dt = A Y + b u - mu 1,   Y(T) = 0,

followed by a pointwise algebraic map from Y to the equilibrium rates.  The
ODE is solved exactly (matrix exponentials and exact cell integrals), so all
algebraic identities between Y, the rates and the broker objective hold to
rounding on the grid.

Sampling convention: Y is reported at grid nodes (for inspection and ODE
residual checks) and at cell midpoints (used to assign the piecewise-constant
rate of each cell, which keeps cell values O(dt^2)-accurate cell averages).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .model import AgentParams, FlowPath, MarketParams, TimeGrid, _readonly


@dataclass(frozen=True)
class InteractionMatrices:
    """Coupling data of the m independent agents.

    gamma = sum_i lambda_i / kappa_i; gamma_tilde_i = lambda_i/kappa_i - gamma/(m+1);
    A and b drive the adjoint ODE.  kappas/lambdas are kept for the rate map.
    """

    A: np.ndarray            # (m, m)
    b: np.ndarray            # (m,)
    gamma_tilde: np.ndarray  # (m,)
    gamma: float
    kappas: np.ndarray       # (m,)
    lambdas: np.ndarray      # (m,)

    @property
    def m(self) -> int:
        return self.b.shape[0]


def build_matrices(independents: Sequence[AgentParams], market: MarketParams) -> InteractionMatrices:
    """Assemble A, b and gamma_tilde for the given independent agents."""
    kappas = np.array([a.kappa for a in independents], dtype=float)
    lambdas = np.array([a.lam for a in independents], dtype=float)
    m = len(kappas)
    c = lambdas / kappas if m else np.zeros(0)
    gamma = float(np.sum(c))
    d = (gamma - c) / (m + 1)
    # A[i, i] = d[i];  A[i, j] = d[i] - c[j] for j != i
    A = d[:, None] - c[None, :] + np.diag(c) if m else np.zeros((0, 0))
    b = d * market.kappa0 - market.lambda0 if m else np.zeros(0)
    gamma_tilde = c - gamma / (m + 1) if m else np.zeros(0)
    return InteractionMatrices(
        A=_readonly(A), b=_readonly(b), gamma_tilde=_readonly(gamma_tilde),
        gamma=gamma, kappas=_readonly(kappas), lambdas=_readonly(lambdas),
    )


def _step_and_phi(A: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact (e^{-As}, Phi(s) = integral_0^s e^{-Ar} dr) from one block expm.

    expm([[ -A, I ], [ 0, 0 ]] * s) carries e^{-As} in its upper-left and
    Phi(s) in its upper-right block; this stays valid when A is singular
    (Phi reduces to s*I at A = 0).
    """
    m = A.shape[0]
    if m == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    blk = np.zeros((2 * m, 2 * m))
    blk[:m, :m] = -A
    blk[:m, m:] = np.eye(m)
    full = expm(blk * s)
    return full[:m, :m], full[:m, m:]


@dataclass(frozen=True)
class ExpTables:
    """Matrix exponentials of A on the grid, plus exact cell integrals of e^{-As}.

    pos[j] = e^{A t_j} and neg[j] = e^{-A t_j} at the n+1 nodes;
    mid_pos/mid_neg are the same at the n cell midpoints.
    phi_nodes[j] = integral_0^{t_j} e^{-As} ds, phi_mids likewise;
    phi_cell = Phi(dt), phi_half = Phi(dt/2).
    """

    grid: TimeGrid
    pos: np.ndarray       # (n+1, m, m)
    neg: np.ndarray       # (n+1, m, m)
    mid_pos: np.ndarray   # (n, m, m)
    mid_neg: np.ndarray   # (n, m, m)
    phi_nodes: np.ndarray  # (n+1, m, m)
    phi_mids: np.ndarray   # (n, m, m)
    phi_cell: np.ndarray   # (m, m)
    phi_half: np.ndarray   # (m, m)


def exp_table(A: np.ndarray, grid: TimeGrid) -> ExpTables:
    """Tabulate e^{A t} / e^{-A t} at all nodes and midpoints of the grid."""
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    n = grid.n_steps
    dt = grid.dt
    if m == 0:
        z3 = np.zeros((0, 0))
        return ExpTables(
            grid=grid,
            pos=np.zeros((n + 1, 0, 0)), neg=np.zeros((n + 1, 0, 0)),
            mid_pos=np.zeros((n, 0, 0)), mid_neg=np.zeros((n, 0, 0)),
            phi_nodes=np.zeros((n + 1, 0, 0)), phi_mids=np.zeros((n, 0, 0)),
            phi_cell=z3, phi_half=z3,
        )
    step_neg, phi_cell = _step_and_phi(A, dt)
    half_neg, phi_half = _step_and_phi(A, dt / 2)
    eye = np.eye(m)
    step_pos = np.linalg.solve(step_neg, eye)
    half_pos = np.linalg.solve(half_neg, eye)
    pos = np.empty((n + 1, m, m))
    neg = np.empty((n + 1, m, m))
    pos[0] = eye
    neg[0] = eye
    for j in range(n):
        pos[j + 1] = pos[j] @ step_pos
        neg[j + 1] = neg[j] @ step_neg
    mid_pos = pos[:-1] @ half_pos
    mid_neg = neg[:-1] @ half_neg

    phi_nodes = np.empty((n + 1, m, m))
    phi_nodes[0] = 0.0
    for j in range(n):
        phi_nodes[j + 1] = phi_nodes[j] + neg[j] @ phi_cell
    phi_mids = phi_nodes[:-1] + neg[:-1] @ phi_half

    ro = _readonly
    return ExpTables(grid=grid, pos=ro(pos), neg=ro(neg), mid_pos=ro(mid_pos),
                     mid_neg=ro(mid_neg), phi_nodes=ro(phi_nodes),
                     phi_mids=ro(phi_mids), phi_cell=ro(phi_cell), phi_half=ro(phi_half))


@dataclass(frozen=True)
class YPaths:
    """Adjoint paths at grid nodes (n+1, m) and at cell midpoints (n, m)."""

    nodes: np.ndarray
    mids: np.ndarray


def solve_Y(mats: InteractionMatrices, u: FlowPath, mu: float,
            grid: TimeGrid, tables: ExpTables | None = None) -> YPaths:
    """Solve dY = (A Y + b u - mu 1) dt, Y(T) = 0 for piecewise-constant u.

    Uses the closed form Y_t = e^{At} [ mu * int_t^T e^{-As} 1 ds
    - int_t^T u_s e^{-As} b ds ]; both integrals are evaluated exactly per
    cell, so node and midpoint values carry no time-stepping error.
    """
    m = mats.m
    n = grid.n_steps
    if m == 0:
        return YPaths(nodes=np.zeros((n + 1, 0)), mids=np.zeros((n, 0)))
    if tables is None:
        tables = exp_table(mats.A, grid)
    uv = u.values
    w = np.einsum("kij,j->ki", tables.neg[:-1], tables.phi_cell @ mats.b)   # cell integrals of e^{-As} b
    wh = np.einsum("kij,j->ki", tables.neg[:-1], tables.phi_half @ mats.b)  # first half of each cell
    d_nodes = np.zeros((n + 1, m))
    np.cumsum(uv[:, None] * w, axis=0, out=d_nodes[1:])
    d_total = d_nodes[-1]
    d_mids = d_nodes[:-1] + uv[:, None] * wh

    ones = np.ones(m)
    phi_T = tables.phi_nodes[-1]
    drift_nodes = np.einsum("kij,kj->ki", tables.pos, (phi_T[None, :, :] - tables.phi_nodes) @ ones)
    drift_mids = np.einsum("kij,kj->ki", tables.mid_pos, (phi_T[None, :, :] - tables.phi_mids) @ ones)
    y_nodes = mu * drift_nodes - np.einsum("kij,kj->ki", tables.pos, d_total[None, :] - d_nodes)
    y_mids = mu * drift_mids - np.einsum("kij,kj->ki", tables.mid_pos, d_total[None, :] - d_mids)
    return YPaths(nodes=_readonly(y_nodes), mids=_readonly(y_mids))


def equilibrium_rates(mats: InteractionMatrices, y: YPaths, u: FlowPath,
                      kappa0: float) -> tuple[FlowPath, ...]:
    """Map adjoint paths to the unique equilibrium rates.

    nu_i = (m Y_i - sum_{j != i} Y_j - kappa0 u) / (kappa_i (m+1)), assigned
    cellwise from the midpoint samples of Y.
    """
    m = mats.m
    if m == 0:
        return ()
    s = np.sum(y.mids, axis=1)
    rates = (y.mids - ((s + kappa0 * u.values)[:, None] / (m + 1))) / mats.kappas[None, :]
    return tuple(FlowPath(u.grid, rates[:, i]) for i in range(m))


def foc_residual(mats: InteractionMatrices, y: YPaths, nu_star: Sequence[FlowPath],
                 u: FlowPath, kappa0: float) -> float:
    """Max first-order-condition violation over agents and cells.

    residual_i = | nu_i - (Y_i - sum_{j != i} kappa_j nu_j - kappa0 u) / (2 kappa_i) |,
    evaluated with the midpoint Y samples that define the rates.
    """
    m = mats.m
    if m == 0:
        return 0.0
    rates = np.stack([p.values for p in nu_star], axis=1)  # (n, m)
    total_kappa = rates @ mats.kappas                      # sum_j kappa_j nu_j
    others = total_kappa[:, None] - rates * mats.kappas[None, :]
    best = (y.mids - others - kappa0 * u.values[:, None]) / (2.0 * mats.kappas[None, :])
    return float(np.max(np.abs(rates - best)))


@dataclass(frozen=True)
class EquilibriumSolution:
    """Equilibrium of the independents for a fixed broker flow u."""

    y: YPaths
    nu_star: tuple[FlowPath, ...]
    u: FlowPath


def solve_equilibrium(mats: InteractionMatrices, u: FlowPath, market: MarketParams,
                      grid: TimeGrid, tables: ExpTables | None = None) -> EquilibriumSolution:
    """Solve the adjoint system and return the equilibrium rates for u."""
    y = solve_Y(mats, u, market.mu, grid, tables)
    nu = equilibrium_rates(mats, y, u, market.kappa0)
    return EquilibriumSolution(y=y, nu_star=nu, u=u)
