"""Broker objective, exact gradient and optimal order flow.

The reduced objective J(u) of the broker is linear-quadratic in the cell
values of the piecewise-constant flow u.  Two algebraically identical
representations are implemented:

* the forward form, built from the convolution states
  C_t = mu e^{At} int_t^T e^{-As} 1 ds,  D_t = int_0^t u_s e^{-As} b ds,
  E_T = int_0^T X0_t gamma_tilde^T e^{At} dt,
  which never solves the adjoint system and is the solver's objective;
* a backward form that runs through the adjoint paths Y and serves as an
  independent cross-check.

All time integrals sample the exponential states at cell midpoints and use
exact cell integrals of e^{-As}, so the discrete objective is an O(dt^2)
approximation of the continuum one and *exactly* quadratic in u.  The
gradient below is the exact derivative of that discrete quadratic; central
finite differences of eval_objective reproduce it to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .equilibrium import ExpTables, InteractionMatrices, exp_table, solve_Y
from .errors import InvalidProblem, SolverDidNotConverge, WellPosednessViolated
from .model import AgentParams, FlowPath, MarketParams, TimeGrid, _readonly

DENSE_LIMIT = 512  # above this many cells the stationarity solve switches to CG


class WellPosedness(NamedTuple):
    holds: bool
    margin: float


def check_wellposedness(mats: InteractionMatrices, market: MarketParams,
                        grid: TimeGrid | None = None) -> WellPosedness:
    """Margin of the strict-concavity condition

        2 ||gamma_tilde|| ||b|| e^{||A||_2 T} T^2 + lambda0 T / 2 < kappa0.

    The 2-norm of A is computed exactly (largest singular value); the
    Frobenius norm is only an upper bound for it and is asserted as such.
    """
    T = market.horizon
    if mats.m == 0:
        lhs = market.lambda0 * T / 2.0
    else:
        norm2 = float(np.linalg.norm(mats.A, 2))
        frob = float(np.linalg.norm(mats.A, "fro"))
        assert norm2 <= frob + 1e-12 * max(1.0, frob)
        lhs = (2.0 * np.linalg.norm(mats.gamma_tilde) * np.linalg.norm(mats.b)
               * np.exp(norm2 * T) * T ** 2 + market.lambda0 * T / 2.0)
    margin = market.kappa0 - lhs
    return WellPosedness(holds=margin > 0.0, margin=float(margin))


@dataclass(frozen=True)
class BrokerObjectiveContext:
    """Everything u-independent in the broker objective for one portfolio.

    alpha is the quadratic coefficient on X0_T and beta the linear one; the
    precomputed arrays sample the exponential states at cell midpoints:
    c_mid[k] = C(tau_k), gt_mid[k] = gamma_tilde^T e^{A tau_k},
    w[k] = int_{cell k} e^{-As} b ds, w_half[k] the same over the first half
    cell, gamma_phi_half = gamma_tilde^T Phi(dt/2) b and r_gamma[k] the exact
    discrete path gamma_tilde^T r(tau_k) of dr = (-Ar + b) dt, r(0) = 0.
    """

    mats: InteractionMatrices
    grid: TimeGrid
    tables: ExpTables
    mu: float
    kappa0: float
    lambda0: float
    x0_total: float
    inv_lambda_sum: float
    reservation_sum: float
    alpha: float
    beta: float
    c_mid: np.ndarray        # (n, m)
    gt_mid: np.ndarray       # (n, m)
    w: np.ndarray            # (n, m)
    w_half: np.ndarray       # (n, m)
    gamma_phi_half: float
    r_gamma: np.ndarray      # (n,)

    @property
    def m(self) -> int:
        return self.mats.m


def build_context(mats: InteractionMatrices, grid: TimeGrid, market: MarketParams,
                  clients: Sequence[AgentParams], reservation_sum: float = 0.0,
                  tables: ExpTables | None = None) -> BrokerObjectiveContext:
    if not clients:
        raise InvalidProblem("broker objective needs a non-empty client set")
    if tables is None:
        tables = exp_table(mats.A, grid)
    m = mats.m
    mp1 = m + 1
    x0_total = float(sum(a.x0 for a in clients))
    inv_lambda_sum = float(sum(1.0 / a.lam for a in clients))
    alpha = (market.lambda0 / mp1 - 2.0 * mats.gamma * market.kappa0 / mp1 ** 2
             - 1.0 / inv_lambda_sum)
    beta = market.lambda0 - mats.gamma * market.kappa0 / mp1 - 1.0 / inv_lambda_sum

    n = grid.n_steps
    if m == 0:
        c_mid = np.zeros((n, 0))
        gt_mid = np.zeros((n, 0))
        w = np.zeros((n, 0))
        w_half = np.zeros((n, 0))
        gph = 0.0
        r_gamma = np.zeros(n)
    else:
        ones = np.ones(m)
        phi_T = tables.phi_nodes[-1]
        c_mid = market.mu * np.einsum(
            "kij,kj->ki", tables.mid_pos, (phi_T[None, :, :] - tables.phi_mids) @ ones)
        gt_mid = np.einsum("j,kji->ki", mats.gamma_tilde, tables.mid_pos)
        w = np.einsum("kij,j->ki", tables.neg[:-1], tables.phi_cell @ mats.b)
        w_half = np.einsum("kij,j->ki", tables.neg[:-1], tables.phi_half @ mats.b)
        gph = float(mats.gamma_tilde @ tables.phi_half @ mats.b)
        cum_gt = np.zeros((n, m))
        cum_gt[1:] = np.cumsum(gt_mid[:-1], axis=0)
        r_gamma = np.einsum("ki,ki->k", cum_gt, w) + gph

    return BrokerObjectiveContext(
        mats=mats, grid=grid, tables=tables, mu=market.mu, kappa0=market.kappa0,
        lambda0=market.lambda0, x0_total=x0_total, inv_lambda_sum=inv_lambda_sum,
        reservation_sum=float(reservation_sum), alpha=float(alpha), beta=float(beta),
        c_mid=_readonly(c_mid), gt_mid=_readonly(gt_mid), w=_readonly(w),
        w_half=_readonly(w_half), gamma_phi_half=gph, r_gamma=_readonly(r_gamma),
    )


def _flow_values(ctx: BrokerObjectiveContext, u) -> np.ndarray:
    if isinstance(u, FlowPath):
        if u.grid != ctx.grid:
            raise InvalidProblem("flow grid does not match the context grid")
        return u.values
    v = np.asarray(u, dtype=float)
    if v.shape != (ctx.grid.n_steps,):
        raise InvalidProblem(f"expected {ctx.grid.n_steps} cell values, got {v.shape}")
    return v


def _xbar_and_total(ctx, uv):
    dt = ctx.grid.dt
    xn = np.zeros(uv.shape[0] + 1)
    np.cumsum(uv * dt, out=xn[1:])
    return (xn[:-1] + xn[1:]) / 2.0, xn[-1]


def _d_paths(ctx, uv):
    """D at cell midpoints (n, m) and D(T) (m,), exactly for piecewise-constant u."""
    n = ctx.grid.n_steps
    m = ctx.m
    contrib = uv[:, None] * ctx.w
    d_nodes = np.zeros((n, m))
    d_nodes[1:] = np.cumsum(contrib[:-1], axis=0)
    d_total = d_nodes[-1] + contrib[-1] if n else np.zeros(m)
    return d_nodes + uv[:, None] * ctx.w_half, d_total


def eval_objective(ctx: BrokerObjectiveContext, u) -> float:
    """Broker objective J(u) in the forward representation."""
    uv = _flow_values(ctx, u)
    dt = ctx.grid.dt
    mp1 = ctx.m + 1
    xbar, xT = _xbar_and_total(ctx, uv)

    total = (ctx.alpha / 2.0) * xT ** 2 + ctx.x0_total * ctx.beta * xT
    total -= (ctx.kappa0 / mp1) * dt * float(uv @ uv)
    total += dt * (ctx.mu / mp1) * float(np.sum(xbar))
    total += (ctx.mu * ctx.grid.horizon * ctx.x0_total
              - ctx.x0_total ** 2 / (2.0 * ctx.inv_lambda_sum))
    total -= ctx.reservation_sum
    if ctx.m:
        d_mid, d_total = _d_paths(ctx, uv)
        gt_c = ctx.c_mid @ ctx.mats.gamma_tilde          # gamma_tilde^T C(tau_k)
        gt_d = np.einsum("ki,ki->k", ctx.gt_mid, d_mid)  # gamma_tilde^T e^{A tau_k} D(tau_k)
        e_total = dt * (xbar @ ctx.gt_mid)               # row vector E_T
        total += (2.0 / mp1) * dt * float(xbar @ gt_c)
        total += (2.0 / mp1) * dt * float(xbar @ gt_d)
        total -= (2.0 / mp1) * float(e_total @ d_total)
        total += ctx.x0_total * dt * float(np.sum(gt_c))
        total -= ctx.x0_total * float((dt * np.sum(ctx.gt_mid, axis=0)) @ d_total)
        total += ctx.x0_total * dt * float(np.sum(gt_d))
    return float(total)


def eval_objective_backward(ctx: BrokerObjectiveContext, u) -> float:
    """Same objective evaluated through the adjoint paths (cross-check route)."""
    uv = _flow_values(ctx, u)
    dt = ctx.grid.dt
    mp1 = ctx.m + 1
    xbar, xT = _xbar_and_total(ctx, uv)
    flow = u if isinstance(u, FlowPath) else FlowPath(ctx.grid, uv)
    y = solve_Y(ctx.mats, flow, ctx.mu, ctx.grid, ctx.tables)
    gty = y.mids @ ctx.mats.gamma_tilde if ctx.m else np.zeros(ctx.grid.n_steps)

    total = dt * float(xbar @ (ctx.mu / mp1 + (2.0 / mp1) * gty))
    total += ctx.x0_total * dt * float(np.sum(gty))
    total += (ctx.alpha / 2.0) * xT ** 2 + ctx.x0_total * ctx.beta * xT
    total -= (ctx.kappa0 / mp1) * dt * float(uv @ uv)
    total += (ctx.mu * ctx.grid.horizon * ctx.x0_total
              - ctx.x0_total ** 2 / (2.0 * ctx.inv_lambda_sum))
    total -= ctx.reservation_sum
    return float(total)


def _gradient_matrix(ctx: BrokerObjectiveContext, U: np.ndarray) -> np.ndarray:
    """Exact gradient density for a batch of flows; U is (n, B), result (n, B).

    g = mu (T - t)/(m+1) + p - (2/(m+1)) gamma_tilde^T q
        + x0 [lambda0 - gamma kappa0/(m+1) - 1/sum(1/lambda)]
        - x0 gamma_tilde^T r - 2 kappa0 u / (m+1),

    where p, q, r are the exact discrete counterparts of
    dp = -(2/(m+1)) gamma_tilde^T Y dt with p_T = alpha X0_T,
    dq = (-A q + X0 b) dt, q_0 = 0, and dr = (-A r + b) dt, r_0 = 0,
    all sampled at cell midpoints.
    """
    n = ctx.grid.n_steps
    dt = ctx.grid.dt
    mp1 = ctx.m + 1
    dtcum = dt * np.cumsum(U, axis=0)
    xnodes = np.vstack([np.zeros((1, U.shape[1])), dtcum])
    xbar = (xnodes[:-1] + xnodes[1:]) / 2.0
    xT = xnodes[-1]

    tail_t = ctx.grid.horizon - ctx.grid.midpoints
    g = (ctx.mu / mp1) * tail_t[:, None] + ctx.alpha * xT[None, :]
    g += ctx.x0_total * ctx.beta
    g -= (2.0 * ctx.kappa0 / mp1) * U
    if ctx.m:
        m = ctx.m
        contrib = U[:, :, None] * ctx.w[:, None, :]          # (n, B, m)
        d_nodes = np.zeros((n, U.shape[1], m))
        d_nodes[1:] = np.cumsum(contrib[:-1], axis=0)
        d_total = d_nodes[-1] + contrib[-1]
        d_mid = d_nodes + U[:, :, None] * ctx.w_half[:, None, :]
        gty = ((ctx.c_mid @ ctx.mats.gamma_tilde)[:, None]
               - np.einsum("ki,bi->kb", ctx.gt_mid, d_total)
               + np.einsum("ki,kbi->kb", ctx.gt_mid, d_mid))
        # p at midpoints: backward half-open tail sum of gamma_tilde^T Y
        tail = np.cumsum(gty[::-1], axis=0)[::-1] - gty / 2.0
        g += (2.0 / mp1) * dt * tail
        # gamma_tilde^T q at midpoints
        cum_xg = np.zeros((n, U.shape[1], m))
        cum_xg[1:] = np.cumsum(xbar[:-1, :, None] * ctx.gt_mid[:-1, None, :], axis=0)
        qg = np.einsum("kbi,ki->kb", cum_xg, ctx.w) + xbar * ctx.gamma_phi_half
        g -= (2.0 / mp1) * qg
        g -= ctx.x0_total * ctx.r_gamma[:, None]
    return g


def eval_gradient(ctx: BrokerObjectiveContext, u) -> FlowPath:
    """Gradient density g of the objective; int v g dt is the derivative at u
    in direction v for any cellwise v."""
    uv = _flow_values(ctx, u)
    g = _gradient_matrix(ctx, uv[:, None])[:, 0]
    return FlowPath(ctx.grid, g)


@dataclass(frozen=True)
class BrokerSolutionFlow:
    """Optimal deterministic order flow and diagnostics."""

    u_star: FlowPath
    X0: np.ndarray             # node-sampled running integral of u_star
    gradient_residual: float
    objective_value: float
    margin: float              # well-posedness margin (may be <= 0 with concavity verified)
    assumption_holds: bool


def _stationarity_system(ctx):
    """Dense H (n, n) and a (n,) with grad J(u) = a - H u (gradient scaled by dt).

    H is assembled in closed form from the cross-response matrix
    G[k, l] = gamma_tilde^T e^{A tau_k} int_{cell l} e^{-As} b ds; the
    off-diagonal blocks are cumulative column sums of G, mirrored by the
    symmetry of the quadratic form.
    """
    n = ctx.grid.n_steps
    dt = ctx.grid.dt
    mp1 = ctx.m + 1
    H = np.full((n, n), -ctx.alpha * dt * dt)
    H[np.diag_indices(n)] += 2.0 * ctx.kappa0 * dt / mp1
    if ctx.m:
        G = ctx.gt_mid @ ctx.w.T
        col_cum = np.cumsum(G, axis=0)
        inner = np.zeros((n, n))
        upper = np.triu_indices(n, k=1)
        # sum_{j < k < l} G[k, l] = col_cum[l-1, l] - col_cum[j, l]
        inner[upper] = (G[upper] / 2.0
                        + col_cum[upper[1] - 1, upper[1]] - col_cum[upper]
                        + ctx.gamma_phi_half)
        inner += inner.T
        inner[np.diag_indices(n)] = ctx.gamma_phi_half
        H += (2.0 * dt * dt / mp1) * inner
    a = _gradient_matrix(ctx, np.zeros((n, 1)))[:, 0] * dt
    return H, a


def solve_optimal_flow(ctx: BrokerObjectiveContext, tol: float = 1e-8,
                       strict: bool = False) -> BrokerSolutionFlow:
    """Unique maximizer of the broker objective via its affine stationarity system.

    The explicit well-posedness bound is sufficient but not necessary for
    strict concavity; when it fails and strict=False, concavity is verified
    directly on the assembled quadratic form (Cholesky) before solving, and
    the negative margin is reported for auditing.
    """
    market_like = _MarketView(ctx)
    wp = check_wellposedness(ctx.mats, market_like)
    n = ctx.grid.n_steps
    if not wp.holds and (strict or n > DENSE_LIMIT):
        raise WellPosednessViolated(
            f"well-posedness margin {wp.margin:.3e} <= 0", margin=wp.margin)

    if n <= DENSE_LIMIT:
        H, a = _stationarity_system(ctx)
        try:
            chol = np.linalg.cholesky(H)
            ustar = np.linalg.solve(chol.T, np.linalg.solve(chol, a))
        except np.linalg.LinAlgError:
            if not wp.holds:
                raise WellPosednessViolated(
                    f"objective not strictly concave (margin {wp.margin:.3e})",
                    margin=wp.margin) from None
            ustar = np.linalg.solve(H, a)
    else:
        ustar = _conjugate_gradient(ctx, tol)

    flow = FlowPath(ctx.grid, ustar)
    g = eval_gradient(ctx, flow).values
    objective = eval_objective(ctx, flow)
    residual = float(np.max(np.abs(g))) if n else 0.0
    if residual > tol * max(1.0, abs(objective)):
        raise SolverDidNotConverge(
            f"gradient residual {residual:.3e} above tolerance")
    return BrokerSolutionFlow(
        u_star=flow, X0=_readonly(flow.inventory(0.0)), gradient_residual=residual,
        objective_value=objective, margin=wp.margin, assumption_holds=wp.holds)


def _conjugate_gradient(ctx, tol, max_iter=None):
    """Matrix-free CG on the stationarity system for large grids."""
    n = ctx.grid.n_steps
    dt = ctx.grid.dt
    a = _gradient_matrix(ctx, np.zeros((n, 1)))[:, 0] * dt

    def hmul(v):
        return a - _gradient_matrix(ctx, v[:, None])[:, 0] * dt

    x = np.zeros(n)
    r = a.copy()
    p = r.copy()
    rs = float(r @ r)
    limit = max_iter or 10 * n
    for _ in range(limit):
        hp = hmul(p)
        denom = float(p @ hp)
        if denom <= 0:
            raise WellPosednessViolated("objective not strictly concave along CG direction")
        step = rs / denom
        x += step * p
        r -= step * hp
        rs_new = float(r @ r)
        if np.sqrt(rs_new) < tol * dt:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverDidNotConverge("conjugate gradient hit the iteration cap")


class _MarketView:
    """Adapter exposing the context's market fields to check_wellposedness."""

    def __init__(self, ctx):
        self.horizon = ctx.grid.horizon
        self.kappa0 = ctx.kappa0
        self.lambda0 = ctx.lambda0
