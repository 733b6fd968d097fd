"""Shared fixtures and process-level tuning for the test run."""

import numpy as np
import pytest
import threadpoolctl

from acbroker import AgentParams, MarketParams, ProblemSession, TimeGrid

# The solver works on many small matrices; BLAS threading only adds
# synchronization overhead, so pin it for the whole session.
_LIMITER = threadpoolctl.threadpool_limits(limits=1)


@pytest.fixture(scope="session")
def desk_market():
    """Two-agent desk setup: kappa0 = kappa_i = 0.1, lambda0 = 1e-3."""
    return MarketParams(mu=1.0, sigma=1.0, horizon=1.0, kappa0=0.1, lambda0=1e-3)


@pytest.fixture(scope="session")
def desk_agents():
    return [AgentParams(kappa=0.1, lam=2.55e-2, x0=0.0),
            AgentParams(kappa=0.1, lam=2.55e-2, x0=0.0)]


@pytest.fixture(scope="session")
def desk_session(desk_market, desk_agents):
    return ProblemSession(desk_market, desk_agents, TimeGrid(200, 1.0))


def random_problem(rng, n_agents=None, x0_scale=0.0, require_wellposed=True):
    """Random problem data in the desk parameter regime.

    Returns (market, agents, theta) with at least one client; resamples until
    the explicit well-posedness bound holds when requested.
    """
    from acbroker import Portfolio, build_matrices, check_wellposedness, partition

    for _ in range(200):
        n = n_agents if n_agents is not None else int(rng.integers(2, 5))
        market = MarketParams(
            mu=float(rng.uniform(0.5, 2.0)), sigma=float(rng.uniform(0.0, 2.0)),
            horizon=1.0, kappa0=float(rng.uniform(0.05, 0.15)),
            lambda0=float(rng.uniform(1e-4, 2e-3)))
        agents = [AgentParams(kappa=float(rng.uniform(0.05, 0.15)),
                              lam=float(rng.uniform(5e-3, 3e-2)),
                              x0=float(rng.uniform(-1, 1)) * x0_scale)
                  for _ in range(n)]
        theta = tuple(int(v) for v in rng.integers(0, 2, n))
        if sum(theta) == 0:
            theta = tuple(1 if i == 0 else t for i, t in enumerate(theta))
        if not require_wellposed:
            return market, agents, theta
        part = partition(Portfolio(theta))
        mats = build_matrices([agents[i] for i in part.independents], market)
        ok = True
        if not check_wellposedness(mats, market).holds:
            ok = False
        for i in part.clients:
            flipped = Portfolio(theta).flip(i)
            fpart = partition(flipped)
            fmats = build_matrices([agents[j] for j in fpart.independents], market)
            if not check_wellposedness(fmats, market).holds:
                ok = False
        if ok:
            return market, agents, theta
    raise RuntimeError("could not sample a well-posed random problem")
