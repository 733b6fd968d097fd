import numpy as np
import pytest

from acbroker import (AgentParams, FlowPath, InvalidProblem, MarketParams,
                      Portfolio, TimeGrid, integrate, partition,
                      validate_problem)


def test_validate_passes_on_sane_data():
    market = MarketParams(mu=1.0, sigma=1.0, horizon=1.0, kappa0=0.1, lambda0=1e-3)
    agents = [AgentParams(0.1, 0.01), AgentParams(0.1, 0.01)]
    report = validate_problem(market, agents)
    assert report.ok and report.violations == ()


def test_validate_flags_zero_kappa():
    market = MarketParams(mu=1.0, sigma=1.0, horizon=1.0, kappa0=0.1, lambda0=1e-3)
    report = validate_problem(market, [AgentParams(0.0, 0.01)])
    assert not report.ok
    assert any("kappa must be positive" in v for v in report.violations)


def test_validate_flags_negative_horizon():
    market = MarketParams(mu=1.0, sigma=1.0, horizon=-1.0, kappa0=0.1, lambda0=1e-3)
    report = validate_problem(market, [AgentParams(0.1, 0.01)])
    assert not report.ok
    assert any("horizon must be positive" in v for v in report.violations)


@pytest.mark.parametrize("theta,clients,independents", [
    ((1, 1), (0, 1), ()),
    ((0, 0), (), (0, 1)),
    ((1, 0, 1), (0, 2), (1,)),
])
def test_partition_examples(theta, clients, independents):
    part = partition(Portfolio(theta))
    assert part.clients == clients
    assert part.independents == independents
    assert part.m == len(independents)


def test_partition_roundtrip_preserves_labels():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        theta = tuple(int(v) for v in rng.integers(0, 2, n))
        part = partition(Portfolio(theta))
        assert sorted(part.clients + part.independents) == list(range(n))
        for i in part.clients:
            assert theta[i] == 1
        for i in part.independents:
            assert theta[i] == 0


def test_portfolio_rejects_non_binary():
    with pytest.raises(InvalidProblem):
        Portfolio((0, 2))


def test_grid_nodes_uniform():
    grid = TimeGrid(4, 2.0)
    assert np.allclose(grid.nodes, [0, 0.5, 1.0, 1.5, 2.0])
    assert np.allclose(grid.midpoints, [0.25, 0.75, 1.25, 1.75])
    assert grid.dt == 0.5


def test_integrate_constant_exact():
    grid = TimeGrid(10, 1.0)
    assert integrate(grid, np.ones(11)) == pytest.approx(1.0, abs=1e-15)
    assert integrate(grid, np.ones(10)) == pytest.approx(1.0, abs=1e-15)


def test_integrate_linear_exact():
    grid = TimeGrid(10, 1.0)
    assert integrate(grid, grid.nodes) == pytest.approx(0.5, abs=1e-15)


def test_integrate_quadratic_trapezoid_error():
    grid = TimeGrid(100, 1.0)
    assert integrate(grid, grid.nodes ** 2) == pytest.approx(1.0 / 3.0, abs=1e-4)


def test_integrate_linearity_and_additivity():
    rng = np.random.default_rng(1)
    grid = TimeGrid(40, 1.5)
    f = rng.standard_normal(41)
    g = rng.standard_normal(41)
    a, b = 1.7, -0.4
    assert integrate(grid, a * f + b * g) == pytest.approx(
        a * integrate(grid, f) + b * integrate(grid, g), rel=1e-12)
    # additivity over subintervals: split the node samples at an interior node
    half1 = TimeGrid(20, 0.75)
    assert integrate(grid, f) == pytest.approx(
        integrate(half1, f[:21]) + integrate(half1, f[20:]), rel=1e-12)


def test_integrate_refinement_order():
    # trapezoid error falls by ~4x when the grid doubles
    f = lambda t: np.sin(3.0 * t)
    exact = (1.0 - np.cos(3.0)) / 3.0
    errs = []
    for n in (50, 100, 200):
        grid = TimeGrid(n, 1.0)
        errs.append(abs(integrate(grid, f(grid.nodes)) - exact))
    assert 3.5 < errs[0] / errs[1] < 4.5
    assert 3.5 < errs[1] / errs[2] < 4.5


def test_integrate_rejects_mismatched_lengths():
    grid = TimeGrid(10, 1.0)
    with pytest.raises(ValueError):
        integrate(grid, np.ones(7))


def test_flow_inventory_and_total():
    grid = TimeGrid(4, 1.0)
    flow = FlowPath(grid, np.array([1.0, -1.0, 2.0, 0.0]))
    assert np.allclose(flow.inventory(0.5), [0.5, 0.75, 0.5, 1.0, 1.0])
    assert flow.total() == pytest.approx(0.5)


def test_flow_rejects_wrong_length():
    with pytest.raises(InvalidProblem):
        FlowPath(TimeGrid(4, 1.0), np.zeros(5))
