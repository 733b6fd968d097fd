"""Brokerage contracts, trading equilibria and client-portfolio optimization
in the Almgren-Chriss market model."""

__version__ = "0.1.0"

from .broker import (BrokerObjectiveContext, BrokerSolutionFlow, build_context,
                     check_wellposedness, eval_gradient, eval_objective,
                     eval_objective_backward, solve_optimal_flow)
from .equilibrium import (EquilibriumSolution, ExpTables, InteractionMatrices,
                          YPaths, build_matrices, equilibrium_rates, exp_table,
                          foc_residual, solve_Y, solve_equilibrium)
from .errors import (ConfigError, InvalidProblem, NTooLarge,
                     SolverDidNotConverge, WellPosednessViolated)
from .model import (AgentParams, FlowPath, MarketParams, Partition, Portfolio,
                    TimeGrid, ValidationReport, integrate, partition,
                    validate_problem)
from .montecarlo import (PathRealization, SimConfig, SimulationSummary,
                         brownian_increments, deviation_test, simulate)
from .search import (PercentileEntry, SearchResult, exhaustive_search,
                     percentile_portfolios, percentile_theta)
from .valuation import (ClientAllocation, CoreSolution, PriceComponents,
                        ProblemSession, ValuationReport, broker_value,
                        build_price_components, client_allocation,
                        expected_client_pnl, expected_fee,
                        independent_agent_value, reservation_values)

__all__ = [name for name in dir() if not name.startswith("_")]
