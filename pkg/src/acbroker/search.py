"""Discrete optimization over client portfolios.

Exhaustive enumeration for small N (each portfolio's reservation sub-solves
are flipped portfolios, so the session memo makes the 2^N sweep share work),
plus percentile families for populations too large to enumerate.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import ceil

from .errors import NTooLarge, WellPosednessViolated
from .model import Portfolio
from .valuation import ProblemSession, ValuationReport

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SearchResult:
    best_theta: Portfolio
    best_value: float
    evaluated: tuple[tuple[tuple[int, ...], float], ...]
    failures: tuple[tuple[tuple[int, ...], str], ...]
    reports: dict[tuple[int, ...], ValuationReport]


def _pick_best(evaluated):
    best_value = max(v for _, v in evaluated)
    ties = [t for t, v in evaluated if v >= best_value - TIE_TOLERANCE]
    ties.sort(key=lambda t: (sum(t), t))
    return ties[0], best_value


def exhaustive_search(session: ProblemSession, n_max: int = 16) -> SearchResult:
    """Evaluate every theta in {0,1}^N and return the argmax.

    Ties within 1e-12 go to fewer clients, then to the lexicographically
    smallest theta.  Portfolios whose broker problem is not strictly concave
    are recorded in ``failures`` and excluded from the argmax.
    """
    n = session.n_agents
    if n > n_max:
        raise NTooLarge(f"{n} agents would need 2^{n} evaluations (cap {n_max})")
    evaluated = []
    failures = []
    reports = {}
    for theta in product((0, 1), repeat=n):
        try:
            rep = session.report(theta)
        except WellPosednessViolated as exc:
            failures.append((theta, str(exc)))
            continue
        evaluated.append((theta, rep.broker_value))
        reports[theta] = rep
    # the all-independent portfolio never fails, so evaluated is non-empty
    best_theta, best_value = _pick_best(evaluated)
    return SearchResult(best_theta=Portfolio(best_theta), best_value=best_value,
                        evaluated=tuple(evaluated), failures=tuple(failures),
                        reports=reports)


@dataclass(frozen=True)
class PercentileEntry:
    p: float
    theta: tuple[int, ...]
    value: float | None
    margin: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def percentile_theta(session: ProblemSession, sort_key: str, direction: str,
                     p: float) -> tuple[int, ...]:
    """Portfolio selecting the ceil(p*N) agents ranked by impact coefficient.

    sort_key is "lambda" or "kappa"; direction "lowest" or "highest"; ranking
    ties break by agent index.
    """
    if sort_key not in ("lambda", "kappa"):
        raise ValueError(f"sort_key must be 'lambda' or 'kappa', got {sort_key!r}")
    if direction not in ("lowest", "highest"):
        raise ValueError(f"direction must be 'lowest' or 'highest', got {direction!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"percentile p must lie in [0, 1], got {p}")
    n = session.n_agents
    keys = [a.lam if sort_key == "lambda" else a.kappa for a in session.agents]
    order = sorted(range(n), key=lambda i: (keys[i], i))
    if direction == "highest":
        order = sorted(range(n), key=lambda i: (-keys[i], i))
    count = ceil(p * n)
    chosen = set(order[:count])
    return tuple(1 if i in chosen else 0 for i in range(n))


def percentile_portfolios(session: ProblemSession, sort_key: str, direction: str,
                          p_list) -> list[PercentileEntry]:
    """Value the percentile family; solver failures are recorded per p."""
    out = []
    for p in p_list:
        theta = percentile_theta(session, sort_key, direction, p)
        margin = session.wellposedness_margin(theta)
        try:
            value = session.report(theta).broker_value
        except WellPosednessViolated as exc:
            out.append(PercentileEntry(p=float(p), theta=theta, value=None,
                                       margin=margin, error=str(exc)))
            continue
        out.append(PercentileEntry(p=float(p), theta=theta, value=value,
                                   margin=margin))
    return out
