"""Economic dispatch, bid-based ISO clearing and the bidding game."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .costs import CostProfile


class MarketError(ValueError):
    pass


BALANCE_TOL = 1e-10
MAX_BISECTION_ITER = 200


@dataclass(frozen=True)
class DispatchSolution:
    P_star: np.ndarray
    lambda_star: float
    mu_star: np.ndarray
    iterations: int = 0

    @property
    def active(self) -> np.ndarray:
        return self.P_star > 0

    def kkt_residuals(self, costs: CostProfile, P_d) -> dict[str, float]:
        grad = costs.gradient(self.P_star)
        return {
            "stationarity": float(np.max(np.abs(grad - self.lambda_star - self.mu_star))),
            "balance": float(abs(self.P_star.sum() - np.sum(P_d))),
            "complementarity": float(abs(self.P_star @ self.mu_star)),
            "dual_feasibility": float(max(0.0, -self.mu_star.min())),
            "primal_feasibility": float(max(0.0, -self.P_star.min())),
        }


@dataclass(frozen=True)
class BidProfile:
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise MarketError("bids must be finite and nonnegative")
        object.__setattr__(self, "b", b)


def _supply(costs: CostProfile, lam: float) -> np.ndarray:
    return np.maximum(0.0, (lam - costs.c) / costs.q)


def solve_economic_dispatch(costs: CostProfile, P_d) -> DispatchSolution:
    """Minimise total cost subject to power balance and P >= 0.

    Bisection on the market price: each generator supplies
    max(0, (lam - c_i) / q_i) and lam is adjusted until supply meets the
    total load. The active set found by bisection is then used to solve
    for lam in closed form, which removes the bisection error.
    """
    load = float(np.sum(P_d))
    if not load > 0:
        raise MarketError("total load must be positive")
    lo, hi = 0.0, float(costs.c.max() + costs.q.max() * load)
    it = 0
    lam = 0.5 * (lo + hi)
    for it in range(1, MAX_BISECTION_ITER + 1):
        lam = 0.5 * (lo + hi)
        mismatch = _supply(costs, lam).sum() - load
        if abs(mismatch) < BALANCE_TOL:
            break
        if mismatch > 0:
            hi = lam
        else:
            lo = lam

    active = lam > costs.c
    if active.any():
        inv_q = 1.0 / costs.q[active]
        polished = (load + np.sum(costs.c[active] * inv_q)) / inv_q.sum()
        # keep the polished price only if it preserves the active set
        if np.array_equal(polished > costs.c, active):
            lam = polished
    P = _supply(costs, lam)
    mu = np.where(P > 0, 0.0, costs.c - lam)
    return DispatchSolution(P, float(lam), np.maximum(mu, 0.0), it)


def solve_iso_lp(b, P_d) -> tuple[np.ndarray, bool]:
    """Cheapest allocation of the total load for bids ``b``.

    The whole load goes to the minimum-bid generators, split equally when
    several tie. The flag is False when the optimizer is not unique.
    """
    b = BidProfile(b).b if not isinstance(b, BidProfile) else b.b
    load = float(np.sum(P_d))
    if not load > 0:
        raise MarketError("total load must be positive")
    winners = b == b.min()
    P = np.where(winners, load / winners.sum(), 0.0)
    return P, bool(winners.sum() == 1)


def payoff(i: int, b, P_opt, costs: CostProfile) -> float:
    b = b.b if isinstance(b, BidProfile) else np.asarray(b, dtype=float)
    P_i = float(np.asarray(P_opt)[i])
    if P_i < 0:
        raise MarketError("allocation must be nonnegative")
    return P_i * float(b[i]) - float(costs[i].value(P_i))


def deviation_payoff(
    i: int,
    bid: float,
    b,
    costs: CostProfile,
    P_d,
    rule: Literal["any", "worst"] = "any",
) -> float:
    """Payoff of generator ``i`` after unilaterally bidding ``bid``.

    When the deviated LP has several optimizers, ``rule="any"`` returns the
    best payoff the deviator can get over all of them (a deviation counts
    if any optimizer rewards it), ``rule="worst"`` the worst one.
    """
    b = b.b if isinstance(b, BidProfile) else np.asarray(b, dtype=float)
    others = np.delete(b, i)
    load = float(np.sum(P_d))
    cost = costs[i]

    def profit(P):
        return P * bid - float(cost.value(P))

    if others.size == 0 or bid < others.min():
        return profit(load)
    if bid > others.min():
        return 0.0
    # tie: any split of the load between the tied bidders is optimal
    if rule == "worst":
        return min(profit(0.0), profit(load))
    P_best = min(float(cost.conjugate_gradient(bid)), load)
    return profit(P_best)


def efficient_nash_interval(sol: DispatchSolution, costs: CostProfile) -> np.ndarray:
    """Per-bus bounds [lambda*, grad C_i(P*_i)] of efficient Nash bids, shape (n, 2)."""
    if np.count_nonzero(sol.P_star > 0) < 2:
        raise MarketError("hypothesis violated: fewer than two generators produce")
    upper = costs.gradient(sol.P_star)
    upper = np.where(sol.P_star > 0, sol.lambda_star, upper)
    lower = np.full_like(upper, sol.lambda_star)
    return np.column_stack([lower, upper])


@dataclass
class BidCheck:
    efficient: bool
    lp_optimal: bool
    failing: list[int] = field(default_factory=list)
    desired: np.ndarray | None = None


def verify_efficient_bid(b, sol: DispatchSolution, costs: CostProfile, tol: float = 1e-6) -> BidCheck:
    """Check that P* clears the ISO LP at ``b`` and each P*_i is profit-maximising."""
    b = b.b if isinstance(b, BidProfile) else BidProfile(b).b
    load = sol.P_star.sum()
    lp_optimal = bool(b @ sol.P_star <= b.min() * load + tol * max(1.0, abs(b.min() * load)))
    desired = costs.conjugate_gradient(b)
    failing = [int(k) for k in np.flatnonzero(np.abs(desired - sol.P_star) > tol)]
    if not lp_optimal:
        # generators whose bid undercuts the price paid to producers
        produced = sol.P_star > 0
        top = b[produced].max() if produced.any() else np.inf
        failing = sorted(set(failing) | {int(k) for k in np.flatnonzero(b < top - tol)})
    return BidCheck(lp_optimal and not failing, lp_optimal, failing, desired)
