"""Generator cost functions and their convex conjugates.

Only the quadratic family C(P) = q P^2 / 2 + c P is shipped. Any other
strongly convex cost can be plugged in by providing the same five methods
(``value``, ``gradient``, ``conjugate``, ``conjugate_gradient`` and
``curvature``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class CostError(ValueError):
    pass


def _nonneg(x, what: str):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise CostError(f"{what} must be nonnegative")
    return arr


@dataclass(frozen=True)
class QuadraticCost:
    q: float
    c: float = 0.0

    def __post_init__(self):
        if not self.q > 0:
            raise CostError(f"curvature q must be positive, got {self.q}")
        if not self.c >= 0:
            raise CostError(f"linear coefficient c must be nonnegative, got {self.c}")

    def value(self, P):
        P = _nonneg(P, "power")
        return 0.5 * self.q * P**2 + self.c * P

    def gradient(self, P):
        P = _nonneg(P, "power")
        return self.q * P + self.c

    def conjugate(self, b):
        b = _nonneg(b, "bid")
        return np.maximum(b - self.c, 0.0) ** 2 / (2 * self.q)

    def conjugate_gradient(self, b):
        b = _nonneg(b, "bid")
        return np.maximum(b - self.c, 0.0) / self.q

    @property
    def curvature(self) -> float:
        return self.q


class CostProfile:
    """One cost per bus, evaluated element-wise on per-bus vectors."""

    def __init__(self, costs: Iterable[QuadraticCost]):
        self.costs = tuple(costs)
        if not self.costs:
            raise CostError("empty cost profile")
        self.q = np.array([c.q for c in self.costs])
        self.c = np.array([c.c for c in self.costs])
        self.q.setflags(write=False)
        self.c.setflags(write=False)

    @classmethod
    def quadratic(cls, q: Sequence[float], c: Sequence[float]) -> "CostProfile":
        if len(q) != len(c):
            raise CostError("q and c must have equal length")
        return cls(QuadraticCost(float(qi), float(ci)) for qi, ci in zip(q, c))

    def __len__(self):
        return len(self.costs)

    def __getitem__(self, i) -> QuadraticCost:
        return self.costs[i]

    def __eq__(self, other):
        return isinstance(other, CostProfile) and self.costs == other.costs

    def __repr__(self):
        return f"CostProfile(q={self.q.tolist()}, c={self.c.tolist()})"

    def with_changes(self, changes: dict[int, QuadraticCost]) -> "CostProfile":
        costs = list(self.costs)
        for i, cost in changes.items():
            costs[i] = cost
        return CostProfile(costs)

    # vectorised forms of the per-generator maps
    def value(self, P) -> np.ndarray:
        P = _nonneg(P, "power")
        return 0.5 * self.q * P**2 + self.c * P

    def total(self, P) -> float:
        return float(np.sum(self.value(P)))

    def gradient(self, P) -> np.ndarray:
        P = _nonneg(P, "power")
        return self.q * P + self.c

    def conjugate(self, b) -> np.ndarray:
        b = _nonneg(b, "bid")
        return np.maximum(b - self.c, 0.0) ** 2 / (2 * self.q)

    def conjugate_gradient(self, b) -> np.ndarray:
        b = _nonneg(b, "bid")
        return np.maximum(b - self.c, 0.0) / self.q


def cost_value(cost: QuadraticCost, P):
    return cost.value(P)


def cost_gradient(cost: QuadraticCost, P):
    return cost.gradient(P)


def conjugate_value(cost: QuadraticCost, b):
    return cost.conjugate(b)


def conjugate_gradient(cost: QuadraticCost, b):
    return cost.conjugate_gradient(b)
