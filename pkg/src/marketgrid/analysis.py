"""Lyapunov monitoring and efficiency checks for closed-loop states."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import CostProfile
from .dynamics import ClosedLoop, Gains, SystemState, state_slices
from .network import Network, potential, potential_gradient

logger = logging.getLogger(__name__)

DESCENT_SLACK = 1e-6


def market_weight(sigma: float) -> float:
    """Weight of the market block of V relative to the network block.

    The frequency feedback enters the setpoint dynamics as -sigma^2 omega,
    so dividing the market block by sigma^2 makes the omega/P_g cross terms
    cancel in the derivative of V. With sigma = 0 there is no feedback and
    both blocks keep unit weight.
    """
    return 1.0 / sigma**2 if sigma > 0 else 1.0


class Lyapunov:
    """V(x) = Bregman distance of U at phi_bar / omega_base + |omega|_M^2 / 2
    + w * |(b, P_g, lam) - bar|_tau^2 / 2, with w from :func:`market_weight`."""

    def __init__(self, net: Network, gains: Gains, x_bar: SystemState):
        self.net = net
        self.n = net.n
        self.x_bar = x_bar
        self.w = market_weight(gains.sigma)
        self.tau_b = np.broadcast_to(gains.tau_b, (net.n,)).astype(float)
        self.tau_g = np.broadcast_to(gains.tau_g, (net.n,)).astype(float)
        self.tau_lam = float(gains.tau_lam)
        self.sl = state_slices(net.n)
        self._bar = x_bar.to_vector()
        self._U_bar = potential(net, x_bar.phi)
        self._gU_bar = potential_gradient(net, x_bar.phi)
        n = net.n
        self._weights = np.concatenate([
            np.zeros(n - 1),
            net.inertia,
            self.w * self.tau_b,
            self.w * self.tau_g,
            [self.w * self.tau_lam],
        ])

    def __call__(self, x) -> float:
        x = x.to_vector() if isinstance(x, SystemState) else np.asarray(x, dtype=float)
        phi = x[self.sl["phi"]]
        bregman = potential(self.net, phi) - (phi - self.x_bar.phi) @ self._gU_bar - self._U_bar
        dx = x - self._bar
        return float(bregman / self.net.omega_base + 0.5 * dx @ (self._weights * dx))

    def gradient(self, x) -> np.ndarray:
        x = x.to_vector() if isinstance(x, SystemState) else np.asarray(x, dtype=float)
        g = self._weights * (x - self._bar)
        phi = x[self.sl["phi"]]
        g[self.sl["phi"]] = (potential_gradient(self.net, phi) - self._gU_bar) / self.net.omega_base
        return g


def lyapunov_value(net: Network, gains: Gains, state, x_bar: SystemState) -> float:
    return Lyapunov(net, gains, x_bar)(state)


@dataclass
class LyapunovReport:
    times: np.ndarray
    values: np.ndarray
    max_increase: float
    slack: float = DESCENT_SLACK

    @property
    def descent(self) -> bool:
        return self.max_increase <= self.slack

    @property
    def relative_decrease(self) -> float:
        v0 = self.values[0]
        if v0 <= 0:
            return 1.0
        return float((v0 - self.values[-1]) / v0)


class LyapunovMonitor:
    """Integrator observer that evaluates V at every accepted step.

    The reference equilibrium of each segment is built from the economic
    dispatch of that segment's parameters, never from the trajectory.
    """

    def __init__(self, gains: Gains, slack: float = DESCENT_SLACK):
        from .dynamics import dispatch_equilibrium  # local: avoids a cycle at import

        self._equilibrium = dispatch_equilibrium
        self.gains = gains
        self.slack = slack
        self._segments: dict[int, tuple[list, list]] = {}
        self._V: Optional[Lyapunov] = None
        self._seg = -1
        self.references: dict[int, SystemState] = {}

    def __call__(self, t: float, x: np.ndarray, segment: int, model: ClosedLoop) -> None:
        if segment != self._seg:
            x_bar = self._equilibrium(model.net, model.costs, model.P_d)
            self.references[segment] = x_bar
            self._V = Lyapunov(model.net, self.gains, x_bar)
            self._seg = segment
            self._segments[segment] = ([], [])
        ts, vs = self._segments[segment]
        ts.append(t)
        vs.append(self._V(x))

    def reports(self) -> list[LyapunovReport]:
        out = []
        for seg in sorted(self._segments):
            ts, vs = self._segments[seg]
            v = np.asarray(vs)
            inc = float(np.max(np.diff(v))) if v.size > 1 else 0.0
            out.append(LyapunovReport(np.asarray(ts), v, max(inc, 0.0), self.slack))
        return out


@dataclass
class EfficiencyReport:
    residuals: dict[str, float]
    omega_norm: float
    in_nash_interval: list[bool]
    tol: float
    failures: list[str] = field(default_factory=list)
    network: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "omega_norm": self.omega_norm,
            "residuals": dict(self.residuals),
            "in_nash_interval": list(self.in_nash_interval),
            "failures": list(self.failures),
            "network": dict(self.network),
        }


def check_equilibrium_efficiency(
    net: Network, costs: CostProfile, state: SystemState, P_d, tol: float = 1e-4
) -> EfficiencyReport:
    """Verify the equilibrium conditions that make a closed-loop state efficient.

    The gate covers frequency, power balance, the KKT conditions of the
    dispatch with mu = grad C(P) - lam, the best-response identity
    P = grad C*(b) and the Nash interval of each bid. Power-like residuals are
    in per-unit; price-like residuals are divided by max(1, |lam|) so ``tol``
    is a relative price tolerance. The line-flow residual and the security
    margin are reported under ``network`` but do not gate: they measure how
    far the swing transient has settled, not whether the market is efficient.
    """
    P, b, lam = np.asarray(state.P_g), np.asarray(state.b), float(state.lam)
    P_d = np.asarray(P_d, dtype=float)
    price_scale = max(1.0, abs(lam))
    grad = costs.gradient(np.maximum(P, 0.0))
    mu = grad - lam
    omega_norm = float(np.max(np.abs(state.omega)))
    res = {
        "frequency": omega_norm,
        "balance": float(abs(P_d.sum() - P.sum())),
        "dual_feasibility": float(max(0.0, -mu.min())) / price_scale,
        "complementarity": float(np.max(np.minimum(np.maximum(P, 0.0), np.abs(mu) / price_scale))),
        "primal_feasibility": float(max(0.0, -P.min())),
        "best_response": float(np.max(np.abs(P - costs.conjugate_gradient(np.maximum(b, 0.0))))),
    }
    lower = b >= lam - tol * price_scale
    upper = b <= grad + tol * price_scale
    inside = [bool(v) for v in lower & upper]
    failures = [k for k, v in res.items() if not v <= tol]
    if not all(inside):
        failures.append("nash_interval")
    angles = np.abs(net.edge_map @ state.phi)
    network = {
        "flow_balance": float(np.max(np.abs(
            net.tree_incidence @ potential_gradient(net, state.phi) - (P - P_d)))),
        "security_margin": float(np.pi / 2 - angles.max()),
    }
    return EfficiencyReport(res, omega_norm, inside, tol, failures, network)


def _sample_state(rng, x_bar_vec, radius, sl, n):
    x = x_bar_vec + radius * rng.uniform(-1.0, 1.0, size=x_bar_vec.shape)
    for key in ("b", "P_g"):
        x[sl[key]] = np.maximum(x[sl[key]], 0.0)
    return x


def descent_condition_sample(
    net: Network,
    costs: CostProfile,
    gains: Gains,
    x_bar: SystemState,
    P_d,
    n_samples: int = 10_000,
    radius: float = 0.1,
    seed: Optional[int] = 0,
) -> float:
    """Largest sampled value of <grad V(x), projected rate(x)> around ``x_bar``.

    Samples are drawn uniformly in a box of half-width ``radius`` and clipped
    to the nonnegative orthant, so boundary points with active projections
    are included. The box is halved whenever its corner violates the
    security constraint.
    """
    rng = np.random.default_rng(seed)
    model = ClosedLoop(net, costs, P_d, gains)
    V = Lyapunov(net, gains, x_bar)
    sl = model.sl
    bar = x_bar.to_vector()
    # every edge angle in the box is bounded by |edge angle at x_bar| + r * row sum
    base = np.abs(net.edge_map @ x_bar.phi)
    spread = np.abs(net.edge_map).sum(axis=1)
    r = radius
    while np.any(base + r * spread >= np.pi / 2) and r > 1e-9:
        r *= 0.5
    if r < radius:
        warnings.warn(f"sampling box shrunk from {radius} to {r} to respect the security constraint")
    worst = V.gradient(bar) @ model.rate(bar)
    for _ in range(n_samples):
        x = _sample_state(rng, bar, r, sl, net.n)
        val = V.gradient(x) @ model.rate(x)
        if np.isnan(val):
            return float("nan")  # never let a bad sample pass as descent
        if val > worst:
            worst = val
    return float(worst)
