"""Closed-loop bidding / ISO / swing dynamics and a projected Euler integrator.

The state is stored as one flat vector laid out as
``[phi (n-1), omega (n), b (n), P_g (n), lam (1)]``; :class:`SystemState`
is the structured view of it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .costs import CostProfile, QuadraticCost
from .market import solve_economic_dispatch
from .network import (
    Network,
    potential_gradient,
    potential_hessian,
    security_constraint_holds,
    swing_field_delta,
    swing_field_phi,
)

logger = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    def __init__(self, message: str, time: float, state: Optional[np.ndarray] = None):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time
        self.state = state
        self.partial: Optional["Trajectory"] = None


class InfeasibleInjection(ValueError):
    pass


@dataclass(frozen=True)
class SystemState:
    phi: np.ndarray
    omega: np.ndarray
    b: np.ndarray
    P_g: np.ndarray
    lam: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.omega, self.b, self.P_g, [self.lam]])

    @classmethod
    def from_vector(cls, x: np.ndarray, n: int) -> "SystemState":
        x = np.asarray(x, dtype=float)
        if x.shape != (4 * n,):
            raise ValueError(f"state vector must have length {4 * n}, got {x.shape}")
        k = n - 1
        return cls(x[:k].copy(), x[k:k + n].copy(), x[k + n:k + 2 * n].copy(),
                   x[k + 2 * n:k + 3 * n].copy(), float(x[-1]))


def state_slices(n: int) -> dict[str, slice]:
    k = n - 1
    return {
        "phi": slice(0, k),
        "omega": slice(k, k + n),
        "b": slice(k + n, k + 2 * n),
        "P_g": slice(k + 2 * n, k + 3 * n),
        "lam": slice(k + 3 * n, k + 3 * n + 1),
    }


@dataclass(frozen=True)
class Gains:
    tau_b: np.ndarray
    tau_g: np.ndarray
    tau_lam: float = 1.0
    rho: float = 300.0
    sigma: float = 300.0

    def __post_init__(self):
        for name in ("tau_b", "tau_g"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(arr <= 0):
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, arr)
        if not self.tau_lam > 0 or not self.rho > 0:
            raise ValueError("tau_lam and rho must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def uniform(cls, n: int, tau_b=1.0, tau_g=1.0, tau_lam=1.0, rho=300.0, sigma=300.0) -> "Gains":
        return cls(np.full(n, float(tau_b)), np.full(n, float(tau_g)), float(tau_lam),
                   float(rho), float(sigma))


@dataclass(frozen=True)
class Event:
    """Parameter change applied from ``time`` onward.

    ``loads`` maps bus index to the new load (per-unit); ``costs`` maps bus
    index to its new cost function.
    """

    time: float
    loads: dict[int, float] = field(default_factory=dict)
    costs: dict[int, QuadraticCost] = field(default_factory=dict)


class EventSchedule(tuple):
    def __new__(cls, events: Iterable[Event] = ()):
        events = tuple(events)
        times = [e.time for e in events]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        return super().__new__(cls, events)


def project_rate(a, b):
    """Positive projection of rate ``a`` at the nonnegative point ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ValueError("projection point must be nonnegative")
    return np.where(b > 0, a, np.maximum(a, 0.0))


def bid_field(costs: CostProfile, b, P_g, tau_b) -> np.ndarray:
    return project_rate(P_g - costs.conjugate_gradient(b), b) / tau_b


def iso_field(b, P_g, lam, omega, P_d, gains: Gains) -> tuple[np.ndarray, float]:
    mismatch = float(np.sum(P_d) - np.sum(P_g))
    drive = lam - b + gains.rho * mismatch - gains.sigma**2 * omega
    dP = project_rate(drive, P_g) / gains.tau_g
    return dP, mismatch / gains.tau_lam


class ClosedLoop:
    """Vector field of the coupled plant and market for fixed parameters."""

    def __init__(self, net: Network, costs: CostProfile, P_d, gains: Gains):
        if len(costs) != net.n:
            raise ValueError("cost profile length must equal bus count")
        self.net = net
        self.costs = costs
        self.P_d = np.asarray(P_d, dtype=float).copy()
        if self.P_d.shape != (net.n,):
            raise ValueError("load vector must have one entry per bus")
        self.gains = replace(
            gains,
            tau_b=np.broadcast_to(gains.tau_b, (net.n,)).copy(),
            tau_g=np.broadcast_to(gains.tau_g, (net.n,)).copy(),
        )
        self.sl = state_slices(net.n)
        n = net.n
        self._constrained = np.zeros(4 * n, dtype=bool)
        self._constrained[self.sl["b"]] = True
        self._constrained[self.sl["P_g"]] = True
        # cached for the hot loop
        self._flow_map = net.tree_incidence @ net.tree_pinv @ net.incidence
        self._edge_map = net.edge_map
        self._dtT = net.omega_base * net.tree_incidence.T

    def with_params(self, P_d=None, costs: Optional[CostProfile] = None) -> "ClosedLoop":
        return ClosedLoop(self.net, costs if costs is not None else self.costs,
                          self.P_d if P_d is None else P_d, self.gains)

    @property
    def constrained(self) -> np.ndarray:
        return self._constrained

    def drift(self, x: np.ndarray) -> np.ndarray:
        """Unprojected field F(x)."""
        sl, net, g, costs = self.sl, self.net, self.gains, self.costs
        phi, omega = x[sl["phi"]], x[sl["omega"]]
        b, P_g, lam = x[sl["b"]], x[sl["P_g"]], x[-1]
        flow = self._flow_map @ (net.gamma * np.sin(self._edge_map @ phi))
        mismatch = self.P_d.sum() - P_g.sum()
        out = np.empty_like(x)
        out[sl["phi"]] = self._dtT @ omega
        out[sl["omega"]] = (-flow - net.damping * omega + P_g - self.P_d) / net.inertia
        out[sl["b"]] = (P_g - np.maximum(b - costs.c, 0.0) / costs.q) / g.tau_b
        out[sl["P_g"]] = (lam - b + g.rho * mismatch - g.sigma**2 * omega) / g.tau_g
        out[-1] = mismatch / g.tau_lam
        return out

    def rate(self, x: np.ndarray) -> np.ndarray:
        """Projected field: F(x) plus the minimal-norm boundary correction."""
        f = self.drift(x)
        at_bound = self._constrained & (x <= 0) & (f < 0)
        f[at_bound] = 0.0
        return f

    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        # frequency first; every other component then sees the updated omega
        sl = self.sl
        f = self.drift(x)
        if not np.all(np.isfinite(f)):
            raise IntegrationError("non-finite rate", np.nan, x.copy())
        om = sl["omega"]
        d_omega = dt * f[om]
        x_new = x + dt * f
        x_new[sl["phi"]] += dt * (self._dtT @ d_omega)
        x_new[sl["P_g"]] -= dt * self.gains.sigma**2 * d_omega / self.gains.tau_g
        c = self._constrained
        x_new[c] = np.maximum(x_new[c], 0.0)
        return x_new


def closed_loop_field(net: Network, costs: CostProfile, state: SystemState, P_d, gains: Gains) -> SystemState:
    """Projected rate of every state component, returned as a SystemState."""
    if np.any(state.b < 0) or np.any(state.P_g < 0):
        raise ValueError("bids and setpoints must be nonnegative")
    tau_b = np.broadcast_to(gains.tau_b, (net.n,))
    dphi, domega = swing_field_phi(net, state.phi, state.omega, state.P_g, P_d)
    db = bid_field(costs, state.b, state.P_g, tau_b)
    dP, dlam = iso_field(state.b, state.P_g, state.lam, state.omega, P_d, gains)
    return SystemState(dphi, domega, db, dP, dlam)


def step(model: ClosedLoop, x: np.ndarray, dt: float) -> np.ndarray:
    """One projected semi-implicit Euler step.

    The frequency is advanced first and the angle and setpoint updates use
    the new frequency (symplectic ordering for the swing oscillation). Every
    other component moves by dt times its unprojected rate; bids and
    setpoints are then clamped at zero.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    return model.step(np.asarray(x, dtype=float), dt)


def simulate_swing(net: Network, x0, P_g, P_d, t_end: float, dt: float = 5e-4,
                   coords: str = "phi", stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop swing trajectory with fixed injections.

    ``x0`` is (angles, omega) where the angles are bus angles for
    ``coords="delta"`` and tree angle differences for ``coords="phi"``. Uses
    the same semi-implicit ordering as :meth:`ClosedLoop.step`. Returns the
    sample times and the stacked states.
    """
    if coords not in ("phi", "delta"):
        raise ValueError("coords must be 'phi' or 'delta'")
    field_fn = swing_field_phi if coords == "phi" else swing_field_delta
    ang, om = (np.asarray(v, dtype=float).copy() for v in x0)
    nsteps = int(round(t_end / dt))
    times, states = [0.0], [np.concatenate([ang, om])]
    for k in range(1, nsteps + 1):
        _, d_omega = field_fn(net, ang, om, P_g, P_d)
        om = om + dt * d_omega
        d_ang, _ = field_fn(net, ang, om, P_g, P_d)
        ang = ang + dt * d_ang
        if k % stride == 0 or k == nsteps:
            times.append(k * dt)
            states.append(np.concatenate([ang, om]))
    return np.array(times), np.array(states)


def find_synchronous_equilibrium(net: Network, P_g, P_d, tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Tree angles at which the line flows balance the injection ``P_g - P_d``."""
    inj = np.asarray(P_g, dtype=float) - np.asarray(P_d, dtype=float)
    if abs(inj.sum()) > 1e-9 * max(1.0, np.abs(inj).max()):
        raise InfeasibleInjection(f"injection does not sum to zero ({inj.sum():.3g})")
    target = net.tree_pinv @ inj
    phi = np.zeros(net.n - 1)

    def resid(p):
        return net.tree_incidence @ potential_gradient(net, p) - inj

    r = resid(phi)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        H = potential_hessian(net, phi)
        try:
            dphi = np.linalg.solve(H, target - potential_gradient(net, phi))
        except np.linalg.LinAlgError:
            raise InfeasibleInjection("singular Jacobian in Newton solve") from None
        t = 1.0
        norm0 = np.linalg.norm(r)
        while t > 1e-6:
            cand = phi + t * dphi
            r_cand = resid(cand)
            if np.linalg.norm(r_cand) < norm0:
                break
            t *= 0.5
        phi, r = cand, r_cand
    if np.max(np.abs(r)) >= tol:
        raise InfeasibleInjection(f"Newton did not converge (residual {np.max(np.abs(r)):.3g})")
    if not security_constraint_holds(net, phi):
        raise InfeasibleInjection("equilibrium violates the security constraint")
    return phi


def dispatch_equilibrium(net: Network, costs: CostProfile, P_d) -> SystemState:
    """Efficient equilibrium built from the economic dispatch.

    Producing generators bid the market price; idle ones bid their marginal
    cost at zero output.
    """
    sol = solve_economic_dispatch(costs, P_d)
    b = np.where(sol.P_star > 0, sol.lambda_star, costs.c)
    phi = find_synchronous_equilibrium(net, sol.P_star, P_d)
    return SystemState(phi, np.zeros(net.n), b, sol.P_star.copy(), sol.lambda_star)


class Observer(Protocol):
    def __call__(self, t: float, x: np.ndarray, segment: int, model: ClosedLoop) -> None: ...


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    n: int
    segment_starts: list[float]
    segment_index: np.ndarray
    converged_at: Optional[float] = None

    def view(self, k: int) -> SystemState:
        return SystemState.from_vector(self.states[k], self.n)

    def component(self, name: str) -> np.ndarray:
        return self.states[:, state_slices(self.n)[name]]


@dataclass
class ConvergenceDetector:
    threshold: float = 1e-6
    hold: float = 0.5
    _since: Optional[float] = None

    def update(self, t: float, rate: np.ndarray) -> bool:
        if np.max(np.abs(rate)) < self.threshold:
            if self._since is None:
                self._since = t
            return t - self._since >= self.hold
        self._since = None
        return False

    def reset(self):
        self._since = None


def integrate(
    model: ClosedLoop,
    x0,
    events: Sequence[Event] = (),
    t_end: float = 10.0,
    dt: float = 5e-4,
    stride: int = 1,
    observers: Sequence[Observer] = (),
    stop_on_convergence: bool = False,
    detector: Optional[ConvergenceDetector] = None,
) -> Trajectory:
    """Integrate from t=0 to ``t_end``, applying events at their exact times.

    Parameters switch at the event instant while the state stays continuous.
    Samples are kept every ``stride`` steps plus at every segment boundary and
    at the final time.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = model.net.n
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (4 * n,):
        raise ValueError("initial state has wrong length")
    if np.any(x[model.constrained] < 0):
        raise ValueError("initial bids and setpoints must be nonnegative")
    events = list(events)
    for e in events:
        if not 0 <= e.time < t_end:
            raise ValueError(f"event time {e.time} outside [0, {t_end})")
    boundaries = [0.0] + [e.time for e in events if e.time > 0] + [t_end]
    pending = {e.time: e for e in events}
    detector = detector or ConvergenceDetector()

    times, states, segs = [], [], []
    seg_starts = []
    converged_at = None

    def record(t, x, seg):
        times.append(t)
        states.append(x.copy())
        segs.append(seg)

    t = 0.0
    seg = -1
    stop = False
    for k in range(len(boundaries) - 1):
        t0, t1 = boundaries[k], boundaries[k + 1]
        ev = pending.get(t0)
        if ev is not None:
            model = apply_event(model, ev)
        seg += 1
        seg_starts.append(t0)
        detector.reset()
        record(t0, x, seg)
        for obs in observers:
            obs(t0, x, seg, model)
        nsteps = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
        last_event = k == len(boundaries) - 2
        for j in range(nsteps):
            h = dt if j < nsteps - 1 else (t1 - t0) - dt * (nsteps - 1)
            try:
                x_next = model.step(x, h)
                if not np.all(np.isfinite(x_next)):
                    raise IntegrationError("state became non-finite", t, x_next)
            except IntegrationError as err:
                failure = IntegrationError(str(err).split(" at t=")[0], t, err.state)
                failure.partial = Trajectory(np.array(times), np.array(states), n, seg_starts,
                                             np.array(segs))
                raise failure from None
            x = x_next
            t = t0 + dt * (j + 1) if j < nsteps - 1 else t1
            for obs in observers:
                obs(t, x, seg, model)
            if (j + 1) % stride == 0 and j < nsteps - 1:
                record(t, x, seg)
            if last_event and stop_on_convergence and detector.update(t, model.rate(x)):
                converged_at = t
                stop = True
                break
        if stop or j == nsteps - 1:
            if not times or times[-1] != t:
                record(t, x, seg)
        if stop:
            break

    return Trajectory(np.array(times), np.array(states), n, seg_starts, np.array(segs), converged_at)


def apply_event(model: ClosedLoop, event: Event) -> ClosedLoop:
    P_d = model.P_d.copy()
    for i, v in event.loads.items():
        P_d[i] = v
    costs = model.costs.with_changes(event.costs) if event.costs else model.costs
    return model.with_params(P_d=P_d, costs=costs)


class ScenarioLike(Protocol):
    network: Network
    costs: CostProfile
    P_d: np.ndarray
    gains: Gains
    events: Sequence[Event]
    t_end: float
    dt: float
    stride: int

    def initial_state(self) -> SystemState: ...


def simulate(
    scenario: ScenarioLike,
    observers: Sequence[Observer] = (),
    stop_on_convergence: bool = True,
    dt: Optional[float] = None,
) -> Trajectory:
    model = ClosedLoop(scenario.network, scenario.costs, scenario.P_d, scenario.gains)
    x0 = scenario.initial_state().to_vector()
    return integrate(
        model, x0, scenario.events, scenario.t_end, dt or scenario.dt, scenario.stride,
        observers=observers, stop_on_convergence=stop_on_convergence,
    )
