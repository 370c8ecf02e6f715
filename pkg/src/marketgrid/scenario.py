"""Scenario files, the built-in 14-bus experiment, and run/check drivers.

Scenario files are YAML with five top-level sections: ``network``, ``costs``,
``gains``, ``events`` and ``run``. Buses are numbered from 1 and powers are
in MW at the file boundary; everything is converted to 0-indexed per-unit
quantities on load.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import yaml

from .analysis import (
    Lyapunov,
    LyapunovMonitor,
    check_equilibrium_efficiency,
)
from .costs import CostProfile, QuadraticCost
from .dynamics import (
    ClosedLoop,
    Event,
    EventSchedule,
    Gains,
    IntegrationError,
    SystemState,
    Trajectory,
    apply_event,
    dispatch_equilibrium,
    integrate,
    state_slices,
)
from .market import DispatchSolution, solve_economic_dispatch
from .network import Network

logger = logging.getLogger(__name__)

BASE_MVA = 100.0
OMEGA_NOMINAL = 2 * math.pi * 60.0
FREQ_TOL = 1e-3
DISPATCH_RTOL = 0.01
BID_RTOL = 0.005
INACTIVE_BID_RTOL = 0.01


class ScenarioError(ValueError):
    pass


def mw_to_pu(x):
    return np.asarray(x, dtype=float) / BASE_MVA


def pu_to_mw(x):
    return np.asarray(x, dtype=float) * BASE_MVA


def cost_per_hour(costs: CostProfile, P_pu) -> float:
    """Total cost in $/h; cost coefficients are per-unit so C is scaled by the base."""
    return BASE_MVA * costs.total(np.maximum(P_pu, 0.0))


@dataclass
class Scenario:
    name: str
    network: Network
    costs: CostProfile
    P_d: np.ndarray
    gains: Gains
    events: EventSchedule = field(default_factory=EventSchedule)
    t_end: float = 10.0
    dt: float = 5e-4
    stride: int = 20
    initial: Optional[SystemState] = None
    description: str = ""

    def __post_init__(self):
        n = self.network.n
        self.P_d = np.asarray(self.P_d, dtype=float)
        if len(self.costs) != n or self.P_d.shape != (n,):
            raise ScenarioError("costs and loads must have one entry per bus")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if self.stride < 1:
            raise ScenarioError("stride must be at least 1")
        self.events = EventSchedule(self.events)
        for e in self.events:
            if not 0 <= e.time < self.t_end:
                raise ScenarioError(f"event time {e.time} outside [0, t_end={self.t_end})")
            for i in list(e.loads) + list(e.costs):
                if not 0 <= i < n:
                    raise ScenarioError(f"event at t={e.time} references unknown bus {i + 1}")

    def initial_state(self) -> SystemState:
        if self.initial is not None:
            return self.initial
        return dispatch_equilibrium(self.network, self.costs, self.P_d)

    def with_overrides(self, dt: Optional[float] = None, sigma: Optional[float] = None) -> "Scenario":
        gains = self.gains
        if sigma is not None:
            gains = Gains(gains.tau_b, gains.tau_g, gains.tau_lam, gains.rho, float(sigma))
        return Scenario(self.name, self.network, self.costs, self.P_d, gains, self.events,
                        self.t_end, dt if dt is not None else self.dt, self.stride,
                        self.initial, self.description)

    def segments(self) -> list[tuple[float, float, CostProfile, np.ndarray]]:
        """(t0, t1, costs, loads) for every interval between events."""
        model = ClosedLoop(self.network, self.costs, self.P_d, self.gains)
        bounds = [0.0] + [e.time for e in self.events if e.time > 0] + [self.t_end]
        by_time = {e.time: e for e in self.events}
        out = []
        for t0, t1 in zip(bounds, bounds[1:]):
            if t0 in by_time:
                model = apply_event(model, by_time[t0])
            out.append((t0, t1, model.costs, model.P_d.copy()))
        return out


# --- built-in IEEE 14-bus case ------------------------------------------------

_IEEE14_EDGES = [
    (1, 2), (1, 5), (2, 3), (2, 4), (2, 5), (3, 4), (4, 5), (4, 7), (4, 9), (5, 6),
    (6, 11), (6, 12), (6, 13), (7, 8), (7, 9), (9, 10), (9, 14), (10, 11), (12, 13), (13, 14),
]
# standard 14-bus branch resistance/reactance (pu); not part of the market data
_IEEE14_RX = [
    (0.01938, 0.05917), (0.05403, 0.22304), (0.04699, 0.19797), (0.05811, 0.17632),
    (0.05695, 0.17388), (0.06701, 0.17103), (0.01335, 0.04211), (0.0, 0.20912),
    (0.0, 0.55618), (0.0, 0.25202), (0.09498, 0.19890), (0.12291, 0.25581),
    (0.06615, 0.13027), (0.0, 0.17615), (0.0, 0.11001), (0.03181, 0.08450),
    (0.12711, 0.27038), (0.08205, 0.19207), (0.22092, 0.19988), (0.17093, 0.34802),
]
_IEEE14_VOLTAGE = [1.06, 1.045, 1.01, 1.018, 1.02, 1.06, 1.06, 1.06, 1.056, 1.051,
                   1.057, 1.055, 1.05, 1.036]
_IEEE14_GEN_BUSES = [1, 2, 3, 6, 8]
_IEEE14_LOAD_MW = [0, 22, 80, 48, 7.6, 11, 0, 0, 30, 9.0, 3.5, 6.1, 14, 15]
LOAD_BUS_COST = 1e4
LOAD_BUS_INERTIA = 0.1


def _ieee14_dict(sigma: float) -> dict:
    n = 14
    susceptance = [x / (r * r + x * x) for r, x in _IEEE14_RX]
    inertia = [LOAD_BUS_INERTIA] * n
    for bus, m in zip(_IEEE14_GEN_BUSES, [5.5, 4.5, 4.0, 5.0, 4.0]):
        inertia[bus - 1] = m
    q = [LOAD_BUS_COST] * n
    c = [LOAD_BUS_COST] * n
    for bus, qi, ci in zip(_IEEE14_GEN_BUSES, [26, 70, 150, 150, 300], [7.5, 30, 90, 82.5, 75]):
        q[bus - 1], c[bus - 1] = float(qi), float(ci)
    return {
        "name": f"ieee14-sigma{sigma:g}",
        "description": "IEEE 14-bus market with a load step at bus 3 (t=1 s) "
                       "and a cost change at buses 3, 6, 8 (t=15 s)",
        "network": {
            "buses": n,
            "edges": [list(e) for e in _IEEE14_EDGES],
            "susceptance": [round(b, 12) for b in susceptance],
            "voltage": list(_IEEE14_VOLTAGE),
            "inertia": inertia,
            "damping": [2.0 + 0.25 * (i % 5) for i in range(n)],
            "omega_base": OMEGA_NOMINAL,
            "loads_mw": list(_IEEE14_LOAD_MW),
        },
        "costs": {"q": q, "c": c},
        "gains": {"tau_b": 1e-3, "tau_g": 1.0, "tau_lam": 1e-4, "rho": 300.0, "sigma": float(sigma)},
        "events": [
            {"time": 1.0, "loads_mw": {3: 94.2}},
            {"time": 15.0, "costs": {3: {"q": 60.0, "c": 38.0},
                                     6: {"q": 75.0, "c": 45.0},
                                     8: {"q": 68.0, "c": 23.0}}},
        ],
        "run": {"t_end": 30.0, "dt": 5e-4, "stride": 20, "initial": "equilibrium"},
    }


BUILTIN = {
    "ieee14-sigma300": lambda: _ieee14_dict(300.0),
    "ieee14-sigma0": lambda: _ieee14_dict(0.0),
}


def builtin_names() -> list[str]:
    return sorted(BUILTIN)


# --- parsing --------------------------------------------------------------------

class _Locator:
    """Finds the source line of a key path in a YAML document for error messages."""

    def __init__(self, text: str):
        try:
            self.root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError:
            self.root = None

    def line(self, path: Sequence[Union[str, int]]) -> Optional[int]:
        node = self.root
        best = node.start_mark.line + 1 if node is not None else None
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if str(k.value) == str(key):
                        nxt = v
                        best = k.start_mark.line + 1
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                best = node.start_mark.line + 1
            else:
                break
            if node is None:
                break
        return best


class _Reader:
    def __init__(self, data: dict, locator: Optional[_Locator]):
        self.data = data
        self.loc = locator

    def fail(self, path, msg):
        where = ""
        if self.loc is not None:
            line = self.loc.line(path)
            if line is not None:
                where = f" (line {line})"
        raise ScenarioError(f"{'.'.join(map(str, path))}: {msg}{where}")

    def get(self, path, default=..., kind=None):
        node = self.data
        for key in path:
            if not isinstance(node, dict) or key not in node:
                if default is ...:
                    self.fail(path, "missing")
                return default
            node = node[key]
        if kind is not None:
            try:
                return kind(node)
            except (TypeError, ValueError) as err:
                self.fail(path, str(err))
        return node

    def vector(self, path, n, default=...):
        raw = self.get(path, default)
        if raw is default and default is not ...:
            return default
        if np.isscalar(raw):
            raw = [raw] * n
        try:
            arr = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected a list of numbers")
        if arr.shape != (n,):
            self.fail(path, f"expected {n} entries, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            self.fail(path, "entries must be finite")
        return arr

    def bus(self, path, raw, n) -> int:
        try:
            b = int(raw)
        except (TypeError, ValueError):
            self.fail(path, f"bus {raw!r} is not an integer")
        if not 1 <= b <= n:
            self.fail(path, f"bus {b} does not exist (1..{n})")
        return b - 1


def scenario_from_dict(data: dict, name: str = "scenario", text: Optional[str] = None) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping")
    r = _Reader(data, _Locator(text) if text is not None else None)
    n = r.get(["network", "buses"], kind=int)
    if n < 2:
        r.fail(["network", "buses"], "need at least two buses")
    raw_edges = r.get(["network", "edges"])
    if not isinstance(raw_edges, list):
        r.fail(["network", "edges"], "expected a list of bus pairs")
    edges = []
    for k, e in enumerate(raw_edges):
        if not isinstance(e, (list, tuple)) or len(e) != 2:
            r.fail(["network", "edges", k], "edge must be a pair of buses")
        edges.append((r.bus(["network", "edges", k], e[0], n), r.bus(["network", "edges", k], e[1], n)))
    m = len(edges)
    tree = r.get(["network", "tree"], None)
    if tree is not None:
        tree = [int(k) - 1 for k in tree]
    try:
        net = Network.from_susceptance(
            n, edges,
            r.vector(["network", "susceptance"], m),
            r.vector(["network", "voltage"], n, np.ones(n)),
            r.vector(["network", "inertia"], n),
            r.vector(["network", "damping"], n),
            tree_edges=tree,
            omega_base=r.get(["network", "omega_base"], 1.0, float),
        )
    except ValueError as err:
        r.fail(["network"], str(err))
    P_d = mw_to_pu(r.vector(["network", "loads_mw"], n))

    try:
        costs = CostProfile.quadratic(r.vector(["costs", "q"], n), r.vector(["costs", "c"], n))
    except ValueError as err:
        r.fail(["costs"], str(err))

    g = r.get(["gains"], {})
    try:
        gains = Gains(
            np.broadcast_to(r.vector(["gains", "tau_b"], n, np.ones(n)), (n,)),
            np.broadcast_to(r.vector(["gains", "tau_g"], n, np.ones(n)), (n,)),
            float(g.get("tau_lam", 1.0)),
            float(g.get("rho", 300.0)),
            float(g.get("sigma", 300.0)),
        )
    except ValueError as err:
        r.fail(["gains"], str(err))

    events = []
    for k, ev in enumerate(r.get(["events"], []) or []):
        path = ["events", k]
        if not isinstance(ev, dict) or "time" not in ev:
            r.fail(path, "event needs a time")
        loads = {r.bus(path + ["loads_mw"], b, n): float(v) / BASE_MVA
                 for b, v in (ev.get("loads_mw") or {}).items()}
        cchg = {}
        for b, qc in (ev.get("costs") or {}).items():
            try:
                cchg[r.bus(path + ["costs"], b, n)] = QuadraticCost(float(qc["q"]), float(qc["c"]))
            except (KeyError, TypeError, ValueError) as err:
                r.fail(path + ["costs"], f"bad cost for bus {b}: {err}")
        events.append(Event(float(ev["time"]), loads, cchg))

    t_end = r.get(["run", "t_end"], 10.0, float)
    initial = None
    mode = r.get(["run", "initial"], "equilibrium")
    if isinstance(mode, dict):
        sl = ["run", "initial"]
        initial = SystemState(
            r.vector(sl + ["phi"], n - 1, np.zeros(n - 1)),
            r.vector(sl + ["omega"], n, np.zeros(n)),
            r.vector(sl + ["b"], n),
            mw_to_pu(r.vector(sl + ["P_g_mw"], n)),
            r.get(sl + ["lam"], kind=float),
        )
        if np.any(initial.b < 0) or np.any(initial.P_g < 0):
            r.fail(sl, "initial bids and setpoints must be nonnegative")
    elif mode != "equilibrium":
        r.fail(["run", "initial"], "expected 'equilibrium' or an explicit state")
    try:
        return Scenario(
            str(data.get("name", name)), net, costs, P_d, gains, EventSchedule(events), t_end,
            r.get(["run", "dt"], 5e-4, float), r.get(["run", "stride"], 20, int), initial,
            str(data.get("description", "")),
        )
    except ValueError as err:
        path = ["events"] if "event" in str(err) else ["run"]
        r.fail(path, str(err))


def load_scenario(source: Union[str, Path]) -> Scenario:
    """Load a scenario from a built-in name or a YAML file path."""
    key = str(source)
    if key in BUILTIN:
        return scenario_from_dict(BUILTIN[key](), key)
    path = Path(source)
    if not path.exists():
        raise ScenarioError(f"no built-in scenario or file named {key!r}")
    return parse_scenario(path.read_text(), path.stem)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ScenarioError(f"cannot parse scenario: {err}") from None
    return scenario_from_dict(data, name, text)


def scenario_to_dict(sc: Scenario) -> dict:
    net = sc.network
    n = net.n
    # gamma is stored; write it back as susceptance with unit voltages
    data = {
        "name": sc.name,
        "description": sc.description,
        "network": {
            "buses": n,
            "edges": [[i + 1, j + 1] for i, j in net.edges],
            "susceptance": net.gamma.tolist(),
            "voltage": [1.0] * n,
            "inertia": net.inertia.tolist(),
            "damping": net.damping.tolist(),
            "omega_base": net.omega_base,
            "tree": [k + 1 for k in net.tree_edges],
            "loads_mw": pu_to_mw(sc.P_d).tolist(),
        },
        "costs": {"q": sc.costs.q.tolist(), "c": sc.costs.c.tolist()},
        "gains": {
            "tau_b": sc.gains.tau_b.tolist(),
            "tau_g": sc.gains.tau_g.tolist(),
            "tau_lam": sc.gains.tau_lam,
            "rho": sc.gains.rho,
            "sigma": sc.gains.sigma,
        },
        "events": [],
        "run": {"t_end": sc.t_end, "dt": sc.dt, "stride": sc.stride, "initial": "equilibrium"},
    }
    for e in sc.events:
        ev: dict[str, Any] = {"time": e.time}
        if e.loads:
            ev["loads_mw"] = {i + 1: float(v * BASE_MVA) for i, v in e.loads.items()}
        if e.costs:
            ev["costs"] = {i + 1: {"q": cst.q, "c": cst.c} for i, cst in e.costs.items()}
        data["events"].append(ev)
    if sc.initial is not None:
        s = sc.initial
        data["run"]["initial"] = {
            "phi": s.phi.tolist(), "omega": s.omega.tolist(), "b": s.b.tolist(),
            "P_g_mw": pu_to_mw(s.P_g).tolist(), "lam": s.lam,
        }
    return data


def dump_scenario(source: Union[str, Scenario]) -> str:
    """YAML text of a scenario; built-in names dump their source form."""
    if isinstance(source, str):
        if source not in BUILTIN:
            raise ScenarioError(f"unknown built-in scenario {source!r}")
        data = BUILTIN[source]()
    else:
        data = scenario_to_dict(source)
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100)


# --- dispatch ------------------------------------------------------------------

@dataclass
class SegmentDispatch:
    t0: float
    t1: float
    solution: DispatchSolution
    cost: float

    def as_dict(self) -> dict:
        return {
            "t0": self.t0,
            "t1": self.t1,
            "P_g_mw": pu_to_mw(self.solution.P_star).tolist(),
            "lambda": self.solution.lambda_star,
            "cost_per_hour": self.cost,
            "active_buses": [int(i) + 1 for i in np.flatnonzero(self.solution.active)],
        }


def dispatch(scenario: Scenario) -> list[SegmentDispatch]:
    """Economic dispatch for every event segment of ``scenario``."""
    out = []
    for t0, t1, costs, P_d in scenario.segments():
        sol = solve_economic_dispatch(costs, P_d)
        out.append(SegmentDispatch(t0, t1, sol, cost_per_hour(costs, sol.P_star)))
    return out


# --- trajectory files ------------------------------------------------------------

def trajectory_header(n: int) -> list[str]:
    cols = ["time"]
    cols += [f"omega_{i}" for i in range(1, n + 1)]
    cols += [f"b_{i}" for i in range(1, n + 1)]
    cols += [f"P_g_{i}_mw" for i in range(1, n + 1)]
    cols += ["lambda", "V"]
    cols += [f"phi_{k}" for k in range(1, n)]
    return cols


def write_trajectory(path: Path, traj: Trajectory, V: np.ndarray) -> None:
    n = traj.n
    sl = state_slices(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(n))
        for k, t in enumerate(traj.times):
            x = traj.states[k]
            row = np.concatenate([[t], x[sl["omega"]], x[sl["b"]], pu_to_mw(x[sl["P_g"]]),
                                  [x[-1], V[k]], x[sl["phi"]]])
            w.writerow([repr(float(v)) for v in row])


@dataclass
class LoadedTrajectory:
    times: np.ndarray
    omega: np.ndarray
    b: np.ndarray
    P_g: np.ndarray  # per-unit
    lam: np.ndarray
    V: np.ndarray
    phi: np.ndarray

    @property
    def n(self) -> int:
        return self.omega.shape[1]

    def state(self, k: int) -> SystemState:
        return SystemState(self.phi[k].copy(), self.omega[k].copy(), self.b[k].copy(),
                           self.P_g[k].copy(), float(self.lam[k]))


def read_trajectory(path: Union[str, Path]) -> LoadedTrajectory:
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    n = sum(1 for h in header if h.startswith("omega_"))
    if n < 2 or header != trajectory_header(n):
        raise ScenarioError(f"{path}: unexpected trajectory header")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    o = 1
    cols = {}
    for key, width in (("omega", n), ("b", n), ("P_g", n), ("lam", 1), ("V", 1), ("phi", n - 1)):
        cols[key] = data[:, o:o + width]
        o += width
    return LoadedTrajectory(data[:, 0], cols["omega"], cols["b"], mw_to_pu(cols["P_g"]),
                            cols["lam"][:, 0], cols["V"][:, 0], cols["phi"])


# --- run and check -----------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SegmentResult:
    t0: float
    t1: float
    P_g_mw: list[float]
    lam: float
    cost: float
    optimum_mw: list[float]
    lambda_star: float
    optimum_cost: float
    max_omega: float
    restoration_time: Optional[float]
    lyapunov_descent: Optional[bool]
    lyapunov_max_increase: Optional[float]
    lyapunov_decrease: Optional[float]
    efficiency: dict
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "checks"}
        d["checks"] = [c.__dict__ for c in self.checks]
        d["passed"] = self.passed
        return d


@dataclass
class RunSummary:
    scenario: str
    dt: float
    sigma: float
    t_final: float
    steps: int
    min_b: float
    min_P_g: float
    segments: list[SegmentResult]
    checks: list[Check] = field(default_factory=list)
    trajectory_path: Optional[str] = None
    summary_path: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and all(s.passed for s in self.segments)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "dt": self.dt,
            "sigma": self.sigma,
            "t_final": self.t_final,
            "steps": self.steps,
            "min_b": self.min_b,
            "min_P_g": self.min_P_g,
            "passed": self.passed,
            "checks": [c.__dict__ for c in self.checks],
            "segments": [s.as_dict() for s in self.segments],
            "trajectory_path": self.trajectory_path,
            "summary_path": self.summary_path,
        }

    def to_text(self) -> str:
        lines = [f"scenario: {self.scenario}", f"dt: {self.dt:g}  sigma: {self.sigma:g}  "
                 f"t_final: {self.t_final:g}  steps: {self.steps}",
                 f"min b: {self.min_b:.3g}  min P_g: {self.min_P_g:.3g}", ""]
        lines.append(f"{'t-range':>13}  {'lambda':>9}  {'cost $/h':>9}  {'max|w|':>9}  "
                     f"{'eff':>4}  {'flow res':>8}  P_g (MW)")
        for s in self.segments:
            lines.append(
                f"{s.t0:5.1f}-{s.t1:5.1f} s  {s.lam:9.4f}  {s.cost:9.1f}  {s.max_omega:9.2e}  "
                f"{'pass' if s.efficiency.get('passed') else 'FAIL':>4}  "
                f"{s.efficiency.get('network', {}).get('flow_balance', float('nan')):8.1e}  "
                + " ".join(f"{p:.2f}" for p in s.P_g_mw if abs(p) > 1e-6)
            )
        lines.append("")
        for k, s in enumerate(self.segments):
            for c in s.checks:
                lines.append(f"segment {k + 1} {c.name}: {'pass' if c.passed else 'FAIL'}  {c.detail}")
        for c in self.checks:
            lines.append(f"{c.name}: {'pass' if c.passed else 'FAIL'}  {c.detail}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


class _Tracker:
    """Observer for step counts, running minima and frequency restoration."""

    def __init__(self, n: int):
        self.sl = state_slices(n)
        self.steps = 0
        self.min_b = np.inf
        self.min_P = np.inf
        self.last_violation: dict[int, float] = {}
        self.seg_start: dict[int, float] = {}

    def __call__(self, t, x, seg, model):
        self.steps += 1
        self.min_b = min(self.min_b, float(x[self.sl["b"]].min()))
        self.min_P = min(self.min_P, float(x[self.sl["P_g"]].min()))
        self.seg_start.setdefault(seg, t)
        if np.max(np.abs(x[self.sl["omega"]])) >= FREQ_TOL:
            self.last_violation[seg] = t

    def restoration(self, seg) -> float:
        return self.last_violation.get(seg, self.seg_start.get(seg, 0.0)) - self.seg_start.get(seg, 0.0)


def segment_checks(net: Network, costs: CostProfile, P_d, end: SystemState,
                   sol: DispatchSolution) -> tuple[dict, list[Check]]:
    eff = check_equilibrium_efficiency(net, costs, end, P_d)
    checks = []
    w = float(np.max(np.abs(end.omega)))
    checks.append(Check("frequency", w < FREQ_TOL, f"max|omega| = {w:.3g} pu"))
    scale = max(float(np.max(sol.P_star)), 1e-12)
    dev = float(np.max(np.abs(end.P_g - sol.P_star))) / scale
    checks.append(Check("dispatch", dev <= DISPATCH_RTOL, f"max deviation {100 * dev:.3g}% of largest unit"))
    active = sol.P_star > 0
    bid_dev = float(np.max(np.abs(end.b[active] - sol.lambda_star))) / sol.lambda_star
    checks.append(Check("active_bids", bid_dev <= BID_RTOL, f"max |b - lambda*| / lambda* = {bid_dev:.3g}"))
    if (~active).any():
        c = costs.c[~active]
        idle_dev = float(np.max(np.abs(end.b[~active] - c) / np.maximum(c, 1e-12)))
        checks.append(Check("inactive_bids", idle_dev <= INACTIVE_BID_RTOL,
                            f"max |b - c| / c = {idle_dev:.3g}"))
    checks.append(Check("efficiency", eff.passed, ", ".join(eff.failures) or "all residuals below tol"))
    return eff.as_dict(), checks


def _lyapunov_trace(net, gains, refs, traj: Trajectory) -> np.ndarray:
    cache = {k: Lyapunov(net, gains, x_bar) for k, x_bar in refs.items()}
    return np.array([cache[int(s)](x) if int(s) in cache else np.nan
                     for x, s in zip(traj.states, traj.segment_index)])


def run(scenario: Scenario, out_dir: Optional[Union[str, Path]] = None,
        stop_on_convergence: bool = False) -> RunSummary:
    """Simulate ``scenario``, verify every segment and write the output files.

    On integration failure the samples gathered so far are flushed to the
    trajectory file before the error propagates.
    """
    net = scenario.network
    model = ClosedLoop(net, scenario.costs, scenario.P_d, scenario.gains)
    monitor = LyapunovMonitor(scenario.gains)
    tracker = _Tracker(net.n)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.yaml").write_text(dump_scenario(scenario))
    try:
        traj = integrate(model, scenario.initial_state().to_vector(), scenario.events,
                         scenario.t_end, scenario.dt, scenario.stride,
                         observers=[monitor, tracker], stop_on_convergence=stop_on_convergence)
    except IntegrationError as err:
        if out is not None and err.partial is not None and len(err.partial.times):
            write_trajectory(out / "trajectory.csv", err.partial,
                             _lyapunov_trace(net, scenario.gains, monitor.references, err.partial))
            logger.error("integration failed at t=%g; partial trajectory written", err.time)
        raise

    V = _lyapunov_trace(net, scenario.gains, monitor.references, traj)
    reports = monitor.reports()
    segments = []
    seg_defs = scenario.segments()
    for k, (t0, t1, costs, P_d) in enumerate(seg_defs):
        idx = np.flatnonzero(traj.segment_index == k)
        if idx.size == 0:
            break
        end = SystemState.from_vector(traj.states[idx[-1]], net.n)
        sol = solve_economic_dispatch(costs, P_d)
        eff, checks = segment_checks(net, costs, P_d, end, sol)
        rep = reports[k] if k < len(reports) else None
        if rep is not None:
            checks.append(Check("lyapunov_descent", rep.descent,
                                f"max per-step increase {rep.max_increase:.3g}"))
            if rep.values[0] > 0:
                checks.append(Check("lyapunov_decrease", rep.relative_decrease >= 0.5,
                                    f"V fell by {100 * rep.relative_decrease:.4g}%"))
        segments.append(SegmentResult(
            t0, float(traj.times[idx[-1]]), pu_to_mw(end.P_g).tolist(), end.lam,
            cost_per_hour(costs, end.P_g), pu_to_mw(sol.P_star).tolist(), sol.lambda_star,
            cost_per_hour(costs, sol.P_star),
            float(np.max(np.abs(traj.states[idx][:, state_slices(net.n)["omega"]]))),
            tracker.restoration(k),
            rep.descent if rep else None, rep.max_increase if rep else None,
            rep.relative_decrease if rep else None, eff, checks,
        ))
    glob = [Check("nonnegativity", tracker.min_b >= 0 and tracker.min_P >= 0,
                  f"min b = {tracker.min_b:.3g}, min P_g = {tracker.min_P:.3g}")]
    summary = RunSummary(scenario.name, scenario.dt, scenario.gains.sigma, float(traj.times[-1]),
                         tracker.steps, tracker.min_b, tracker.min_P, segments, glob)
    if out is not None:
        tpath, spath = out / "trajectory.csv", out / "summary.txt"
        write_trajectory(tpath, traj, V)
        summary.trajectory_path, summary.summary_path = str(tpath), str(spath)
        spath.write_text(summary.to_text())
        (out / "summary.json").write_text(json.dumps(summary.as_dict(), indent=2))
    return summary


def segment_labels(times: np.ndarray, event_times: Sequence[float]) -> np.ndarray:
    """Segment index of each trajectory row.

    The state at an event instant is written twice: once closing the old
    segment and once opening the new one.
    """
    labels = np.empty(len(times), dtype=int)
    seg, prev = 0, None
    for k, t in enumerate(times):
        while seg < len(event_times) and (t > event_times[seg] or (t == event_times[seg] and prev == t)):
            seg += 1
        labels[k] = seg
        prev = t
    return labels


@dataclass
class CheckReport:
    trajectory: str
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [f"{c.name}: {'pass' if c.passed else 'FAIL'}  {c.detail}" for c in self.checks]
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def check(trajectory: Union[str, Path], scenario: Optional[Union[str, Path, Scenario]] = None,
          slack: float = 1e-6) -> CheckReport:
    """Re-run the analysis on a saved trajectory.

    The scenario defaults to ``scenario.yaml`` next to the trajectory file.
    Lyapunov increments are checked between recorded samples, not per step.
    """
    path = Path(trajectory)
    if scenario is None:
        scenario = path.with_name("scenario.yaml")
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    tr = read_trajectory(path)
    if tr.n != sc.network.n:
        raise ScenarioError("trajectory and scenario have different bus counts")
    checks = [Check("nonnegativity", bool(tr.b.min() >= 0 and tr.P_g.min() >= 0),
                    f"min b = {tr.b.min():.3g}, min P_g = {tr.P_g.min():.3g}")]
    labels = segment_labels(tr.times, [t0 for t0, *_ in sc.segments()[1:]])
    for k, (t0, t1, costs, P_d) in enumerate(sc.segments()):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            checks.append(Check(f"segment {k + 1}", False, "no samples"))
            continue
        sol = solve_economic_dispatch(costs, P_d)
        _, seg_checks = segment_checks(sc.network, costs, P_d, tr.state(idx[-1]), sol)
        v = tr.V[idx]
        if v.size > 1:
            inc = float(max(np.max(np.diff(v)), 0.0))
            seg_checks.append(Check("lyapunov_descent", inc <= slack, f"max sampled increase {inc:.3g}"))
        for c in seg_checks:
            checks.append(Check(f"segment {k + 1} {c.name}", c.passed, c.detail))
    return CheckReport(str(path), checks)
