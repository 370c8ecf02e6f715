"""Frequency-coupled electricity market dynamics.

Economic dispatch, the bidding game between generators and the system
operator, and the closed-loop market/swing-equation dynamics, together with
Lyapunov and efficiency checks for simulated trajectories.
"""
from .analysis import (
    EfficiencyReport,
    Lyapunov,
    LyapunovMonitor,
    LyapunovReport,
    check_equilibrium_efficiency,
    descent_condition_sample,
    lyapunov_value,
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
    closed_loop_field,
    dispatch_equilibrium,
    find_synchronous_equilibrium,
    integrate,
    simulate,
    simulate_swing,
    step,
)
from .market import (
    BidProfile,
    DispatchSolution,
    deviation_payoff,
    efficient_nash_interval,
    payoff,
    solve_economic_dispatch,
    solve_iso_lp,
    verify_efficient_bid,
)
from .network import Network, security_constraint_holds, swing_field_delta, swing_field_phi

__version__ = "0.1.0"
