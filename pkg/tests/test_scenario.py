from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from marketgrid.scenario import (
    ScenarioError,
    builtin_names,
    check,
    cost_per_hour,
    dispatch,
    dump_scenario,
    load_scenario,
    mw_to_pu,
    parse_scenario,
    pu_to_mw,
    read_trajectory,
    run,
    scenario_to_dict,
    segment_labels,
)

TOY = Path(__file__).parent / "data" / "toy3.yaml"


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return run(load_scenario(TOY), out), out


def toy_text(**changes):
    data = yaml.safe_load(TOY.read_text())
    for path, value in changes.items():
        node = data
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return yaml.safe_dump(data, sort_keys=False)


def test_builtin_names():
    assert builtin_names() == ["ieee14-sigma0", "ieee14-sigma300"]


def test_ieee14_loads_and_schedule(ieee14):
    np.testing.assert_allclose(pu_to_mw(ieee14.P_d),
                               [0, 22, 80, 48, 7.6, 11, 0, 0, 30, 9.0, 3.5, 6.1, 14, 15])
    segs = ieee14.segments()
    assert [s[0] for s in segs] == [0.0, 1.0, 15.0]
    assert pu_to_mw(segs[1][3])[2] == pytest.approx(94.2)
    assert segs[2][2][2].q == 60 and segs[2][2][2].c == 38
    assert load_scenario("ieee14-sigma0").gains.sigma == 0.0


def test_mw_round_trip():
    x = np.array([0.0, 22.0, 94.2, 260.4])
    np.testing.assert_allclose(pu_to_mw(mw_to_pu(x)), x, rtol=1e-15)


def test_stage_costs(ieee14):
    costs = [d.cost for d in dispatch(ieee14)]
    assert costs[1] == pytest.approx(9711, rel=0.02)
    assert costs[2] == pytest.approx(8540, rel=0.02)
    assert cost_per_hour(ieee14.costs, np.zeros(14)) == 0.0


def test_dispatch_as_dict(ieee14):
    d = dispatch(ieee14)[0].as_dict()
    assert set(d) == {"t0", "t1", "P_g_mw", "lambda", "cost_per_hour", "active_buses"}
    assert d["active_buses"] == [1, 2]
    assert sum(d["P_g_mw"]) == pytest.approx(246.2)


@pytest.mark.parametrize("name", ["ieee14-sigma300", "ieee14-sigma0"])
def test_builtin_dump_round_trip(name):
    a = load_scenario(name)
    b = parse_scenario(dump_scenario(name), name)
    c = parse_scenario(dump_scenario(a), name)
    for other in (b, c):
        np.testing.assert_allclose(other.network.gamma, a.network.gamma, rtol=1e-14)
        np.testing.assert_allclose(other.P_d, a.P_d, rtol=1e-14)
        assert other.network.tree_edges == a.network.tree_edges
        assert other.gains.sigma == a.gains.sigma
        assert [e.time for e in other.events] == [e.time for e in a.events]
        assert [s[2].q.tolist() for s in other.segments()] == [s[2].q.tolist() for s in a.segments()]


def test_explicit_initial_state_round_trip():
    text = toy_text(run__initial={"phi": [0.1, 0.0], "omega": [0.0, 0.01, 0.0],
                                  "b": [4.0, 4.0, 10.0], "P_g_mw": [120, 40, 0], "lam": 4.0})
    sc = parse_scenario(text)
    assert sc.initial_state().P_g == pytest.approx([1.2, 0.4, 0.0])
    again = parse_scenario(yaml.safe_dump(scenario_to_dict(sc)))
    np.testing.assert_allclose(again.initial.to_vector(), sc.initial.to_vector())


@pytest.mark.parametrize("changes, match", [
    (dict(network__buses=1), r"network\.buses: need at least two buses \(line 4\)"),
    (dict(costs__q=[1.0, 2.0]), r"costs\.q: expected 3 entries, got 2 \(line \d+\)"),
    (dict(network__edges=[[1, 2], [2, 7]]), r"bus 7 does not exist"),
    (dict(network__inertia=[1.0, -1.0, 1.0]), r"network: .*inertia"),
    (dict(costs__c=[1.0, -2.0, 0.0]), r"costs: "),
    (dict(gains__sigma=-1.0), r"gains: "),
    (dict(events=[{"time": 50.0}]), r"events: .*outside"),
    (dict(events=[{"loads_mw": {1: 5}}]), r"events\.0: event needs a time"),
    (dict(run__initial="cold"), r"run\.initial"),
])
def test_validation_errors(changes, match):
    with pytest.raises(ScenarioError, match=match):
        parse_scenario(toy_text(**changes))


def test_missing_field_reports_path():
    data = yaml.safe_load(TOY.read_text())
    del data["network"]["damping"]
    with pytest.raises(ScenarioError, match="network.damping: missing"):
        parse_scenario(yaml.safe_dump(data))


def test_bad_yaml_and_unknown_source(tmp_path):
    with pytest.raises(ScenarioError, match="cannot parse"):
        parse_scenario("network: [unclosed")
    with pytest.raises(ScenarioError, match="no built-in"):
        load_scenario(tmp_path / "absent.yaml")
    with pytest.raises(ScenarioError):
        dump_scenario("nope")


def test_overrides():
    sc = load_scenario(TOY).with_overrides(dt=2e-3, sigma=0.0)
    assert sc.dt == 2e-3 and sc.gains.sigma == 0.0
    with pytest.raises(ScenarioError):
        sc.with_overrides(dt=0.0)


def test_toy_run_passes(toy_run):
    summary, out = toy_run
    assert summary.passed, summary.to_text()
    assert {p.name for p in out.iterdir()} == {"scenario.yaml", "trajectory.csv", "summary.txt", "summary.json"}
    assert summary.min_b >= 0 and summary.min_P_g >= 0
    assert len(summary.segments) == 2
    assert summary.segments[0].restoration_time == 0.0
    assert "overall: pass" in (out / "summary.txt").read_text()


def test_trajectory_file(toy_run):
    summary, out = toy_run
    tr = read_trajectory(out / "trajectory.csv")
    assert tr.n == 3 and tr.times[0] == 0.0 and tr.times[-1] == pytest.approx(25.0)
    # equilibrium start without a disturbance: V is zero until the event
    assert np.all(np.abs(tr.V[tr.times < 5.0]) < 1e-12)
    last = tr.state(len(tr.times) - 1)
    assert pu_to_mw(last.P_g).sum() == pytest.approx(180.0, abs=1e-3)


def test_check_agrees_with_run(toy_run):
    _, out = toy_run
    rep = check(out / "trajectory.csv")
    assert rep.passed, rep.to_text()
    assert any(c.name == "segment 2 lyapunov_descent" for c in rep.checks)


def test_check_detects_tampering(toy_run, tmp_path):
    _, out = toy_run
    lines = (out / "trajectory.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = lines[-1].split(",")
    row[header.index("b_1")] = "-1.0"
    (tmp_path / "trajectory.csv").write_text("\n".join(lines[:-1] + [",".join(row)]) + "\n")
    rep = check(tmp_path / "trajectory.csv", TOY)
    assert not rep.passed
    assert not next(c for c in rep.checks if c.name == "nonnegativity").passed


def test_check_rejects_mismatched_scenario(toy_run):
    _, out = toy_run
    with pytest.raises(ScenarioError, match="bus counts"):
        check(out / "trajectory.csv", "ieee14-sigma300")


def test_short_horizon_fails_checks(tmp_path):
    sc = parse_scenario(toy_text(run__t_end=6.0))
    summary = run(sc, tmp_path)
    assert not summary.passed
    assert "overall: FAIL" in summary.to_text()


def test_run_is_deterministic(tmp_path):
    sc = parse_scenario(toy_text(run__t_end=6.0))
    run(sc, tmp_path / "a")
    run(sc, tmp_path / "b")
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_integration_failure_flushes_partial(tmp_path):
    from marketgrid.dynamics import IntegrationError

    sc = parse_scenario(toy_text(run__dt=5.0, run__t_end=1e5, run__stride=1, gains__rho=300.0,
                                 run__initial={"omega": [0.1, 0.1, 0.1], "b": [3.5, 3.5, 10.0],
                                               "P_g_mw": [123.3, 36.7, 0], "lam": 3.5}))
    with np.errstate(all="ignore"), pytest.raises(IntegrationError):
        run(sc, tmp_path)
    assert len(read_trajectory(tmp_path / "trajectory.csv").times) > 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=4, unique=True), st.integers(1, 5))
def test_segment_labels(event_times, stride):
    ev = sorted(event_times)
    # a sampled grid plus each event instant written twice, as integrate does
    grid = sorted(set(np.round(np.arange(0, 11, 0.5 * stride), 6)) - set(ev))
    times = np.array(sorted(grid + ev + ev))
    labels = segment_labels(times, ev)
    assert np.all(np.diff(labels) >= 0)
    for k, t in enumerate(ev):
        i = np.flatnonzero(times == t)
        assert labels[i[0]] == k and labels[i[1]] == k + 1
