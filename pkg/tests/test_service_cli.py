import json
import warnings
from pathlib import Path

import pytest
import yaml

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from marketgrid import cli
from marketgrid.service import app

TOY = Path(__file__).parent / "data" / "toy3.yaml"


def short_toy(tmp_path, **run):
    data = yaml.safe_load(TOY.read_text())
    data["run"].update(run)
    path = tmp_path / "short.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def client():
    return TestClient(app, raise_server_exceptions=False)


def test_health(client):
    assert client.get("/health").json()["status"] == "ok"


def test_list_and_dump(client):
    assert client.get("/scenarios").json()["scenarios"] == ["ieee14-sigma0", "ieee14-sigma300"]
    text = client.get("/scenarios/ieee14-sigma300").json()["yaml"]
    assert yaml.safe_load(text)["gains"]["sigma"] == 300.0
    assert client.get("/scenarios/nope").status_code == 404


def test_dispatch_by_name(client):
    res = client.post("/dispatch", json={"scenario": "ieee14-sigma300"}).json()
    assert len(res["segments"]) == 3
    first = res["segments"][0]
    assert first["active_buses"] == [1, 2]
    assert first["P_g_mw"][0] == pytest.approx(202.96, abs=0.01)
    assert "lambda" in first


def test_dispatch_inline_yaml(client):
    res = client.post("/dispatch", json={"yaml": TOY.read_text()})
    assert res.status_code == 200
    assert res.json()["segments"][0]["P_g_mw"][:2] == pytest.approx([123.33, 36.67], abs=0.01)


@pytest.mark.parametrize("body", [{}, {"scenario": "ieee14-sigma0", "yaml": "x: 1"}])
def test_scenario_ref_needs_exactly_one_source(client, body):
    assert client.post("/dispatch", json=body).status_code == 422


def test_invalid_scenario_is_422(client):
    res = client.post("/dispatch", json={"yaml": "network: {buses: 1}"})
    assert res.status_code == 422
    assert "network" in res.json()["detail"]


def test_run_validation(client):
    assert client.post("/runs", json={"scenario": "ieee14-sigma0", "dt": -1.0}).status_code == 422
    assert client.post("/runs", json={"scenario": "ieee14-sigma0", "sigma": -1.0}).status_code == 422


def test_run_and_check_endpoints(client, tmp_path):
    body = {"yaml": short_toy(tmp_path, t_end=6.0).read_text(), "out_dir": str(tmp_path / "o")}
    res = client.post("/runs", json=body).json()
    assert res["passed"] is False and "overall: FAIL" in res["text"]
    assert Path(res["trajectory_path"]).exists()
    chk = client.post("/check", json={"trajectory": res["trajectory_path"]}).json()
    assert chk["passed"] is False and chk["checks"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_integration_error_is_500(client, tmp_path):
    path = short_toy(tmp_path, dt=5.0, t_end=1e5, stride=1,
                     initial={"omega": [0.1, 0.1, 0.1], "b": [3.5, 3.5, 10.0],
                              "P_g_mw": [123.3, 36.7, 0], "lam": 3.5})
    data = yaml.safe_load(path.read_text())
    data["gains"]["rho"] = 300.0
    res = client.post("/runs", json={"yaml": yaml.safe_dump(data)})
    assert res.status_code == 500 and res.json()["time"] > 0


def test_check_missing_file_is_422(client, tmp_path):
    assert client.post("/check", json={"trajectory": str(tmp_path / "none.csv")}).status_code == 422


# --- CLI ------------------------------------------------------------------------

def test_cli_scenarios(capsys, tmp_path):
    assert cli.main(["scenarios", "list"]) == 0
    assert capsys.readouterr().out.split() == ["ieee14-sigma0", "ieee14-sigma300"]
    out = tmp_path / "case.yaml"
    assert cli.main(["scenarios", "dump", "ieee14-sigma0", "-o", str(out)]) == 0
    assert yaml.safe_load(out.read_text())["gains"]["sigma"] == 0.0
    assert cli.main(["scenarios", "dump", "nope"]) == cli.EXIT_USAGE


def test_cli_dispatch(capsys):
    assert cli.main(["dispatch", str(TOY)]) == 0
    assert "lambda=3.4667" in capsys.readouterr().out
    assert cli.main(["--json", "dispatch", "ieee14-sigma300"]) == 0
    assert len(json.loads(capsys.readouterr().out)["segments"]) == 3


def test_cli_run_strict_and_check(capsys, tmp_path):
    good = tmp_path / "good"
    assert cli.main(["run", str(TOY), "--out", str(good), "--strict"]) == 0
    assert "overall: pass" in capsys.readouterr().out
    assert cli.main(["check", str(good / "trajectory.csv"), "--strict"]) == 0

    short = short_toy(tmp_path, t_end=6.0)
    bad = tmp_path / "bad"
    assert cli.main(["run", str(short), "--out", str(bad)]) == 0
    assert cli.main(["run", str(short), "--out", str(bad), "--strict"]) == cli.EXIT_CHECK_FAILED
    assert cli.main(["check", str(bad / "trajectory.csv"), "--strict"]) == cli.EXIT_CHECK_FAILED
    assert cli.main(["check", str(bad / "trajectory.csv"), "--scenario", str(TOY)]) == 0


def test_cli_run_overrides(capsys, tmp_path):
    short = short_toy(tmp_path, t_end=6.0)
    assert cli.main(["--json", "run", str(short), "--dt", "2e-3", "--sigma", "0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["dt"] == 2e-3 and res["sigma"] == 0.0


def test_cli_errors(capsys):
    assert cli.main(["dispatch", "no-such-scenario"]) == cli.EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
