"""HTTP front end over the scenario drivers."""
from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import scenario as sc
from ..dynamics import IntegrationError
from ..market import MarketError
from .schemas import (
    CheckRequest,
    CheckResponse,
    DispatchRequest,
    DispatchResponse,
    ErrorResponse,
    RunRequest,
    RunResponse,
    ScenarioList,
    ScenarioRef,
    ScenarioText,
)

logger = logging.getLogger(__name__)

app = FastAPI(title="marketgrid", version="0.1.0")


@app.exception_handler(sc.ScenarioError)
async def _scenario_error(request: Request, exc: sc.ScenarioError):
    return JSONResponse(status_code=422, content={"detail": str(exc)})


@app.exception_handler(MarketError)
async def _market_error(request: Request, exc: MarketError):
    return JSONResponse(status_code=422, content={"detail": str(exc)})


@app.exception_handler(IntegrationError)
async def _integration_error(request: Request, exc: IntegrationError):
    return JSONResponse(status_code=500, content={"detail": str(exc), "time": exc.time})


def _resolve(ref: ScenarioRef) -> sc.Scenario:
    if ref.yaml is not None:
        return sc.parse_scenario(ref.yaml)
    return sc.load_scenario(ref.scenario)


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.get("/scenarios", response_model=ScenarioList)
def list_scenarios():
    return ScenarioList(scenarios=sc.builtin_names())


@app.get("/scenarios/{name}", response_model=ScenarioText, responses={404: {"model": ErrorResponse}})
def get_scenario(name: str):
    if name not in sc.BUILTIN:
        raise HTTPException(404, f"unknown built-in scenario {name!r}")
    return ScenarioText(name=name, yaml=sc.dump_scenario(name))


@app.post("/dispatch", response_model=DispatchResponse, responses={422: {"model": ErrorResponse}})
def dispatch(req: DispatchRequest):
    scenario = _resolve(req)
    segs = [s.as_dict() for s in sc.dispatch(scenario)]
    return DispatchResponse(scenario=scenario.name, segments=segs)


@app.post("/runs", response_model=RunResponse,
          responses={422: {"model": ErrorResponse}, 500: {"model": ErrorResponse}})
def run(req: RunRequest):
    scenario = _resolve(req).with_overrides(dt=req.dt, sigma=req.sigma)
    summary = sc.run(scenario, req.out_dir)
    return RunResponse(**summary.as_dict(), text=summary.to_text())


@app.post("/check", response_model=CheckResponse,
          responses={404: {"model": ErrorResponse}, 422: {"model": ErrorResponse}})
def check(req: CheckRequest):
    try:
        report = sc.check(req.trajectory, req.scenario)
    except FileNotFoundError as err:
        raise HTTPException(404, str(err)) from None
    return CheckResponse(trajectory=report.trajectory, passed=report.passed,
                         checks=[c.__dict__ for c in report.checks], text=report.to_text())
