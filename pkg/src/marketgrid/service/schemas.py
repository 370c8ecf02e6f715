"""Request and response models of the HTTP API."""
from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field, model_validator


class ScenarioRef(BaseModel):
    """A scenario given by built-in name or file path, or inline as YAML text."""

    scenario: Optional[str] = Field(None, description="built-in name or path to a YAML file")
    yaml: Optional[str] = Field(None, description="scenario file contents")

    @model_validator(mode="after")
    def _one_source(self):
        if (self.scenario is None) == (self.yaml is None):
            raise ValueError("give exactly one of 'scenario' or 'yaml'")
        return self


class ScenarioList(BaseModel):
    scenarios: list[str]


class ScenarioText(BaseModel):
    name: str
    yaml: str


class DispatchRequest(ScenarioRef):
    pass


class SegmentDispatch(BaseModel):
    t0: float
    t1: float
    P_g_mw: list[float]
    lam: float = Field(alias="lambda")
    cost_per_hour: float
    active_buses: list[int]

    model_config = {"populate_by_name": True}


class DispatchResponse(BaseModel):
    scenario: str
    segments: list[SegmentDispatch]


class RunRequest(ScenarioRef):
    out_dir: Optional[str] = None
    dt: Optional[float] = Field(None, gt=0)
    sigma: Optional[float] = Field(None, ge=0)


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class SegmentResult(BaseModel):
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
    checks: list[CheckResult]
    passed: bool


class RunResponse(BaseModel):
    scenario: str
    dt: float
    sigma: float
    t_final: float
    steps: int
    min_b: float
    min_P_g: float
    passed: bool
    checks: list[CheckResult]
    segments: list[SegmentResult]
    trajectory_path: Optional[str] = None
    summary_path: Optional[str] = None
    text: str


class CheckRequest(BaseModel):
    trajectory: str
    scenario: Optional[str] = Field(None, description="defaults to scenario.yaml next to the trajectory")


class CheckResponse(BaseModel):
    trajectory: str
    passed: bool
    checks: list[CheckResult]
    text: str


class ErrorResponse(BaseModel):
    detail: str
    time: Optional[float] = None
