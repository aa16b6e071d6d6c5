import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from batle.config import MAX_SEED


class RunRecord(BaseModel):
    """One (dataset replication, model repetition, method, ratio) estimate."""
    dataset_rep: int = Field(..., ge=0)
    model_rep: int = Field(..., ge=0)
    method: str
    r: float
    tau_true: float
    tau_hat: float
    mae: float
    wall_time_s: Optional[float] = None
    seed: int = Field(..., ge=0, lt=MAX_SEED)
    status: str = "ok"

    @model_validator(mode="after")
    def check_mae(self) -> "RunRecord":
        if not self.ok or not math.isfinite(self.tau_true):
            return self
        if not math.isclose(self.mae, abs(self.tau_hat - self.tau_true), rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("mae must equal |tau_hat - tau_true|")
        return self

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class AggregateRow(BaseModel):
    """Mean MAE and confidence interval of one (method, ratio) cell."""
    method: str
    r: float
    B: int = Field(..., ge=0)
    mean_mae: float
    ci_low: float
    ci_high: float


class AteRequest(BaseModel):
    """Request body for the /ate endpoint."""
    covariates: List[List[float]] = Field(..., min_length=1, description="Target-domain covariate rows")
    passes: Optional[int] = Field(None, ge=1, le=1000, description="MC-dropout passes (default from BATLE_MC_PASSES)")
    seed: int = Field(0, ge=0, lt=MAX_SEED)


class AteResponse(BaseModel):
    tau_hat: float
    n: int
    mc_passes: int
    mean_sd0: Optional[float] = None
    mean_sd1: Optional[float] = None


class AipwRequest(BaseModel):
    """Request body for the /aipw endpoint."""
    covariates: List[List[float]] = Field(..., min_length=1)
    treatments: List[float]
    outcomes: List[float]
    folds: int = Field(2, ge=2, le=20)
    seed: int = Field(0, ge=0, lt=MAX_SEED)

    @field_validator("treatments")
    @classmethod
    def binary_treatments(cls, value: List[float]) -> List[float]:
        bad = sorted({t for t in value if t not in (0.0, 1.0)})
        if bad:
            raise ValueError(f"treatments must be 0 or 1, found {bad[:5]}")
        return value

    @model_validator(mode="after")
    def check_lengths(self) -> "AipwRequest":
        n = len(self.covariates)
        if len(self.treatments) != n or len(self.outcomes) != n:
            raise ValueError(f"covariates, treatments and outcomes must have the same length ({n})")
        return self


class AipwResponse(BaseModel):
    tau_hat: float
    n: int
    folds: int


class HealthResponse(BaseModel):
    status: str
    service: str
    checkpoint_loaded: bool
    checkpoint: Optional[str] = None
    network: Optional[Dict] = None
