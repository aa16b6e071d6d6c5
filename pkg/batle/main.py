import logging
import os
import time
from pathlib import Path
from typing import Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException, Request
from starlette.middleware.base import BaseHTTPMiddleware

from batle.errors import BatleError
from batle.models import AipwRequest, AipwResponse, AteRequest, AteResponse, HealthResponse
from batle.services.baselines import aipw_estimate
from batle.services.estimation import estimate_from_params
from batle.services.network import Parameters, load_checkpoint
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

SERVICE_NAME = "Batle ATE Service"
DEFAULT_MC_PASSES = 30

app = FastAPI(
    title=SERVICE_NAME,
    description="Average treatment effect estimation from a trained checkpoint, plus an AIPW baseline",
    version="1.0.0",
)


class TimingMiddleware(BaseHTTPMiddleware):
    """Logs every request with its status and stamps the elapsed time on the response."""

    async def dispatch(self, request: Request, call_next):
        started = time.perf_counter()
        response = await call_next(request)
        elapsed_ms = (time.perf_counter() - started) * 1000
        response.headers["X-Response-Time"] = f"{elapsed_ms:.2f}ms"
        log = logger.warning if response.status_code >= 500 else logger.info
        log("%s %s -> %d (%.2fms)", request.method, request.url.path, response.status_code, elapsed_ms)
        return response


app.add_middleware(TimingMiddleware)


class ModelStore:
    """The checkpoint currently served."""

    def __init__(self):
        self.params: Optional[Parameters] = None
        self.path: Optional[Path] = None

    def load(self, path: Path) -> Parameters:
        self.params = load_checkpoint(path)
        self.path = path
        return self.params


store = ModelStore()


def checkpoint_from_env() -> Optional[Path]:
    value = os.environ.get("BATLE_CHECKPOINT")
    return Path(value) if value else None


def default_passes() -> int:
    return int(os.environ.get("BATLE_MC_PASSES", DEFAULT_MC_PASSES))


def _matrix(rows) -> np.ndarray:
    try:
        matrix = np.asarray(rows, dtype=np.float64)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=f"covariates must be a rectangular matrix: {e}")
    if matrix.ndim != 2:
        raise HTTPException(status_code=422, detail="covariates must be a rectangular matrix")
    return matrix


@app.on_event("startup")
async def startup_event():
    """Load the checkpoint named by BATLE_CHECKPOINT, if any."""
    path = checkpoint_from_env()
    if path is None:
        logger.info("BATLE_CHECKPOINT not set; /ate is unavailable until /reload")
        return
    try:
        store.load(path)
        logger.info("Loaded checkpoint %s on startup", path)
    except BatleError as e:
        logger.warning("Failed to load checkpoint %s on startup: %s", path, e)


@app.get("/", response_model=HealthResponse)
async def root():
    """Health check endpoint."""
    params = store.params
    return HealthResponse(
        status="ok",
        service=SERVICE_NAME,
        checkpoint_loaded=params is not None,
        checkpoint=None if store.path is None else str(store.path),
        network=None if params is None else params.config.model_dump(),
    )


@app.post("/reload")
async def reload():
    """Re-read the checkpoint named by BATLE_CHECKPOINT."""
    path = checkpoint_from_env()
    if path is None:
        raise HTTPException(status_code=503, detail="BATLE_CHECKPOINT is not set")
    try:
        params = store.load(path)
    except BatleError as e:
        raise HTTPException(status_code=500, detail=f"Reload failed: {e}")
    return {"status": "success", "message": f"Loaded {len(params.arrays)} arrays from {path}"}


@app.post("/ate", response_model=AteResponse)
async def ate(body: AteRequest):
    """
    MC-dropout ATE over the posted target-domain covariates.

    Returns 503 when no checkpoint is loaded and 422 when the covariates do not
    fit the network.
    """
    if store.params is None:
        raise HTTPException(status_code=503, detail="No checkpoint loaded")
    covariates = _matrix(body.covariates)
    passes = body.passes or default_passes()
    # point-head checkpoints predict with dropout off
    rng = None if store.params.config.point_outcomes else RngStream(body.seed)
    try:
        estimate = estimate_from_params(store.params, covariates, passes=passes, rng=rng)
    except BatleError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return AteResponse(**estimate.summary())


@app.post("/aipw", response_model=AipwResponse)
async def aipw(body: AipwRequest):
    """Cross-fitted AIPW estimate on posted (X, T, Y)."""
    covariates = _matrix(body.covariates)
    try:
        estimate = aipw_estimate(
            covariates,
            np.asarray(body.treatments),
            np.asarray(body.outcomes),
            folds=body.folds,
            rng=RngStream(body.seed),
        )
    except BatleError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return AipwResponse(tau_hat=estimate.tau_hat, n=estimate.n, folds=body.folds)


if __name__ == "__main__":
    uvicorn.run(app, host="0.0.0.0", port=8000)
