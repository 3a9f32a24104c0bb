from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from app.artifacts import load_fit, prediction_frame, read_diagnostics
from app.config import PredictConfig
from app.errors import ConvergenceError, FadingError, ValidationError
from app.fitting import convergence_gate
from app.logger import TraceLogger
from app.predict import predict_location


app = FastAPI(title="Colour Fading Model API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class PredictRequest(BaseModel):
    run_dir: str
    H: float
    S: float
    I: float
    Sx: float
    Sy: float
    seed: int = 0
    max_resample: int = Field(50, ge=0)
    force: bool = False


def _status(exc: FadingError) -> int:
    if isinstance(exc, ConvergenceError):
        return 409
    return 404 if isinstance(exc, ValidationError) and "not found" in str(exc) else 422


@app.get("/health")
async def health() -> dict:
    return {"status": "ok"}


@app.get("/runs/diagnostics")
async def run_diagnostics(run_dir: str = Query(...)) -> dict:
    try:
        return read_diagnostics(Path(run_dir))
    except FadingError as exc:
        raise HTTPException(status_code=_status(exc), detail=str(exc)) from exc


@app.post("/predict")
def predict(payload: PredictRequest, max_draws: Optional[int] = Query(None, ge=1)) -> dict:
    logger = TraceLogger(record_events=True)
    try:
        fit = load_fit(Path(payload.run_dir))
        convergence_gate(fit.draws, payload.force, logger)
        xstar = fit.standardized.apply(np.array([[payload.H, payload.S, payload.I, payload.Sx, payload.Sy]]))[0]
        series = predict_location(
            xstar,
            fit,
            rng=np.random.default_rng(payload.seed),
            config=PredictConfig(max_resample=payload.max_resample),
            max_draws=max_draws,
        )
    except FadingError as exc:
        logger.log("predict_location_error", message=str(exc))
        raise HTTPException(status_code=_status(exc), detail=str(exc)) from exc
    logger.log("predict_location_result", retained=series.draws.shape[0], rejection_rate=series.rejection_rate)
    return {"series": prediction_frame(series).to_dict(orient="list"), "trace": logger.events()}
