"""
HTTP API for consumers.

Looks like the interface of a centralized middleware: consumers list what data
is obtainable and post signed requests; SMC sessions stay invisible. Backed by
a simulated deployment loaded from SMC_SCENARIO.
"""

import logging
import os
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel

from .config import configure_logging
from .datarequest import AggregateKind
from .errors import SmcError
from .scenario import Deployment, Scenario

# Load environment variables from .env file if it exists
load_dotenv()

# Configuration from environment variables
SCENARIO_PATH = os.getenv("SMC_SCENARIO", "scenarios/smoke.json")
API_PORT = int(os.getenv("API_PORT", "8000"))

logger = logging.getLogger(__name__)

STATUS_BY_CODE = {
    "MalformedRequest": 400,
    "AuthFailed": 401,
    "AccessDenied": 403,
    "InsufficientSources": 409,
    "Vetoed": 409,
    "Implausible": 422,
    "SessionFailed": 503,
    "Timeout": 503,
}

deployment: Optional[Deployment] = None


class AggregateResponse(BaseModel):
    """Result returned for a completed request"""
    request_id: str
    aggregate: AggregateKind
    value: float
    contributors: int


def set_deployment(new: Optional[Deployment]) -> None:
    global deployment
    deployment = new


def load_deployment(path: Path) -> Deployment:
    """Build a simulated deployment and let its sources register."""
    dep = Deployment(Scenario.load(path)).build("sim")
    dep.warm_up()
    logger.info(f"deployment from {path} ready with {len(dep.sources)} source(s)")
    return dep


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the deployment on startup unless one was injected"""
    configure_logging()
    if deployment is None:
        set_deployment(load_deployment(Path(SCENARIO_PATH)))
    yield
    logger.info("Shutting down...")


app = FastAPI(
    title="SMC Gateway API",
    description="Aggregate sensor data without any party seeing raw readings",
    version="1.0.0",
    lifespan=lifespan
)


def _require_deployment() -> Deployment:
    if deployment is None:
        raise HTTPException(status_code=503, detail="Deployment not initialized")
    return deployment


def _http_error(error: SmcError) -> HTTPException:
    return HTTPException(status_code=STATUS_BY_CODE.get(error.code, 500), detail=error.to_payload())


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    logger.info("GET /health - Health check called")
    return {
        "status": "healthy" if deployment is not None else "unhealthy",
        "deployment_loaded": deployment is not None,
    }


@app.get("/directory")
async def get_directory(data_type: Optional[str] = None, scope: Optional[str] = None) -> dict[str, Any]:
    """What data is obtainable right now; no source identities."""
    logger.info(f"GET /directory - data_type={data_type}, scope={scope}")
    return _require_deployment().directory(data_type, scope)


@app.post("/requests", response_model=AggregateResponse)
async def post_request(request: Request) -> AggregateResponse:
    """
    Run one signed data request.

    The body must be the canonical DataRequest text exactly as signed; any
    re-serialization would invalidate the tag.
    """
    dep = _require_deployment()
    body = await request.body()
    try:
        text = body.decode("ascii")
    except UnicodeDecodeError:
        raise HTTPException(status_code=400, detail="request text must be ASCII")
    logger.info(f"POST /requests - {len(body)} byte(s)")

    try:
        outcome = dep.submit(text)
        result = outcome.raise_for_error()
    except SmcError as e:
        logger.warning(f"POST /requests - {e.code}: {e.message}")
        raise _http_error(e)
    return AggregateResponse(request_id=outcome.request_id, **result.model_dump())


if __name__ == "__main__":
    import uvicorn
    print(f"Starting SMC gateway API on port {API_PORT}")
    uvicorn.run(app, host="0.0.0.0", port=API_PORT)
