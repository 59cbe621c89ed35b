#!/usr/bin/env python3
"""
FastAPI server for the reachability toolkit
Exposes the certify, validate, volume and simulate commands over HTTP
"""

import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Union

import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from iqcreach.certify import Certificate
from iqcreach.config_loader import ConfigLoader
from iqcreach.errors import ConfigError, IqcReachError
from iqcreach.formatters import certificate_summary, history_frame
from iqcreach.pipeline import ReachabilityPipeline

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"

app = FastAPI(title="iqcreach API", version="0.1.0")

# Certificates computed in this process, keyed by config name
certificates = {}


# Pydantic models for request/response
class ProblemRequest(BaseModel):
    config: Optional[str] = None
    problem: Optional[dict] = None
    seed: Optional[int] = None
    tol: Optional[float] = None


class CertificateRequest(ProblemRequest):
    certificate: Optional[dict] = None


class VolumeRequest(CertificateRequest):
    samples: Optional[int] = None


class SimulateRequest(CertificateRequest):
    x0: List[float]
    perturbation: int = 0
    disturbance: int = 0


class DataResponse(BaseModel):
    success: bool
    data: Optional[Union[dict, List[dict]]] = None
    error: Optional[str] = None


def _finite(value):
    """Replace inf and NaN by None so responses stay valid JSON"""
    if isinstance(value, dict):
        return {key: _finite(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _loader(request):
    if request.problem is not None:
        return ConfigLoader.from_dict(request.problem, source="<request>")
    if request.config is None:
        raise ConfigError("give either a bundled config name or an inline problem")
    path = CONFIG_DIR / f"{request.config}.json"
    if not path.is_file():
        raise ConfigError(f"unknown config '{request.config}'")
    return ConfigLoader.from_path(path)


def _pipeline(request):
    try:
        return ReachabilityPipeline(_loader(request), seed=request.seed, tol=request.tol)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))


def _certificate(request, pipeline):
    if request.certificate is not None:
        try:
            return Certificate.from_dict(request.certificate)
        except (ValueError, KeyError) as e:
            raise HTTPException(status_code=400, detail=f"invalid certificate: {e}")
    if pipeline.name not in certificates:
        raise HTTPException(status_code=404, detail=f"no certificate for '{pipeline.name}'; call /api/certify first")
    return certificates[pipeline.name]


@app.get("/api/configs", response_model=DataResponse)
async def list_configs():
    """Bundled problem configs"""
    rows = []
    for path in sorted(CONFIG_DIR.glob("*.json")):
        try:
            data = json.loads(path.read_text())
            rows.append({"name": path.stem, "description": data.get("description", "")})
        except json.JSONDecodeError as e:
            logger.warning(f"Skipping unreadable config {path}: {e}")
    return DataResponse(success=True, data=rows)


@app.post("/api/certify", response_model=DataResponse)
def certify(request: ProblemRequest):
    """Run the gamma/V alternation and keep the certificate in memory"""
    pipeline = _pipeline(request)
    try:
        result = pipeline.certify()
        certificates[pipeline.name] = result.certificate
        return DataResponse(success=True, data=_finite({
            "summary": certificate_summary(result.certificate, result.timings),
            "history": history_frame(result.certificate, result.timings).to_dict(orient="records"),
            "certificate": result.certificate.to_dict(),
        }))
    except IqcReachError as e:
        return DataResponse(success=False, error=str(e))


@app.post("/api/validate", response_model=DataResponse)
def validate(request: CertificateRequest):
    pipeline = _pipeline(request)
    certificate = _certificate(request, pipeline)
    try:
        result = pipeline.validate(certificate)
        return DataResponse(success=True, data=_finite(json.loads(json.dumps(result.report, default=str))))
    except IqcReachError as e:
        return DataResponse(success=False, error=str(e))


@app.post("/api/volume", response_model=DataResponse)
def volume(request: VolumeRequest):
    pipeline = _pipeline(request)
    certificate = _certificate(request, pipeline)
    try:
        estimate = pipeline.volume(certificate, request.samples)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return DataResponse(success=True, data={
        "volume": estimate.estimate,
        "stderr": estimate.stderr,
        "hits": estimate.hits,
        "draws": estimate.draws,
        "upper_bound": estimate.upper_bound,
    })


@app.post("/api/simulate", response_model=DataResponse)
def simulate(request: SimulateRequest):
    pipeline = _pipeline(request)
    certificate = _certificate(request, pipeline)
    if len(request.x0) != len(certificate.plant_states):
        raise HTTPException(status_code=400, detail=f"x0 needs {len(certificate.plant_states)} values")
    try:
        _, frame = pipeline.simulate(certificate, request.x0, request.perturbation, request.disturbance)
    except IqcReachError as e:
        return DataResponse(success=False, error=str(e))
    return DataResponse(success=True, data=_finite(frame.to_dict(orient="records")))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    uvicorn.run(app, host="0.0.0.0", port=8000)
