"""REST surface over the experiment engine.

One process embeds everything: sources, ring, labeling, datasets. The
API is a thin translation layer; every endpoint body is a direct call
into ExperimentEngine, and every error uses the fixed shape
{code, message, detail}.
"""

from __future__ import annotations

import os
import re
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import control
from .labeling import LabelPolicy
from .phy import OfdmConfig


class SourceModel(BaseModel):
    kind: str
    model_config = {"extra": "allow"}


class LabelSourceModel(BaseModel):
    source_id: str = "sim"
    rate_hz: float = 100.0
    x_span_m: float = 1.0
    y_span_m: float = 1.0
    step_m: float = 0.25
    speed_mps: float = 0.5
    noise_std_m: float = 0.0
    seed: int = 0


class PolicyModel(BaseModel):
    max_gap_ns: int
    interpolation: str = "linear"


class ExperimentCreate(BaseModel):
    name: str
    sources: list[SourceModel]
    ring_budget_bytes: int
    output_dir: Optional[str] = None
    label_sources: list[LabelSourceModel] = Field(default_factory=list)
    label_policy: Optional[PolicyModel] = None
    pipeline: Optional[dict] = None
    trigger_pre_s: float = 0.1
    trigger_post_s: float = 0.1


class TriggerBody(BaseModel):
    pre_s: Optional[float] = None
    post_s: Optional[float] = None


_STATUS_CODES = {
    "ValidationError": 400,
    "NotFound": 404,
    "IllegalTransition": 409,
    "RangeNotSatisfiable": 416,
}


def _error(code: str, message: str, detail=None, status: Optional[int] = None):
    return JSONResponse(
        status_code=status or _STATUS_CODES.get(code, 500),
        content={"code": code, "message": message, "detail": detail},
    )


def _spec_from_request(body: ExperimentCreate, data_root: str) -> control.ExperimentSpec:
    sources = tuple(
        control.source_config_from_dict(s.model_dump()) for s in body.sources
    )
    label_sources = tuple(
        control.MotionSourceConfig(**ls.model_dump()) for ls in body.label_sources
    )
    policy = (
        LabelPolicy(**body.label_policy.model_dump()) if body.label_policy else None
    )
    pipeline = OfdmConfig(**body.pipeline) if body.pipeline is not None else None
    return control.ExperimentSpec(
        name=body.name,
        sources=sources,
        ring_budget_bytes=body.ring_budget_bytes,
        output_dir=body.output_dir or os.path.join(data_root),
        label_sources=label_sources,
        label_policy=policy,
        pipeline=pipeline,
        trigger_pre_s=body.trigger_pre_s,
        trigger_post_s=body.trigger_post_s,
    )


_RANGE_RE = re.compile(r"^bytes=(\d*)-(\d*)$")


def _parse_range(header: str, size: int):
    """RFC 7233 single range -> (start, end) half-open, or None if absent."""
    m = _RANGE_RE.match(header.strip())
    if not m or (not m.group(1) and not m.group(2)):
        raise control.RangeNotSatisfiable(f"unparseable range {header!r}")
    first, last = m.group(1), m.group(2)
    if first:
        start = int(first)
        end = min(int(last) + 1, size) if last else size
    else:  # suffix form: last N bytes
        n = int(last)
        if n == 0:
            raise control.RangeNotSatisfiable("zero-length suffix range")
        start, end = max(0, size - n), size
    if start >= size and size > 0:
        raise control.RangeNotSatisfiable(f"start {start} beyond size {size}")
    if start > end:
        raise control.RangeNotSatisfiable(f"inverted range {header!r}")
    return start, end


def create_app(engine: Optional[control.ExperimentEngine] = None) -> FastAPI:
    engine = engine or control.ExperimentEngine()
    app = FastAPI(title="pldl", version="1")
    app.state.engine = engine

    @app.exception_handler(control.ValidationError)
    async def _on_validation(request: Request, exc: control.ValidationError):
        return _error("ValidationError", "spec rejected",
                      [{"field": f, "message": m} for f, m in exc.errors])

    @app.exception_handler(control.NotFound)
    async def _on_not_found(request: Request, exc: control.NotFound):
        return _error("NotFound", "no such resource", str(exc))

    @app.exception_handler(control.IllegalTransition)
    async def _on_illegal(request: Request, exc: control.IllegalTransition):
        return _error("IllegalTransition", str(exc),
                      {"state": exc.state, "event": exc.event})

    @app.exception_handler(control.RangeNotSatisfiable)
    async def _on_range(request: Request, exc: control.RangeNotSatisfiable):
        return _error("RangeNotSatisfiable", str(exc), None)

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/experiments", status_code=201)
    def create_experiment(body: ExperimentCreate):
        spec = _spec_from_request(body, engine.data_root)
        return {"id": engine.create_experiment(spec)}

    @app.get("/v1/experiments")
    def list_experiments():
        return {"experiments": engine.list_experiments()}

    @app.get("/v1/experiments/{experiment_id}")
    def experiment_status(experiment_id: str):
        return engine.status(experiment_id).to_dict()

    def _transition(experiment_id: str, event: str, **kwargs):
        return {"state": engine.transition(experiment_id, event, **kwargs)}

    @app.post("/v1/experiments/{experiment_id}/arm")
    def arm(experiment_id: str):
        return _transition(experiment_id, "arm")

    @app.post("/v1/experiments/{experiment_id}/start")
    def start(experiment_id: str):
        return _transition(experiment_id, "start")

    @app.post("/v1/experiments/{experiment_id}/stop")
    def stop(experiment_id: str):
        return _transition(experiment_id, "stop")

    @app.post("/v1/experiments/{experiment_id}/abort")
    def abort(experiment_id: str):
        return _transition(experiment_id, "abort")

    @app.post("/v1/experiments/{experiment_id}/trigger", status_code=202)
    def trigger(experiment_id: str, body: TriggerBody):
        return _transition(
            experiment_id, "trigger", pre_s=body.pre_s, post_s=body.post_s
        )

    @app.get("/v1/datasets")
    def list_datasets():
        return {"datasets": engine.list_datasets()}

    @app.get("/v1/datasets/{dataset_id}/manifest")
    def manifest(dataset_id: str):
        return engine.fetch_manifest(dataset_id)

    @app.get("/v1/datasets/{dataset_id}/data")
    def data(dataset_id: str, request: Request):
        header = request.headers.get("range")
        if header is None:
            payload = engine.fetch_data(dataset_id)
            return Response(content=payload, media_type="application/octet-stream")
        full_size = engine_size(engine, dataset_id)
        start, end = _parse_range(header, full_size)
        payload = engine.fetch_data(dataset_id, start, end)
        return Response(
            content=payload,
            status_code=206,
            media_type="application/octet-stream",
            headers={
                "Content-Range": f"bytes {start}-{max(start, end - 1)}/{full_size}"
            },
        )

    return app


def engine_size(engine: control.ExperimentEngine, dataset_id: str) -> int:
    directory = engine._dataset_dir(dataset_id)
    path = os.path.join(directory, dataset_id + ".iq")
    if not os.path.exists(path):
        raise control.NotFound(dataset_id)
    return os.path.getsize(path)


def main(host: str = "127.0.0.1", port: int = 8000,
         data_root: Optional[str] = None):
    import uvicorn

    app = create_app(control.ExperimentEngine(data_root=data_root))
    uvicorn.run(app, host=host, port=port, log_level="warning")
