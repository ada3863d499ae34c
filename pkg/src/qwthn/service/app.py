"""FastAPI application wrapping the ``qwthn`` package.

Every endpoint is a thin layer over a library call. Submitted circuit
batches live in memory for the lifetime of the process, one execution
backend per batch.
"""

from __future__ import annotations

import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__, checks, qcloud, vqc
from ..adapter import ConfigError
from ..config import parse_config
from ..qcloud import Backend, BackendError, MockCloudBackend
from ..runs import RunManifest, format_params_table, params_table, run_eval, run_training
from ..train import DivergenceError
from .schemas import (
    CircuitRequest,
    CircuitResponse,
    ConfigBody,
    EvalRequest,
    GradcheckRequest,
    Health,
    JobBatch,
    JobInfo,
    JobResult,
    JobSubmit,
    MetricsResponse,
    ParamsResponse,
    QcheckRequest,
    SuiteResponse,
    TrainRequest,
)


class BatchStore:
    def __init__(self):
        self._batches: dict[str, Backend] = {}
        self._lock = threading.Lock()

    def add(self, backend: Backend) -> str:
        batch_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._batches[batch_id] = backend
        return batch_id

    def get(self, batch_id: str) -> Backend:
        try:
            return self._batches[batch_id]
        except KeyError:
            raise HTTPException(404, f"unknown batch {batch_id}") from None


def _job_info(backend: Backend, job_id: str) -> JobInfo:
    status = backend.status(job_id)
    handle = backend.handle(job_id)
    return JobInfo(job_id=job_id, group=handle.group, indices=list(handle.indices), status=status.value)


def create_app() -> FastAPI:
    app = FastAPI(title="qwthn", version=__version__)
    store = BatchStore()
    app.state.batches = store

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=422, content={"error": "config", "stage": exc.stage, "detail": str(exc)})

    @app.exception_handler(DivergenceError)
    async def _diverged(request: Request, exc: DivergenceError):
        return JSONResponse(status_code=500, content={"error": "diverged", "detail": str(exc)})

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.post("/params", response_model=ParamsResponse)
    def params(body: ConfigBody):
        table = params_table(parse_config(body.config, check_dims=False))
        return ParamsResponse(**table, table=format_params_table(table))

    @app.post("/train", response_model=RunManifest)
    def train(body: TrainRequest):
        return run_training(parse_config(body.config), Path(body.out_dir))

    @app.post("/eval", response_model=MetricsResponse)
    def evaluate(body: EvalRequest):
        records = [r.model_dump(exclude_none=True) for r in body.records]
        try:
            report = run_eval(records, body.run_dir, body.percent)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from None
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from None
        return MetricsResponse(**report.to_dict(body.percent))

    @app.post("/circuits/run", response_model=CircuitResponse)
    def run_circuit(body: CircuitRequest):
        try:
            circuit = qcloud.parse_ir(body.ir)
        except vqc.CircuitError as exc:
            raise HTTPException(400, str(exc)) from None
        return CircuitResponse(expectations=vqc.run_circuit(circuit).tolist(), num_qubits=circuit.num_qubits,
                               gates=len(circuit.gates))

    @app.post("/batches", response_model=JobBatch)
    def submit(body: JobSubmit):
        try:
            circuits = [qcloud.parse_ir(text) for text in body.circuits]
            cfg = body.backend.to_backend_config()
        except (vqc.CircuitError, ValueError) as exc:
            raise HTTPException(400, str(exc)) from None
        if cfg.kind == "mock_cloud":
            backend: Backend = MockCloudBackend(cfg, completion_order=body.completion_order)
        else:
            backend = qcloud.make_backend(cfg)
        handles = backend.submit(circuits)
        batch_id = store.add(backend)
        return JobBatch(batch_id=batch_id, jobs=[
            JobInfo(job_id=h.job_id, group=h.group, indices=list(h.indices), status=h.status.value) for h in handles
        ])

    @app.get("/batches/{batch_id}", response_model=JobBatch)
    def batch_status(batch_id: str):
        backend = store.get(batch_id)
        return JobBatch(batch_id=batch_id, jobs=[_job_info(backend, row["job_id"]) for row in backend.ledger()])

    @app.get("/batches/{batch_id}/jobs/{job_id}", response_model=JobInfo)
    def job_status(batch_id: str, job_id: str):
        backend = store.get(batch_id)
        try:
            return _job_info(backend, job_id)
        except KeyError:
            raise HTTPException(404, f"unknown job {job_id}") from None

    @app.get("/batches/{batch_id}/jobs/{job_id}/result", response_model=JobResult)
    def job_result(batch_id: str, job_id: str):
        backend = store.get(batch_id)
        try:
            status = backend.status(job_id)
            values = backend.result(job_id)
        except KeyError:
            raise HTTPException(404, f"unknown job {job_id}") from None
        except BackendError as exc:
            raise HTTPException(409, str(exc)) from None
        return JobResult(job_id=job_id, status=status.value,
                         expectations=[np.asarray(v, dtype=float).tolist() for v in values])

    @app.post("/checks/qcheck", response_model=SuiteResponse)
    def qcheck(body: QcheckRequest):
        return checks.qcheck(body.backend, body.shots, body.seed).to_dict()

    @app.post("/checks/gradcheck", response_model=SuiteResponse)
    def gradcheck(body: GradcheckRequest):
        return checks.gradcheck(body.seed).to_dict()

    return app


app = create_app()
