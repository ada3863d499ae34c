"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..config import BackendSettings


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Health(BaseModel):
    status: str = "ok"
    version: str


class ConfigBody(_Body):
    config: dict = Field(default_factory=dict)


class TrainRequest(ConfigBody):
    out_dir: str


class StageRow(BaseModel):
    kind: str
    stages: dict[str, int]
    total: int
    lora_rank: int
    lora_total: int
    ratio: float
    optimizer_scalars: int


class ParamsResponse(BaseModel):
    n_x: int
    n_y: int
    lora_rank: int
    baseline: int
    rows: list[StageRow]
    table: str


class EvalRecord(BaseModel):
    candidate: str
    references: list[str] | str
    gold: Optional[str] = None
    answer_segment: Optional[str] = None
    full_text: Optional[str] = None


class EvalRequest(_Body):
    records: list[EvalRecord]
    run_dir: Optional[str] = None
    percent: bool = False


class MetricsResponse(BaseModel):
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    sa: float
    accuracy: float
    samples: int


class CircuitRequest(_Body):
    ir: str


class CircuitResponse(BaseModel):
    expectations: list[float]
    num_qubits: int
    gates: int


class JobSubmit(_Body):
    circuits: list[str] = Field(min_length=1)
    backend: BackendSettings = BackendSettings(kind="mock_cloud")
    completion_order: Optional[list[int]] = None


class JobInfo(BaseModel):
    job_id: str
    group: int
    indices: list[int]
    status: Literal["queued", "running", "done", "failed"]


class JobBatch(BaseModel):
    batch_id: str
    jobs: list[JobInfo]


class JobResult(BaseModel):
    job_id: str
    status: str
    expectations: list[list[float]]


class QcheckRequest(_Body):
    backend: Literal["local_exact", "mock_cloud"] = "mock_cloud"
    shots: Optional[int] = Field(1_000_000, ge=1)
    seed: int = Field(7, ge=0)


class GradcheckRequest(_Body):
    seed: int = Field(7, ge=0)


class CheckRow(BaseModel):
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str
    seconds: float


class SuiteResponse(BaseModel):
    suite: str
    passed: bool
    results: list[CheckRow]


class ErrorBody(BaseModel):
    error: str
    stage: Optional[str] = None
    detail: str
