"""Circuit execution backends with a cloud-style asynchronous protocol.

Circuits are partitioned into groups of at most ``group_limit`` and submitted
as jobs. :func:`submit_batch` never blocks; :func:`poll_collect` polls job
status with exponential backoff and reassembles the expectations in the
original circuit order, whatever order the groups finish in.

Two backends exist: ``local_exact`` runs the statevector simulator when a job
is first polled, and ``mock_cloud`` adds seeded latency, out-of-order
completion, optional shot sampling and failure injection.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vqc
from .tensor import make_rng
from .vqc import Circuit, Gate

PAULIS = ("Z", "X", "Y")


class BackendError(RuntimeError):
    pass


class SubmissionError(BackendError):
    pass


class JobFailedError(BackendError):
    def __init__(self, job_ids: Sequence[str]):
        super().__init__(f"{len(job_ids)} job(s) failed: {', '.join(job_ids)}")
        self.job_ids = list(job_ids)


class JobStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


_ORDER = {JobStatus.QUEUED: 0, JobStatus.RUNNING: 1, JobStatus.DONE: 2, JobStatus.FAILED: 2}


@dataclass
class BackendConfig:
    kind: str = "local_exact"
    shots: int | None = None
    group_limit: int = 10
    latency_ms: float = 0.0
    seed: int = 0
    fail_groups: tuple[int, ...] = ()
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.kind not in ("local_exact", "mock_cloud"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.group_limit < 1:
            raise ValueError("group_limit must be >= 1")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be a positive integer")
        if self.shots is not None and self.kind != "mock_cloud":
            raise ValueError("shot sampling is only available on the mock_cloud backend")


@dataclass
class JobHandle:
    job_id: str
    group: int
    indices: tuple[int, ...]
    status: JobStatus = JobStatus.QUEUED


@dataclass
class _Job:
    handle: JobHandle
    circuits: list[Circuit]
    submitted: float
    start_at: float = 0.0
    finish_at: float = 0.0
    fail: bool = False
    result: list[np.ndarray] | None = None
    wall_ms: float | None = None
    rng: np.random.Generator | None = None


class Backend:
    """Shared job bookkeeping; subclasses decide when and how groups run."""

    kind = "base"

    def __init__(self, config: BackendConfig):
        self.config = config
        self.available = True
        self.circuits_executed = 0
        self._jobs: dict[str, _Job] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._id_rng = make_rng(config.seed)
        self._group_counter = 0

    def close(self) -> None:
        self.available = False

    def _new_id(self) -> str:
        return "job-" + self._id_rng.bytes(6).hex()

    def _schedule(self, jobs: list[_Job]) -> None:
        pass

    def submit(self, circuits: Sequence[Circuit]) -> list[JobHandle]:
        if not self.available:
            raise SubmissionError(f"{self.kind} backend is unavailable; retry the submission once it is reopened")
        if not circuits:
            raise SubmissionError("nothing to submit")
        limit = self.config.group_limit
        now = time.monotonic()
        jobs = []
        with self._lock:
            for start in range(0, len(circuits), limit):
                idx = tuple(range(start, min(start + limit, len(circuits))))
                handle = JobHandle(self._new_id(), self._group_counter, idx)
                self._group_counter += 1
                job = _Job(handle, [circuits[i] for i in idx], now)
                jobs.append(job)
                self._jobs[handle.job_id] = job
                self._order.append(handle.job_id)
            self._schedule(jobs)
        return [j.handle for j in jobs]

    def _advance(self, job: _Job, status: JobStatus) -> None:
        if _ORDER[status] < _ORDER[job.handle.status]:
            raise BackendError(f"illegal status change {job.handle.status} -> {status}")
        job.handle.status = status

    def _run(self, job: _Job) -> list[np.ndarray]:
        t0 = time.perf_counter()
        out = [self._execute(c, job) for c in job.circuits]
        job.wall_ms = (time.perf_counter() - t0) * 1e3
        self.circuits_executed += len(job.circuits)
        return out

    def _execute(self, circuit: Circuit, job: _Job) -> np.ndarray:
        return vqc.run_circuit(circuit)

    def status(self, job_id: str) -> JobStatus:
        raise NotImplementedError

    def handle(self, job_id: str) -> JobHandle:
        return self._jobs[job_id].handle

    def result(self, job_id: str) -> list[np.ndarray]:
        job = self._jobs[job_id]
        if job.handle.status is not JobStatus.DONE:
            raise BackendError(f"job {job_id} is {job.handle.status.value}, not done")
        return job.result

    def ledger(self) -> list[dict]:
        return [
            {"job_id": jid, "group": self._jobs[jid].handle.group, "size": len(self._jobs[jid].circuits),
             "status": self._jobs[jid].handle.status.value, "wall_ms": self._jobs[jid].wall_ms}
            for jid in self._order
        ]


class LocalExactBackend(Backend):
    kind = "local_exact"

    def status(self, job_id: str) -> JobStatus:
        with self._lock:
            job = self._jobs[job_id]
            if job.handle.status is JobStatus.QUEUED:
                self._advance(job, JobStatus.RUNNING)
                job.result = self._run(job)
                self._advance(job, JobStatus.DONE)
            return job.handle.status


class MockCloudBackend(Backend):
    """In-process stand-in for a remote device queue.

    Groups finish after ``latency_ms`` times their slot in a seeded random
    permutation, so completion order differs from submission order.
    ``completion_order`` pins that permutation for adversarial tests.
    """

    kind = "mock_cloud"

    def __init__(self, config: BackendConfig, completion_order: Sequence[int] | None = None):
        super().__init__(config)
        self._sched_rng = make_rng(config.seed + 1)
        self.completion_order = None if completion_order is None else list(completion_order)
        self.completed: list[int] = []
        self._rank: dict[str, tuple[int, int]] = {}
        self._batches = 0

    def _schedule(self, jobs: list[_Job]) -> None:
        n = len(jobs)
        if self.completion_order is not None and sorted(self.completion_order) == list(range(n)):
            order = list(self.completion_order)
        else:
            order = self._sched_rng.permutation(n).tolist()
        lat = self.config.latency_ms / 1e3
        for slot, j in enumerate(order):
            job = jobs[j]
            job.start_at = job.submitted + lat * slot
            job.finish_at = job.submitted + lat * (slot + 1)
            job.fail = job.handle.group in self.config.fail_groups
        self._rank.update({jobs[j].handle.job_id: (self._batches, slot) for slot, j in enumerate(order)})
        self._batches += 1

    def _run(self, job: _Job) -> list[np.ndarray]:
        # Per-job stream: results do not depend on the order groups are polled in.
        job.rng = make_rng((self.config.seed * 1_000_003 + job.handle.group) % 2**63)
        return super()._run(job)

    def _execute(self, circuit: Circuit, job: _Job) -> np.ndarray:
        if self.config.shots is None:
            return vqc.run_circuit(circuit)
        counts = vqc.sample_shots(vqc.final_state(circuit), self.config.shots, job.rng)
        return np.array([vqc.z_from_counts(counts, q) for q in circuit.measure_z])

    def status(self, job_id: str) -> JobStatus:
        with self._lock:
            job = self._jobs[job_id]
            if job.handle.status in (JobStatus.DONE, JobStatus.FAILED):
                return job.handle.status
            now = time.monotonic()
            # Zero latency still honours the permutation: a job may only finish
            # once every job ranked before it in the same submission has.
            if now >= job.start_at and job.handle.status is JobStatus.QUEUED:
                self._advance(job, JobStatus.RUNNING)
            if now >= job.finish_at and self._predecessors_done(job):
                if job.fail:
                    self._advance(job, JobStatus.FAILED)
                else:
                    if job.handle.status is JobStatus.QUEUED:
                        self._advance(job, JobStatus.RUNNING)
                    job.result = self._run(job)
                    self._advance(job, JobStatus.DONE)
                self.completed.append(job.handle.group)
            return job.handle.status

    def _predecessors_done(self, job: _Job) -> bool:
        batch, rank = self._rank[job.handle.job_id]
        return all(
            self._jobs[jid].handle.status in (JobStatus.DONE, JobStatus.FAILED)
            for jid, (b, r) in self._rank.items()
            if b == batch and r < rank
        )


def make_backend(config: BackendConfig, **kwargs) -> Backend:
    if config.kind == "local_exact":
        return LocalExactBackend(config)
    return MockCloudBackend(config, **kwargs)


# -- protocol ---------------------------------------------------------------

def serialize_ir(circuit: Circuit) -> str:
    return vqc.to_ir(circuit)


def parse_ir(text: str) -> Circuit:
    return vqc.from_ir(text)


def basis_transform(circuit: Circuit, obs: Sequence[str]) -> Circuit:
    """Rotate X/Y measurements onto Z: H for X, SDG then H for Y."""
    obs = [p.upper() for p in obs]
    if len(obs) != circuit.num_qubits:
        raise vqc.CircuitError(f"observable has {len(obs)} entries for {circuit.num_qubits} qubits")
    if any(p not in PAULIS for p in obs):
        raise vqc.CircuitError(f"observable entries must be Z, X or Y, got {obs}")
    extra: list[Gate] = []
    for q, p in enumerate(obs):
        if p == "X":
            extra.append(Gate(vqc.H, q))
        elif p == "Y":
            extra += [Gate(vqc.SDG, q), Gate(vqc.H, q)]
    measure = circuit.measure_z or tuple(range(circuit.num_qubits))
    return replace(circuit, gates=circuit.gates + tuple(extra), measure_z=measure)


def observable_circuits(circuit: Circuit, observables: Sequence[Sequence[str]]) -> list[Circuit]:
    """One Z-measured circuit per distinct Pauli combination, first-seen order."""
    seen: dict[tuple[str, ...], Circuit] = {}
    for obs in observables:
        key = tuple(p.upper() for p in obs)
        if key not in seen:
            seen[key] = basis_transform(circuit, key)
    return list(seen.values())


def group_sizes(total: int, group_limit: int) -> list[int]:
    return [min(group_limit, total - s) for s in range(0, total, group_limit)]


def submit_batch(backend: Backend, circuits: Sequence[Circuit]) -> list[JobHandle]:
    return backend.submit(list(circuits))


def poll_collect(backend: Backend, handles: Sequence[JobHandle], shape: tuple[int, ...] | None = None,
                 timeout_s: float | None = None) -> np.ndarray:
    """Block until every job has finished and reassemble results in order.

    Returns the per-circuit expectations concatenated in submission order,
    reshaped to ``shape`` when given, otherwise ``(num_circuits, per_circuit)``.
    """
    timeout_s = backend.config.timeout_s if timeout_s is None else timeout_s
    deadline = time.monotonic() + timeout_s
    pending = {h.job_id: h for h in handles}
    results: dict[int, np.ndarray] = {}
    failed: list[str] = []
    delay = 1e-3
    while pending:
        for jid in list(pending):
            st = backend.status(jid)
            h = pending[jid]
            if st is JobStatus.DONE:
                for i, r in zip(h.indices, backend.result(jid)):
                    results[i] = np.asarray(r, dtype=np.float64)
                del pending[jid]
            elif st is JobStatus.FAILED:
                failed.append(jid)
                del pending[jid]
        if not pending:
            break
        if time.monotonic() > deadline:
            raise BackendError(f"timed out after {timeout_s}s waiting for {sorted(pending)}")
        time.sleep(delay)
        delay = min(delay * 2, 0.1)
    if failed:
        raise JobFailedError(failed)
    ordered = [results[i] for i in sorted(results)]
    flat = np.concatenate(ordered) if ordered else np.empty(0)
    if shape is not None:
        return flat.reshape(shape)
    widths = {r.size for r in ordered}
    return flat.reshape(len(ordered), -1) if len(widths) == 1 else flat


def qnn_circuits(angles: np.ndarray, theta: np.ndarray, Q: int, L: int, mode: str = "combined") -> list[Circuit]:
    """Forward circuits for a batch of encoding angles.

    ``combined`` reads every qubit from one circuit per sample; ``per_observable``
    emits one single-qubit readout per (sample, qubit), i.e. ``B * Q`` circuits.
    """
    angles = np.atleast_2d(angles)
    out = []
    for row in angles:
        c = vqc.build_qwthn_circuit(row, theta, Q, L)
        if mode == "combined":
            out.append(c)
        elif mode == "per_observable":
            out.extend(replace(c, measure_z=(q,)) for q in range(Q))
        else:
            raise ValueError(f"unknown readout mode {mode!r}")
    return out


def run_qnn_batch(backend: Backend, angles: np.ndarray, theta: np.ndarray, Q: int, L: int,
                  mode: str = "combined") -> np.ndarray:
    angles = np.atleast_2d(angles)
    handles = submit_batch(backend, qnn_circuits(angles, theta, Q, L, mode))
    return poll_collect(backend, handles, shape=(angles.shape[0], Q))


def write_ledger(backend: Backend, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in backend.ledger():
            fh.write(json.dumps(row) + "\n")
    return path


def shot_tolerance(shots: int) -> float:
    return 3.0 / math.sqrt(shots)
