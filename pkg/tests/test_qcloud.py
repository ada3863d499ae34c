import json
import time

import numpy as np
import pytest

from qwthn import vqc
from qwthn.checks import random_qwthn_circuit
from qwthn.qcloud import (
    BackendConfig,
    BackendError,
    JobFailedError,
    JobStatus,
    LocalExactBackend,
    MockCloudBackend,
    SubmissionError,
    basis_transform,
    group_sizes,
    make_backend,
    observable_circuits,
    parse_ir,
    poll_collect,
    qnn_circuits,
    run_qnn_batch,
    serialize_ir,
    shot_tolerance,
    submit_batch,
    write_ledger,
)

RANK = {JobStatus.QUEUED: 0, JobStatus.RUNNING: 1, JobStatus.DONE: 2, JobStatus.FAILED: 2}


def mock(**kw):
    return MockCloudBackend(BackendConfig("mock_cloud", **kw))


def circuits(rng, n, Q=3):
    return [random_qwthn_circuit(rng, Q, 2) for _ in range(n)]


def test_config_validation():
    with pytest.raises(ValueError):
        BackendConfig("ibm")
    with pytest.raises(ValueError):
        BackendConfig("local_exact", shots=100)
    with pytest.raises(ValueError):
        BackendConfig("mock_cloud", group_limit=0)
    assert isinstance(make_backend(BackendConfig()), LocalExactBackend)


def test_grouping(rng):
    assert group_sizes(32, 10) == [10, 10, 10, 2]
    assert group_sizes(10, 10) == [10]
    b = mock(group_limit=10)
    handles = submit_batch(b, circuits(rng, 23))
    assert [len(h.indices) for h in handles] == [10, 10, 3]
    assert [h.indices[0] for h in handles] == [0, 10, 20]
    assert len({h.job_id for h in handles}) == 3


def test_per_observable_accounting(rng):
    angles = rng.uniform(-1, 1, (8, 4))
    theta = rng.uniform(-1, 1, 16)
    cs = qnn_circuits(angles, theta, 4, 2, "per_observable")
    assert len(cs) == 32 and all(len(c.measure_z) == 1 for c in cs)
    assert len(qnn_circuits(angles, theta, 4, 2)) == 8
    with pytest.raises(ValueError):
        qnn_circuits(angles, theta, 4, 2, "bogus")
    b = mock()
    out = run_qnn_batch(b, angles, theta, 4, 2, "per_observable")
    assert b.circuits_executed == 32
    assert [r["size"] for r in b.ledger()] == [10, 10, 10, 2]
    assert np.max(np.abs(out - vqc.qnn_forward(angles, theta, 4, 2))) < 1e-12


def test_out_of_order_completion_reassembles(rng):
    cs = circuits(rng, 8)
    exact = np.array([vqc.run_circuit(c) for c in cs])
    b = MockCloudBackend(BackendConfig("mock_cloud", group_limit=2), completion_order=[3, 1, 2, 0])
    out = poll_collect(b, submit_batch(b, cs))
    assert b.completed == [3, 1, 2, 0]
    assert np.max(np.abs(out - exact)) == 0.0


def test_status_is_monotone_with_latency(rng):
    b = mock(group_limit=2, latency_ms=5.0)
    handles = submit_batch(b, circuits(rng, 6))
    seen = {h.job_id: [] for h in handles}
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline:
        states = {jid: b.status(jid) for jid in seen}
        for jid, s in states.items():
            seen[jid].append(RANK[s])
        if all(s is JobStatus.DONE for s in states.values()):
            break
        time.sleep(0.001)
    for trace in seen.values():
        assert trace == sorted(trace) and trace[-1] == 2


def test_result_before_done_is_an_error(rng):
    b = mock(latency_ms=10_000)
    h = submit_batch(b, circuits(rng, 1))[0]
    assert b.status(h.job_id) in (JobStatus.QUEUED, JobStatus.RUNNING)
    with pytest.raises(BackendError):
        b.result(h.job_id)


def test_failed_group_raises(rng):
    b = mock(group_limit=2, fail_groups=(1,))
    handles = submit_batch(b, circuits(rng, 6))
    with pytest.raises(JobFailedError) as e:
        poll_collect(b, handles)
    assert e.value.job_ids == [handles[1].job_id]
    assert [r["status"] for r in b.ledger()] == ["done", "failed", "done"]


def test_closed_backend_rejects_submission(rng):
    b = LocalExactBackend(BackendConfig())
    b.close()
    with pytest.raises(SubmissionError):
        b.submit(circuits(rng, 1))
    with pytest.raises(SubmissionError):
        LocalExactBackend(BackendConfig()).submit([])


def test_timeout(rng):
    b = mock(latency_ms=60_000)
    with pytest.raises(BackendError, match="timed out"):
        poll_collect(b, submit_batch(b, circuits(rng, 1)), timeout_s=0.05)


def test_ledger_file(tmp_path, rng):
    b = LocalExactBackend(BackendConfig(group_limit=4))
    poll_collect(b, submit_batch(b, circuits(rng, 9)))
    rows = [json.loads(line) for line in write_ledger(b, tmp_path / "jobs.jsonl").read_text().splitlines()]
    assert [r["size"] for r in rows] == [4, 4, 1]
    assert all(r["status"] == "done" and r["wall_ms"] >= 0 for r in rows)
    assert set(rows[0]) == {"job_id", "group", "size", "status", "wall_ms"}


def test_ir_roundtrip(rng):
    for _ in range(10):
        c = random_qwthn_circuit(rng, 3, 2)
        back = parse_ir(serialize_ir(c))
        assert np.array_equal(vqc.run_circuit(back), vqc.run_circuit(c))
        assert serialize_ir(back) == serialize_ir(c)


def test_basis_transform_matches_direct(rng):
    for _ in range(20):
        c = random_qwthn_circuit(rng, 2, 1)
        psi = vqc.final_state(c)
        for obs in ("XZ", "YX", "ZY", "YY"):
            got = vqc.run_circuit(basis_transform(c, obs))
            want = [vqc.expectation_pauli(psi, "".join(p if i == q else "I" for i, p in enumerate(obs)))
                    for q in range(2)]
            assert np.max(np.abs(got - want)) < 1e-12
    with pytest.raises(vqc.CircuitError):
        basis_transform(c, "XQ")
    with pytest.raises(vqc.CircuitError):
        basis_transform(c, "X")


def test_observable_circuits_dedupe(rng):
    c = random_qwthn_circuit(rng, 2, 1)
    assert len(observable_circuits(c, ["ZZ", "XZ", "zz", "XZ"])) == 2


def test_shot_noise_within_tolerance(rng):
    cs = circuits(rng, 4, Q=2)
    exact = np.array([vqc.run_circuit(c) for c in cs])
    b = mock(shots=200_000, seed=3)
    out = poll_collect(b, submit_batch(b, cs))
    assert np.all(np.abs(out - exact) <= shot_tolerance(200_000))
    b2 = mock(shots=200_000, seed=3)
    assert np.array_equal(poll_collect(b2, submit_batch(b2, cs)), out)
