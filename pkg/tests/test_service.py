import time
import warnings

import numpy as np
import pytest

from qwthn import __version__, vqc
from qwthn.checks import random_qwthn_circuit
from qwthn.qcloud import serialize_ir
from qwthn.service import create_app

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


def test_health(client):
    assert client.get("/health").json() == {"status": "ok", "version": __version__}


def test_params_defaults(client):
    r = client.post("/params", json={})
    assert r.status_code == 200
    body = r.json()
    assert body["baseline"] == 28672 and body["rows"][0]["total"] == 2420
    assert "8.44%" in body["table"]


def test_config_error_shape(client):
    r = client.post("/params", json={"config": {"adapter": {"qnn": {"qubits": 0}}}})
    assert r.status_code == 422
    assert r.json()["error"] == "config" and r.json()["stage"] == "adapter.qnn.qubits"
    assert client.post("/params", json={"conf": {}}).status_code == 422


def test_circuit_run(client, rng):
    c = random_qwthn_circuit(rng, 3, 2)
    r = client.post("/circuits/run", json={"ir": serialize_ir(c)})
    assert r.status_code == 200
    assert np.max(np.abs(np.array(r.json()["expectations"]) - vqc.run_circuit(c))) < 1e-12
    assert client.post("/circuits/run", json={"ir": "qubits 2\nfoo 0\n"}).status_code == 400


def test_batch_lifecycle(client, rng):
    cs = [random_qwthn_circuit(rng, 2, 1) for _ in range(5)]
    body = {"circuits": [serialize_ir(c) for c in cs], "backend": {"kind": "mock_cloud", "group_limit": 2},
            "completion_order": [2, 0, 1]}
    batch = client.post("/batches", json=body).json()
    assert [j["indices"] for j in batch["jobs"]] == [[0, 1], [2, 3], [4]]
    bid = batch["batch_id"]
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline:
        jobs = client.get(f"/batches/{bid}").json()["jobs"]
        if all(j["status"] == "done" for j in jobs):
            break
    got = []
    for j in batch["jobs"]:
        assert client.get(f"/batches/{bid}/jobs/{j['job_id']}").json()["status"] == "done"
        got += client.get(f"/batches/{bid}/jobs/{j['job_id']}/result").json()["expectations"]
    assert np.max(np.abs(np.array(got) - np.array([vqc.run_circuit(c) for c in cs]))) < 1e-12
    assert client.get("/batches/nope").status_code == 404
    assert client.get(f"/batches/{bid}/jobs/nope").status_code == 404


def test_result_not_ready_is_409(client, rng):
    body = {"circuits": [serialize_ir(random_qwthn_circuit(rng, 2, 1))],
            "backend": {"kind": "mock_cloud", "latency_ms": 60000}}
    batch = client.post("/batches", json=body).json()
    jid = batch["jobs"][0]["job_id"]
    assert client.get(f"/batches/{batch['batch_id']}/jobs/{jid}/result").status_code == 409


def test_eval_endpoint(client, tmp_path):
    recs = [{"candidate": "the cat mat", "references": ["the cat sat on mat"]}]
    r = client.post("/eval", json={"records": recs})
    assert r.status_code == 200 and r.json()["rougeL"] == pytest.approx(0.75)
    assert client.post("/eval", json={"records": recs, "run_dir": str(tmp_path)}).status_code == 404
    assert client.post("/eval", json={"records": []}).status_code == 400


def test_train_endpoint(client, tmp_path):
    r = client.post("/train", json={"config": {"train": {"steps": 3, "eval_every": 3}}, "out_dir": str(tmp_path)})
    assert r.status_code == 200
    m = r.json()
    assert m["summary"]["steps"] == 3 and (tmp_path / m["artifacts"]["history_svg"]).exists()


def test_check_endpoints(client):
    r = client.post("/checks/qcheck", json={"backend": "local_exact", "seed": 3})
    assert r.status_code == 200 and r.json()["passed"]
    names = [row["name"] for row in r.json()["results"]]
    assert any("accounting" in n for n in names)
    assert client.post("/checks/qcheck", json={"backend": "aws"}).status_code == 422
