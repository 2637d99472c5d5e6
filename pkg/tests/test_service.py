import json

import pytest
from fastapi.testclient import TestClient

from rahore.backend import BackendError, MockBackend
from rahore.config import load_config
from rahore.runtime import build_runtime, load_corpus
from rahore.service import create_app


@pytest.fixture
def config(fixtures_dir):
    return load_config(
        overrides={
            "paths.corpus": str(fixtures_dir / "example_corpus.jsonl"),
            "paths.queries": str(fixtures_dir / "example_queries.jsonl"),
            "backend.kind": "oracle_mock",
            "default_k": 3,
        },
        env={},
    )


@pytest.fixture
def client(config):
    rt = build_runtime(config)
    return TestClient(create_app(rt, reload_corpus=lambda: load_corpus(config)))


QUERY = {"id": "example-1", "history": [], "utterance": "Seriously! What I am scare of now is how to secure another job."}


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200 and r.json()["backend"]["status"] == "ok"


def test_corpus(client):
    docs = client.get("/corpus").json()
    assert len(docs) == 8 and docs[2] == {"id": "reflection_of_feelings", "text": "Reflection of feelings"}


def test_retrieve(client):
    r = client.post("/retrieve", json={"query": QUERY, "k": 3})
    assert r.status_code == 200
    body = r.json()
    assert body["query_id"] == "example-1"
    assert [e["rank"] for e in body["ranking"]] == [1, 2, 3]
    assert body["ranking"][0]["doc_id"] == "reflection_of_feelings"


def test_score(client):
    r = client.post("/score", json={"query": QUERY, "doc_id": "reflection_of_feelings"})
    assert r.status_code == 200
    assert r.json()["s_rel"] == pytest.approx(0.9)
    assert client.post("/score", json={"query": QUERY, "doc_id": "nope"}).status_code == 422


@pytest.mark.parametrize(
    "payload",
    [b"{not json", b"[1, 2]", json.dumps({"k": 3}).encode(), json.dumps({"query": {"id": "x"}}).encode(),
     json.dumps({"query": QUERY, "k": 0}).encode()],
)
def test_malformed_bodies_400(client, payload):
    r = client.post("/retrieve", content=payload, headers={"content-type": "application/json"})
    assert r.status_code == 400


def test_unknown_gold_422(client):
    r = client.post("/retrieve", json={"query": {**QUERY, "gold": ["not-a-doc"]}})
    assert r.status_code == 422 and "not-a-doc" in r.json()["detail"]


def test_warm_then_retrieve_reports_cached_tokens(client):
    cold = client.post("/retrieve", json={"query": {**QUERY, "id": "other"}, "k": 8}).json()
    assert cold["timing"]["total_cached_tokens"] == 0
    summary = client.post("/warm").json()
    assert summary["warm"] == 8
    warm = client.post("/retrieve", json={"query": QUERY, "k": 8}).json()
    assert warm["timing"]["total_cached_tokens"] > 0
    assert all(v > 0 for v in warm["timing"]["cached_tokens"].values())


class BrokenBackend(MockBackend):
    def score_choices(self, prompt, choices):
        raise BackendError("upstream down")

    def health(self):
        return {"status": "unreachable", "kind": "broken"}


def test_backend_failure_502_and_health_503(config):
    rt = build_runtime(config)
    rt.engine.backend = BrokenBackend()
    client = TestClient(create_app(rt))
    assert client.post("/retrieve", json={"query": QUERY}).status_code == 502
    assert client.post("/score", json={"query": QUERY, "doc_id": "others"}).status_code == 502
    assert client.get("/healthz").status_code == 503


def test_busy_gate_returns_503(client):
    gate = client.app.state.gate
    gate.begin("corpus reload")
    try:
        assert client.post("/retrieve", json={"query": QUERY}).status_code == 503
    finally:
        gate.end()
    assert client.post("/retrieve", json={"query": QUERY}).status_code == 200


def test_reload(client):
    assert client.post("/reload").json() == {"documents": 8}
