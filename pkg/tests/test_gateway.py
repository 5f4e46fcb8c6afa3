import json

import httpx
import pytest

from conftest import scripted
from policysim.gateway import (
    AuditLog,
    ChatRequest,
    Gateway,
    Message,
    ProviderError,
    ProviderTimeout,
    RateLimited,
    Role,
    ScriptEntry,
    ScriptMiss,
    TransientFault,
    HttpProvider,
    cosine,
    hash_embedding,
)


class Flaky:
    """Fails ``fails`` times with a transient fault, then answers."""

    provider_id = "flaky"

    def __init__(self, fails: int, rate_limited: bool = False):
        self.fails, self.rate_limited, self.calls = fails, rate_limited, 0

    def complete(self, request):
        self.calls += 1
        if self.calls <= self.fails:
            raise TransientFault("boom", rate_limited=self.rate_limited)
        return "ok"

    def embed(self, texts):
        return [[1.0, 0.0] for _ in texts]

    def score(self, request):
        return self.complete(request) and 1.0


def req(tag="selector", text="hi"):
    return ChatRequest.single("sys", text, tag=tag)


def test_scripted_match_returns_canned_text():
    gw = scripted(ScriptEntry.on("selector", response="canned"))
    assert gw.complete(req()).content == "canned"


def test_scripted_miss_fails_loudly():
    gw = scripted(ScriptEntry.on("selector", response="canned"))
    with pytest.raises(ScriptMiss):
        gw.complete(req(tag="other"))


def test_first_match_wins_and_times_limits_entries():
    gw = scripted(ScriptEntry.on("t", contains="hi", response="first", times=1),
                  ScriptEntry.on("t", response="second"))
    assert [gw.complete(req("t")).content for _ in range(3)] == ["first", "second", "second"]


def test_tag_prefix_matching():
    gw = scripted(ScriptEntry.on("forge.constraint", response="x"))
    assert gw.complete(req("forge.constraint.case_coverage")).content == "x"
    with pytest.raises(ScriptMiss):
        gw.complete(req("forge.constraints"))


def test_fault_three_times_gives_provider_timeout():
    sleeps = []
    audit = AuditLog()
    flaky = Flaky(fails=10)
    gw = Gateway(flaky, audit=audit, sleep=sleeps.append)
    with pytest.raises(ProviderTimeout):
        gw.complete(req())
    assert flaky.calls == 3
    assert len(audit) == 3  # one record per attempt
    assert sleeps == [1.0, 2.0]  # exponential backoff from 1 s


def test_recovers_within_retry_budget():
    audit = AuditLog()
    gw = Gateway(Flaky(fails=2), audit=audit, sleep=lambda s: None)
    assert gw.complete(req()).content == "ok"
    assert [r["ok"] for r in audit.records] == [False, False, True]


def test_rate_limit_surfaces_after_backoff():
    gw = Gateway(Flaky(fails=10, rate_limited=True), sleep=lambda s: None)
    with pytest.raises(RateLimited):
        gw.complete(req())


def test_scripted_determinism():
    def run():
        gw = scripted(ScriptEntry.on("t", response=lambda r: r.fingerprint()[:8]))
        return [gw.complete(req("t", f"m{i}")).content for i in range(5)]
    assert run() == run()


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest("s", (Message(Role.USER, "a"), Message(Role.USER, "b")))
    with pytest.raises(ValueError):
        ChatRequest("s", (Message(Role.USER, ""),))
    with pytest.raises(ValueError):
        ChatRequest.single("s", "x", temperature=-0.1)


def test_embed_contract():
    gw = scripted()
    a, b = gw.embed(["a", "b"])
    assert a.dimension == b.dimension
    a2, = gw.embed(["a"])
    assert a2 == a
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        gw.embed([])


def test_hash_embedding_is_unit():
    import numpy as np
    assert np.linalg.norm(hash_embedding("x")) == pytest.approx(1.0)


def test_http_provider_payloads_and_errors():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        seen.append((request.url.path, body, request.headers.get("authorization")))
        if request.url.path.endswith("/chat/completions"):
            return httpx.Response(200, json={"choices": [{"message": {"content": "hello"}}]})
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"embedding": [0.0, 1.0]} for _ in body["input"]]})
        if request.url.path.endswith("/score"):
            return httpx.Response(200, json={"score": -0.5})
        return httpx.Response(404)

    import os
    os.environ["PS_TEST_TOKEN"] = "sekret"
    try:
        prov = HttpProvider("http://x/v1", "m", token_env="PS_TEST_TOKEN", transport=httpx.MockTransport(handler))
    finally:
        del os.environ["PS_TEST_TOKEN"]
    gw = Gateway(prov, sleep=lambda s: None)
    assert gw.complete(ChatRequest.single("sys", "u", seed=3)).content == "hello"
    assert [v.values for v in gw.embed(["a", "b"])] == [(0.0, 1.0), (0.0, 1.0)]
    assert gw.score(ChatRequest.single("sys", "u")) == -0.5
    path, body, auth = seen[0]
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["seed"] == 3
    assert auth == "Bearer sekret"


@pytest.mark.parametrize("status,err", [(500, ProviderTimeout), (429, RateLimited), (400, ProviderError)])
def test_http_status_mapping(status, err):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status, text="nope")

    gw = Gateway(HttpProvider("http://x", "m", transport=httpx.MockTransport(handler)), sleep=lambda s: None)
    with pytest.raises(err):
        gw.complete(ChatRequest.single("s", "u"))
    assert len(calls) == (1 if err is ProviderError else 3)


def test_audit_counts_and_jsonl_mirror(tmp_path):
    path = tmp_path / "audit.jsonl"
    audit = AuditLog(path)
    gw = scripted(ScriptEntry.on(response="x"), provider_id="p1", audit=audit)
    gw.complete(req("a"))
    gw.complete(req("b"))
    assert audit.counts() == {"p1": 2}
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["tag"] for r in rows] == ["a", "b"]
    assert all({"request_hash", "response_hash", "timestamp"} <= r.keys() for r in rows)
