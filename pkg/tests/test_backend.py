import json
import subprocess
import sys

import httpx
import mpmath
import pytest

from rahore.backend import (
    BackendConfig,
    BackendConfigError,
    BackendError,
    HttpCompletionsBackend,
    LatencyModel,
    MockBackend,
    OracleMockBackend,
    RetryableBackendError,
    make_backend,
)
from rahore.corpus import Document
from rahore.prompt import PromptTemplate, RenderedPrompt, render_prompt

CHOICES = ["<T>", "<F>"]


def prompt(doc="Reflection of feelings", q="user: I lost my job", qid="q1", doc_id="reflection_of_feelings"):
    return render_prompt(PromptTemplate(), Document(doc_id, doc), q, qid)


# -- mock ---------------------------------------------------------------------


def test_mock_deterministic_and_in_range():
    a = MockBackend(seed=7).score_choices(prompt(), CHOICES)
    b = MockBackend(seed=7).score_choices(prompt(), CHOICES)
    assert a.logprobs == b.logprobs
    assert set(a.logprobs) == set(CHOICES)
    assert all(-20.0 <= v <= 0.0 for v in a.logprobs.values())
    assert MockBackend(seed=8).score_choices(prompt(), CHOICES).logprobs != a.logprobs


def test_mock_deterministic_across_processes():
    code = (
        "import json;from rahore.backend import MockBackend;from rahore.corpus import Document;"
        "from rahore.prompt import PromptTemplate, render_prompt;"
        "p=render_prompt(PromptTemplate(),Document('reflection_of_feelings','Reflection of feelings'),'user: I lost my job','q1');"
        "print(json.dumps(MockBackend(seed=7).score_choices(p,['<T>','<F>']).logprobs))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert json.loads(out) == MockBackend(seed=7).score_choices(prompt(), CHOICES).logprobs


def test_mock_rejects_bad_choices():
    with pytest.raises(ValueError):
        MockBackend().score_choices(prompt(), [])
    with pytest.raises(ValueError):
        MockBackend().score_choices(prompt(), ["<T>", "<T>"])


def test_oracle_mock():
    oracle = OracleMockBackend({"q1": ["reflection_of_feelings"]})
    gold = oracle.score_choices(prompt(), CHOICES).logprobs
    assert gold["<T>"] > gold["<F>"]
    other = oracle.score_choices(prompt(doc="Question", doc_id="question"), CHOICES).logprobs
    assert other["<T>"] < other["<F>"]
    # gold-ness comes from the table, not the text: same text, unknown query id
    unknown = oracle.score_choices(prompt(qid="zzz"), CHOICES).logprobs
    assert unknown["<T>"] < unknown["<F>"]


def test_latency_model_examples():
    model = LatencyModel(per_token=0.001, fixed=0.0)
    assert model(100, 0) == pytest.approx(0.100)
    assert model(100, 60) == pytest.approx(0.040)
    assert model(100, 60) / model(100, 0) == pytest.approx((100 - 60) / 100, abs=1e-9)
    with pytest.raises(ValueError):
        model(10, 11)


def test_mock_latency_uses_whitespace_tokens():
    m = MockBackend(latency=LatencyModel(per_token=0.001, fixed=0.0))
    p = RenderedPrompt(" ".join(["w"] * 100), 0, "d", "q")
    assert m.mock_latency(p, 0) == pytest.approx(0.1)
    assert m.mock_latency(p, 60) == pytest.approx(0.04)


def test_mock_prefix_cache_and_priming():
    m = MockBackend(latency=LatencyModel(0.001, 0.0), auto_cache=False)
    p = prompt()
    cold = m.score_choices(p, CHOICES)
    assert cold.cached_tokens == 0
    m.prime(RenderedPrompt(p.prefix, p.prefix_len, p.doc_id, ""))
    warm = m.score_choices(p, CHOICES)
    assert warm.cached_tokens == len(p.prefix.split()) > 0
    assert warm.latency < cold.latency
    assert warm.logprobs == cold.logprobs


def test_mock_auto_cache_lru_capacity():
    m = MockBackend(cache_capacity=1)
    a, b = prompt(), prompt(doc="Question", doc_id="question")
    assert m.score_choices(a, CHOICES).cached_tokens == 0
    assert m.score_choices(a, CHOICES).cached_tokens > 0
    m.score_choices(b, CHOICES)  # evicts a
    assert m.score_choices(a, CHOICES).cached_tokens == 0


def test_backend_config_invariants():
    with pytest.raises(Exception):
        BackendConfig(logprob_floor=-5)
    with pytest.raises(Exception):
        BackendConfig(max_concurrent_requests=0)
    assert BackendConfig().logprob_floor == -100.0


def test_make_backend_kinds():
    assert type(make_backend(BackendConfig(kind="mock"))) is MockBackend
    assert isinstance(make_backend(BackendConfig(kind="oracle_mock"), {"q": ["d"]}), OracleMockBackend)
    with pytest.raises(BackendConfigError):
        make_backend(BackendConfig(kind="http"))


# -- http ---------------------------------------------------------------------


def http_backend(handler, **cfg):
    config = BackendConfig(kind="http", endpoint_url="http://llm.test", model="qwen2-7b-instruct", **cfg)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpCompletionsBackend(config, client=client, sleep=lambda s: None)


def test_http_replays_fixture_and_floors_missing_choice(fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_top_logprobs_missing_false.json").read_text())
    sent = []

    def handler(request: httpx.Request):
        sent.append(json.loads(request.content))
        return httpx.Response(200, json=recorded)

    p = prompt()
    lp = http_backend(handler).score_choices(p, CHOICES)
    mpmath.mp.dps = 30
    expected_t = float(mpmath.log(mpmath.exp(mpmath.mpf("-0.0513")) + mpmath.exp(mpmath.mpf("-3.2187"))))
    assert lp.logprobs["<T>"] == pytest.approx(expected_t, abs=1e-12)
    assert lp.logprobs["<F>"] == -100.0
    assert lp.floored == ("<F>",)
    assert (lp.prompt_tokens, lp.cached_tokens) == (41, 16)
    body = sent[0]
    assert body["prompt"] == p.text  # bytes on the wire equal the rendered prompt
    assert body["max_tokens"] == 1 and body["logprobs"] == 20 and body["temperature"] == 0
    assert body["model"] == "qwen2-7b-instruct"


def test_http_custom_floor(fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_top_logprobs_missing_false.json").read_text())
    lp = http_backend(lambda r: httpx.Response(200, json=recorded), logprob_floor=-50).score_choices(prompt(), CHOICES)
    assert lp.logprobs["<F>"] == -50


def test_http_bearer_token(monkeypatch, fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_top_logprobs_missing_false.json").read_text())
    monkeypatch.setenv("MY_KEY", "sekrit")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["url"] = str(request.url)
        return httpx.Response(200, json=recorded)

    http_backend(handler, api_key_env="MY_KEY").score_choices(prompt(), CHOICES)
    assert seen["auth"] == "Bearer sekrit"
    assert seen["url"] == "http://llm.test/v1/completions"


def _echo_handler(top_fixture, choice_token_lps):
    """Simulated server whose tokenizer splits choice strings into single characters."""

    def handler(request):
        body = json.loads(request.content)
        if not body.get("echo"):
            return httpx.Response(200, json=top_fixture)
        full = body["prompt"]
        choice = next(c for c in choice_token_lps if full.endswith(c))
        head = full[: -len(choice)]
        tokens, lps, offsets = [head], [None], [0]
        pos = len(head)
        for ch, lp in zip(choice, choice_token_lps[choice]):
            tokens.append(ch)
            lps.append(lp)
            offsets.append(pos)
            pos += 1
        tokens.append("\n")  # the one generated token; must not be counted
        lps.append(-9.0)
        offsets.append(pos)
        return httpx.Response(
            200,
            json={
                "choices": [{"text": "\n", "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets}}],
                "usage": {"prompt_tokens": 44, "completion_tokens": 1, "prompt_tokens_details": {"cached_tokens": 12}},
            },
        )

    return handler


def test_http_auto_falls_back_to_echo_for_multitoken_choices(fixtures_dir):
    top = json.loads((fixtures_dir / "http_multitoken_top.json").read_text())
    per_char = {"<T>": [-0.01, -0.2, -0.03], "<F>": [-0.01, -2.5, -0.04]}
    lp = http_backend(_echo_handler(top, per_char)).score_choices(prompt(), CHOICES)
    assert lp.logprobs["<T>"] == pytest.approx(-0.24)
    assert lp.logprobs["<F>"] == pytest.approx(-2.55)
    assert lp.floored == ()
    assert lp.cached_tokens == 0 and lp.prompt_tokens == 41  # usage of the primary call


def test_http_top_logprobs_only_floors_both(fixtures_dir):
    top = json.loads((fixtures_dir / "http_multitoken_top.json").read_text())
    lp = http_backend(lambda r: httpx.Response(200, json=top), scoring_path="top_logprobs").score_choices(prompt(), CHOICES)
    assert lp.logprobs == {"<T>": -100.0, "<F>": -100.0}


def test_http_echo_path(fixtures_dir):
    per_char = {"<T>": [-0.5, -0.5, -0.5], "<F>": [-1.0, -1.0, -1.0]}
    lp = http_backend(_echo_handler(None, per_char), scoring_path="echo").score_choices(prompt(), CHOICES)
    assert lp.logprobs == pytest.approx({"<T>": -1.5, "<F>": -3.0})
    assert lp.cached_tokens == 12


def test_http_missing_logprobs_is_config_error(fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_no_logprobs.json").read_text())
    with pytest.raises(BackendConfigError, match="logprobs"):
        http_backend(lambda r: httpx.Response(200, json=recorded)).score_choices(prompt(), CHOICES)


def test_http_refusal_names_capability_and_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, json={"error": {"message": "logprobs is not supported for this model"}})

    with pytest.raises(BackendConfigError, match="logprobs"):
        http_backend(handler).score_choices(prompt(), CHOICES)
    assert len(calls) == 1


def test_http_transport_error_retried_three_times():
    calls = []
    delays = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("connection refused", request=request)

    config = BackendConfig(kind="http", endpoint_url="http://llm.test")
    backend = HttpCompletionsBackend(config, client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=delays.append)
    with pytest.raises(RetryableBackendError) as info:
        backend.score_choices(prompt(), CHOICES)
    assert info.value.attempts == 3 and len(calls) == 3
    assert delays == [0.5, 1.0]  # exponential backoff


def test_http_timeout_retried_then_succeeds(fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_top_logprobs_missing_false.json").read_text())
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            raise httpx.ReadTimeout("slow", request=request)
        return httpx.Response(200, json=recorded)

    lp = http_backend(handler).score_choices(prompt(), CHOICES)
    assert len(calls) == 3 and lp.logprobs["<T>"] < 0


def test_http_other_4xx_is_plain_error():
    with pytest.raises(BackendError) as info:
        http_backend(lambda r: httpx.Response(404, text="no such model")).score_choices(prompt(), CHOICES)
    assert not isinstance(info.value, (RetryableBackendError, BackendConfigError))


def test_http_prime_and_health(fixtures_dir):
    recorded = json.loads((fixtures_dir / "http_top_logprobs_missing_false.json").read_text())

    def handler(request):
        if request.url.path.endswith("/models"):
            return httpx.Response(200, json={"data": [{"id": "qwen2-7b-instruct"}]})
        return httpx.Response(200, json=recorded)

    b = http_backend(handler)
    assert b.prime(RenderedPrompt("document: Reflection of feelings\n", 33, "r", "")) == 41
    assert b.health()["status"] == "ok"
    assert http_backend(lambda r: httpx.Response(500)).health()["status"] != "ok"
