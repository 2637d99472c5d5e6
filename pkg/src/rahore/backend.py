"""LLM backends that return log-probabilities for fixed answer strings.

Three kinds share one interface:

* :class:`MockBackend` hashes (seed, prompt, choice) into a log-probability and
  charges latency with a linear per-token model that honours a simulated
  prefix cache.
* :class:`OracleMockBackend` knows the gold documents of each query and answers
  accordingly, so end-to-end metrics are exact.
* :class:`HttpCompletionsBackend` talks to an OpenAI-compatible
  ``/v1/completions`` endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
import time
from abc import ABC, abstractmethod
from collections import OrderedDict
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import httpx
from pydantic import BaseModel, ConfigDict, Field

from .prompt import RenderedPrompt

logger = logging.getLogger(__name__)

LOG_P_HIGH = math.log(0.9)
LOG_P_LOW = math.log(0.1)


class BackendError(RuntimeError):
    """Backend call failed."""


class RetryableBackendError(BackendError):
    """Transport failure or timeout that survived every retry."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class BackendConfigError(BackendError):
    """The backend lacks a capability the scorer needs (e.g. logprobs)."""


class BackendConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["mock", "oracle_mock", "http"] = "mock"
    endpoint_url: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    model: str = "default"
    request_timeout: float = Field(30.0, gt=0)
    logprob_floor: float = Field(-100.0, lt=-10)
    max_concurrent_requests: int = Field(4, ge=1)
    top_logprobs: int = Field(20, ge=1)
    # auto: top-k alternatives first, echo scoring when no choice string is among them
    scoring_path: Literal["auto", "top_logprobs", "echo"] = "auto"
    max_attempts: int = Field(3, ge=1)
    backoff_base: float = Field(0.5, ge=0)
    # mock kinds only
    seed: int = 0
    latency_per_token: float = Field(0.0005, ge=0)
    latency_fixed: float = Field(0.005, ge=0)
    cache_capacity: int | None = Field(None, ge=1)
    auto_cache: bool = True


@dataclass(frozen=True)
class ChoiceLogProbs:
    logprobs: dict[str, float]
    prompt_tokens: int = 0
    cached_tokens: int = 0
    latency: float = 0.0  # seconds
    floored: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.cached_tokens <= max(self.prompt_tokens, 0):
            raise ValueError("cached_tokens must lie in [0, prompt_tokens]")


class Backend(ABC):
    # False means calls must run one at a time in plan order (stateful cache model).
    parallel = False
    max_concurrent_requests = 1

    @abstractmethod
    def score_choices(self, prompt: RenderedPrompt, choices: Sequence[str]) -> ChoiceLogProbs: ...

    @abstractmethod
    def prime(self, prefix: RenderedPrompt) -> int:
        """Push a document prefix through the backend so it lands in the prefix cache.

        Returns the number of prompt tokens the prefix occupies.
        """

    def health(self) -> dict[str, Any]:
        return {"status": "ok", "kind": type(self).__name__}

    def close(self) -> None:
        pass


def _check_choices(choices: Sequence[str]) -> None:
    if not choices:
        raise ValueError("choices must be non-empty")
    if len(set(choices)) != len(choices):
        raise ValueError("choices must be distinct")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class LatencyModel:
    """latency = per_token * (prompt_tokens - warm_tokens) + fixed, in seconds."""

    per_token: float = 0.0005
    fixed: float = 0.005

    def __call__(self, prompt_tokens: int, warm_prefix_tokens: int = 0) -> float:
        if not 0 <= warm_prefix_tokens <= prompt_tokens:
            raise ValueError(f"warm_prefix_tokens={warm_prefix_tokens} outside [0, {prompt_tokens}]")
        return self.per_token * (prompt_tokens - warm_prefix_tokens) + self.fixed


@dataclass
class PrefixCacheModel:
    """LRU set of cached prompt prefixes (text -> token count)."""

    capacity: int | None = None
    _entries: OrderedDict[str, int] = field(default_factory=OrderedDict)

    def lookup(self, prefix: str) -> int:
        tokens = self._entries.get(prefix)
        if tokens is None:
            return 0
        self._entries.move_to_end(prefix)
        return tokens

    def insert(self, prefix: str, tokens: int) -> None:
        self._entries[prefix] = tokens
        self._entries.move_to_end(prefix)
        if self.capacity is not None:
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


class MockBackend(Backend):
    def __init__(
        self,
        seed: int = 0,
        latency: LatencyModel | None = None,
        cache_capacity: int | None = None,
        auto_cache: bool = True,
    ):
        self.seed = seed
        self.latency_model = latency or LatencyModel()
        self.auto_cache = auto_cache
        self.cache = PrefixCacheModel(cache_capacity)
        self._lock = threading.Lock()

    def _logprob(self, prompt: RenderedPrompt, choice: str) -> float:
        h = hashlib.blake2b(f"{self.seed}\x00{prompt.text}\x00{choice}".encode(), digest_size=8)
        u = int.from_bytes(h.digest(), "big") / 2**64
        return -20.0 * u

    def mock_latency(self, prompt: RenderedPrompt, warm_prefix_tokens: int) -> float:
        return self.latency_model(whitespace_tokens(prompt.text), warm_prefix_tokens)

    def score_choices(self, prompt: RenderedPrompt, choices: Sequence[str]) -> ChoiceLogProbs:
        _check_choices(choices)
        total = whitespace_tokens(prompt.text)
        warm = 0
        if prompt.prefix_len > 0:
            prefix = prompt.prefix
            with self._lock:
                warm = self.cache.lookup(prefix)
                if not warm and self.auto_cache:
                    self.cache.insert(prefix, whitespace_tokens(prefix))
        return ChoiceLogProbs(
            logprobs={c: self._logprob(prompt, c) for c in choices},
            prompt_tokens=total,
            cached_tokens=warm,
            latency=self.latency_model(total, warm),
        )

    def prime(self, prefix: RenderedPrompt) -> int:
        tokens = whitespace_tokens(prefix.text)
        with self._lock:
            self.cache.insert(prefix.text, tokens)
        return tokens

    def reset_cache(self) -> None:
        with self._lock:
            self.cache.clear()


class OracleMockBackend(MockBackend):
    """Answers from an injected ``query_id -> gold doc ids`` table, never from the text."""

    def __init__(self, gold: Mapping[str, Sequence[str]], true_token: str = "<T>", false_token: str = "<F>", **kwargs):
        super().__init__(**kwargs)
        self.gold = {qid: frozenset(ids) for qid, ids in gold.items()}
        self.true_token = true_token
        self.false_token = false_token

    def _logprob(self, prompt: RenderedPrompt, choice: str) -> float:
        is_gold = prompt.doc_id in self.gold.get(prompt.query_id, ())
        if choice == self.true_token:
            return LOG_P_HIGH if is_gold else LOG_P_LOW
        if choice == self.false_token:
            return LOG_P_LOW if is_gold else LOG_P_HIGH
        return super()._logprob(prompt, choice)


class HttpCompletionsBackend(Backend):
    parallel = True

    def __init__(
        self,
        config: BackendConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not config.endpoint_url:
            raise BackendConfigError("http backend needs endpoint_url")
        self.config = config
        self.max_concurrent_requests = config.max_concurrent_requests
        base = config.endpoint_url.rstrip("/")
        self.base_url = base if base.endswith("/v1") else base + "/v1"
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=config.request_timeout)
        self.client.headers.update(headers)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_concurrent_requests)

    def close(self) -> None:
        self.client.close()

    # -- transport -------------------------------------------------------

    def _post(self, payload: dict[str, Any]) -> tuple[dict[str, Any], float]:
        url = f"{self.base_url}/completions"
        last: Exception | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            start = time.perf_counter()
            try:
                with self._slots:
                    resp = self.client.post(url, json=payload, timeout=self.config.request_timeout)
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last = exc
            else:
                elapsed = time.perf_counter() - start
                if resp.status_code in (502, 503, 504):
                    last = BackendError(f"HTTP {resp.status_code} from {url}")
                elif resp.status_code >= 400:
                    self._raise_refusal(resp)
                else:
                    return resp.json(), elapsed
            if attempt < self.config.max_attempts:
                delay = self.config.backoff_base * 2 ** (attempt - 1)
                logger.warning("backend call failed (%s); retrying in %.2fs", last, delay)
                self._sleep(delay)
        raise RetryableBackendError(f"backend request to {url} failed: {last}", self.config.max_attempts)

    @staticmethod
    def _raise_refusal(resp: httpx.Response) -> None:
        body = resp.text
        lowered = body.lower()
        for capability in ("logprobs", "echo"):
            if capability in lowered:
                raise BackendConfigError(f"backend refused '{capability}' (HTTP {resp.status_code}): {body[:200]}")
        raise BackendError(f"backend returned HTTP {resp.status_code}: {body[:200]}")

    @staticmethod
    def _usage(data: Mapping[str, Any]) -> tuple[int, int]:
        usage = data.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens") or 0)
        details = usage.get("prompt_tokens_details") or {}
        cached = int(details.get("cached_tokens") or 0)
        return prompt_tokens, min(cached, prompt_tokens)

    @staticmethod
    def _logprobs_block(data: Mapping[str, Any]) -> Mapping[str, Any]:
        try:
            block = data["choices"][0].get("logprobs")
        except (KeyError, IndexError, TypeError, AttributeError):
            raise BackendError("malformed completions response: no choices") from None
        if not block:
            raise BackendConfigError("backend response carries no logprobs; enable the 'logprobs' capability")
        return block

    # -- scoring paths ---------------------------------------------------

    def _top_alternatives(self, prompt: RenderedPrompt, choices: Sequence[str]):
        data, elapsed = self._post(
            {
                "model": self.config.model,
                "prompt": prompt.text,
                "max_tokens": 1,
                "logprobs": self.config.top_logprobs,
                "temperature": 0,
            }
        )
        block = self._logprobs_block(data)
        top = (block.get("top_logprobs") or [None])[0]
        if not top:
            raise BackendConfigError("backend response has no top_logprobs; enable the 'logprobs' capability")
        found: dict[str, float] = {}
        for token, lp in top.items():
            key = token.strip()
            if key in choices and lp is not None:
                # Several surface forms (" <T>", "<T>") pool their probability.
                found[key] = _logaddexp(found[key], lp) if key in found else float(lp)
        return found, data, elapsed

    def _echo_logprob(self, prompt: RenderedPrompt, choice: str) -> tuple[float | None, dict, float]:
        full = prompt.text + choice
        data, elapsed = self._post(
            {
                "model": self.config.model,
                "prompt": full,
                "max_tokens": 1,
                "logprobs": 1,
                "echo": True,
                "temperature": 0,
            }
        )
        block = self._logprobs_block(data)
        tokens = block.get("tokens") or []
        token_lps = block.get("token_logprobs") or []
        offsets = block.get("text_offset")
        if offsets is None:
            offsets, pos = [], 0
            for tok in tokens:
                offsets.append(pos)
                pos += len(tok)
        start, end = len(prompt.text), len(full)
        total, hit = 0.0, False
        for tok, lp, off in zip(tokens, token_lps, offsets):
            # Tokens overlapping the appended choice span, generated tail excluded.
            if off < end and off + len(tok) > start and lp is not None:
                total += lp
                hit = True
        return (total if hit else None), data, elapsed

    def score_choices(self, prompt: RenderedPrompt, choices: Sequence[str]) -> ChoiceLogProbs:
        _check_choices(choices)
        path = self.config.scoring_path
        found: dict[str, float] = {}
        latency = 0.0
        prompt_tokens = cached = 0
        use_echo = path == "echo"
        if path in ("auto", "top_logprobs"):
            found, data, latency = self._top_alternatives(prompt, choices)
            prompt_tokens, cached = self._usage(data)
            # No choice resolved as a single alternative: likely multi-token choice strings.
            use_echo = path == "auto" and not found
        if use_echo:
            found = {}
            for choice in choices:
                lp, data, elapsed = self._echo_logprob(prompt, choice)
                latency += elapsed
                if lp is not None:
                    found[choice] = lp
                if not prompt_tokens:
                    prompt_tokens, cached = self._usage(data)
        floor = self.config.logprob_floor
        floored = tuple(c for c in choices if c not in found)
        logprobs = {c: min(found.get(c, floor), 0.0) for c in choices}
        return ChoiceLogProbs(logprobs, prompt_tokens, cached, latency, floored)

    def prime(self, prefix: RenderedPrompt) -> int:
        data, _ = self._post(
            {"model": self.config.model, "prompt": prefix.text, "max_tokens": 1, "temperature": 0}
        )
        tokens, _ = self._usage(data)
        return tokens or whitespace_tokens(prefix.text)

    def health(self) -> dict[str, Any]:
        try:
            resp = self.client.get(f"{self.base_url}/models", timeout=self.config.request_timeout)
        except httpx.HTTPError as exc:
            return {"status": "unreachable", "kind": "http", "error": str(exc)}
        status = "ok" if resp.status_code == 200 else f"http {resp.status_code}"
        return {"status": status, "kind": "http", "endpoint": self.base_url}


def _logaddexp(a: float, b: float) -> float:
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def make_backend(
    config: BackendConfig,
    gold: Mapping[str, Sequence[str]] | None = None,
    true_token: str = "<T>",
    false_token: str = "<F>",
) -> Backend:
    latency = LatencyModel(config.latency_per_token, config.latency_fixed)
    mock_kwargs = dict(
        seed=config.seed, latency=latency, cache_capacity=config.cache_capacity, auto_cache=config.auto_cache
    )
    if config.kind == "mock":
        return MockBackend(**mock_kwargs)
    if config.kind == "oracle_mock":
        return OracleMockBackend(gold or {}, true_token=true_token, false_token=false_token, **mock_kwargs)
    return HttpCompletionsBackend(config)
