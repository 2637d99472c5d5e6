"""Pointwise retrieval over a whole corpus, with cache-aware call scheduling."""

from __future__ import annotations

import json
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

from .backend import Backend, BackendError, ChoiceLogProbs, whitespace_tokens
from .corpus import Corpus, Document, Query, flatten_query
from .prompt import Order, PromptTemplate, RenderedPrompt, render_document_prefix, render_prompt
from .scoring import Normalization, RelevanceScore, relevance, sort_key


class PartialRetrievalError(BackendError):
    """Some documents could not be scored; a ranking over the rest would be misleading."""

    def __init__(self, query_id: str, unscored: Sequence[str], causes: Mapping[str, Exception]):
        self.query_id = query_id
        self.unscored = list(unscored)
        self.causes = dict(causes)
        first = next(iter(self.causes.values()), None)
        super().__init__(f"query {query_id!r}: {len(self.unscored)} document(s) unscored {self.unscored}: {first}")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredDocument:
    doc_id: str
    score: RelevanceScore
    rank: int
    logprobs: ChoiceLogProbs | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "s_true": self.score.s_true,
            "s_false": self.score.s_false,
            "s_rel": self.score.s_rel,
            "rank": self.rank,
        }


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[ScoredDocument, ...]
    k: int | None = None

    @property
    def top(self) -> tuple[ScoredDocument, ...]:
        return self.ranked if self.k is None else self.ranked[: self.k]

    @property
    def doc_ids(self) -> list[str]:
        return [s.doc_id for s in self.ranked]

    @property
    def total_latency(self) -> float:
        return sum(s.logprobs.latency for s in self.ranked if s.logprobs)

    @property
    def cached_tokens(self) -> int:
        return sum(s.logprobs.cached_tokens for s in self.ranked if s.logprobs)

    def timing(self) -> dict[str, Any]:
        per_doc = {s.doc_id: s.logprobs for s in self.ranked if s.logprobs}
        return {
            "total_latency": self.total_latency,
            "per_document_latency": {d: lp.latency for d, lp in per_doc.items()},
            "cached_tokens": {d: lp.cached_tokens for d, lp in per_doc.items()},
            "prompt_tokens": {d: lp.prompt_tokens for d, lp in per_doc.items()},
            "total_cached_tokens": self.cached_tokens,
        }

    def to_dict(self, top_only: bool = False) -> dict[str, Any]:
        ranked = self.top if top_only else self.ranked
        return {
            "query_id": self.query_id,
            "ranking": [s.to_dict() for s in ranked],
            "timing": self.timing(),
        }

    def to_json(self, top_only: bool = False) -> str:
        return json.dumps(self.to_dict(top_only), ensure_ascii=False, sort_keys=True)


@dataclass
class LedgerEntry:
    prefix_token_estimate: int
    warm: bool
    last_used: float
    observed_cached_tokens: int = 0


class CacheLedger:
    """What the engine believes is resident in the backend's prefix cache."""

    def __init__(self, ttl: float | None = None, clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self.clock = clock
        self._entries: dict[str, LedgerEntry] = {}
        self._lock = threading.Lock()

    def mark_warm(self, doc_id: str, prefix_tokens: int) -> None:
        with self._lock:
            self._entries[doc_id] = LedgerEntry(prefix_tokens, prefix_tokens > 0, self.clock())

    def touch(self, doc_id: str, cached_tokens: int) -> None:
        with self._lock:
            entry = self._entries.get(doc_id)
            if entry is not None:
                entry.last_used = self.clock()
                entry.observed_cached_tokens = cached_tokens

    def expire(self) -> list[str]:
        """Mark entries idle for longer than the TTL as cold; return their ids."""
        if self.ttl is None:
            return []
        now = self.clock()
        expired = []
        with self._lock:
            for doc_id, entry in self._entries.items():
                if entry.warm and now - entry.last_used > self.ttl:
                    entry.warm = False
                    expired.append(doc_id)
        return expired

    def __getitem__(self, doc_id: str) -> LedgerEntry:
        return self._entries[doc_id]

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def warm_ids(self) -> list[str]:
        self.expire()
        with self._lock:
            return [d for d, e in self._entries.items() if e.warm]

    def summary(self) -> dict[str, Any]:
        self.expire()
        with self._lock:
            return {
                "documents": len(self._entries),
                "warm": sum(e.warm for e in self._entries.values()),
                "prefix_tokens": sum(e.prefix_token_estimate for e in self._entries.values()),
                "entries": {
                    d: {"prefix_token_estimate": e.prefix_token_estimate, "warm": e.warm}
                    for d, e in self._entries.items()
                },
            }


@dataclass(frozen=True)
class ExecutionPlan:
    calls: tuple[tuple[str, str], ...]  # (query_id, doc_id)
    max_concurrent: int = 1

    def __len__(self) -> int:
        return len(self.calls)

    def waves(self) -> list[tuple[tuple[str, str], ...]]:
        n = self.max_concurrent
        return [self.calls[i : i + n] for i in range(0, len(self.calls), n)]


def schedule(
    queries: Sequence[Query],
    corpus: Corpus,
    order: Order | str = Order.DOC_FIRST,
    max_concurrent: int = 1,
) -> ExecutionPlan:
    """Document-major for document-first prompts so each prefix is decoded once; query-major otherwise."""
    if not queries:
        raise ValueError("schedule needs at least one query")
    if Order(order) is Order.DOC_FIRST:
        calls = tuple((q.id, d.id) for d in corpus for q in queries)
    else:
        calls = tuple((q.id, d.id) for q in queries for d in corpus)
    return ExecutionPlan(calls, max_concurrent)


class RetrievalEngine:
    def __init__(
        self,
        backend: Backend,
        template: PromptTemplate | None = None,
        normalization: Normalization | str = Normalization.PROB_SOFTMAX,
        role_labels: Mapping[str, str] | None = None,
        cache_ttl: float | None = None,
        scheduling: Order | str | None = None,
    ):
        self.backend = backend
        self.scheduling = Order(scheduling) if scheduling is not None else None
        self.template = template or PromptTemplate()
        self.normalization = Normalization(normalization)
        self.role_labels = dict(role_labels or {})
        self.ledger = CacheLedger(ttl=cache_ttl)

    def render(self, query: Query, doc: Document) -> RenderedPrompt:
        return render_prompt(self.template, doc, flatten_query(query, self.role_labels), query.id)

    def _call(self, query: Query, doc: Document) -> ChoiceLogProbs:
        lp = self.backend.score_choices(self.render(query, doc), self.template.choices)
        self.ledger.touch(doc.id, lp.cached_tokens)
        return lp

    def score(self, query: Query, doc: Document) -> RelevanceScore:
        lp = self._call(query, doc)
        return relevance(lp.logprobs[self.template.true_token], lp.logprobs[self.template.false_token], self.normalization)

    def _rank(self, query: Query, corpus: Corpus, logprobs: Mapping[str, ChoiceLogProbs], k: int | None) -> RetrievalResult:
        t, f = self.template.true_token, self.template.false_token
        scored = []
        for doc in corpus:
            lp = logprobs[doc.id]
            scored.append((doc.id, relevance(lp.logprobs[t], lp.logprobs[f], self.normalization), lp))
        # Stable sort keeps corpus order among ties.
        scored.sort(key=lambda item: sort_key(item[1]))
        ranked = tuple(ScoredDocument(d, s, i, lp) for i, (d, s, lp) in enumerate(scored, start=1))
        return RetrievalResult(query.id, ranked, k)

    def _execute(self, plan: ExecutionPlan, queries: Mapping[str, Query], corpus: Corpus):
        results: dict[tuple[str, str], ChoiceLogProbs] = {}
        failures: dict[tuple[str, str], Exception] = {}

        def run(call: tuple[str, str]) -> None:
            qid, did = call
            try:
                results[call] = self._call(queries[qid], corpus.get(did))
            except BackendError as exc:
                failures[call] = exc

        if self.backend.parallel and plan.max_concurrent > 1:
            with ThreadPoolExecutor(max_workers=plan.max_concurrent) as pool:
                list(pool.map(run, plan.calls))
        else:
            for call in plan.calls:
                run(call)
        return results, failures

    def retrieve_many(
        self,
        queries: Sequence[Query],
        corpus: Corpus,
        k: int | None = None,
        order: Order | str | None = None,
    ) -> list[RetrievalResult]:
        """Score every (query, document) pair and rank per query.

        ``order`` picks the scheduling policy (document-major or query-major)
        and defaults to the engine's policy, then the template's segment
        order. It affects latency only, never the ranking.
        """
        if k is not None and k < 1:
            raise ValueError("k must be >= 1")
        if not queries:
            return []
        plan = schedule(
            queries,
            corpus,
            order or self.scheduling or self.template.order,
            self.backend.max_concurrent_requests if self.backend.parallel else 1,
        )
        by_id = {q.id: q for q in queries}
        if len(by_id) != len(queries):
            raise ValueError("query ids must be unique within a batch")
        results, failures = self._execute(plan, by_id, corpus)
        out = []
        for q in queries:
            failed = {did: exc for (qid, did), exc in failures.items() if qid == q.id}
            if failed:
                unscored = [d.id for d in corpus if d.id in failed]
                raise PartialRetrievalError(q.id, unscored, failed)
            out.append(self._rank(q, corpus, {d.id: results[(q.id, d.id)] for d in corpus}, k))
        return out

    def retrieve(self, query: Query, corpus: Corpus, k: int | None = None) -> RetrievalResult:
        return self.retrieve_many([query], corpus, k)[0]

    def warm_cache(self, corpus: Corpus) -> CacheLedger:
        if self.template.order is not Order.DOC_FIRST:
            raise UsageError("warm_cache needs document-first (D=>Q) prompts; query-first prompts share no document prefix")
        for doc in corpus:
            tokens = self.backend.prime(render_document_prefix(self.template, doc))
            self.ledger.mark_warm(doc.id, tokens)
        return self.ledger

    def document_prefix_tokens(self, doc: Document) -> int:
        """Mock-tokenizer size of the document segment (0 for query-first prompts)."""
        if self.template.order is not Order.DOC_FIRST:
            return 0
        return whitespace_tokens(render_document_prefix(self.template, doc).text)


_PLACEHOLDER = re.compile(r"\{(strategy|query)\}")


def augment_generation_prompt(
    q: Query,
    top: ScoredDocument | str,
    corpus: Corpus,
    gen_template: str,
    role_labels: Mapping[str, str] | None = None,
) -> str:
    """Fill ``{strategy}`` and ``{query}`` in a generator prompt with the retrieved document.

    Any other brace text passes through untouched.
    """
    doc_id = top if isinstance(top, str) else top.doc_id
    values = {"strategy": corpus.get(doc_id).text, "query": flatten_query(q, role_labels)}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], gen_template)


def write_results_jsonl(results: Iterable[RetrievalResult], path, top_only: bool = False) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(r.to_json(top_only) + "\n")
            n += 1
    return n
