"""Wiring shared by the CLI and the HTTP service, so both take one engine path."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from .backend import Backend, make_backend
from .config import AppConfig, ConfigError
from .corpus import Corpus, Query
from .datasets import RetrievalDataset, load_dataset
from .engine import RetrievalEngine
from .prompt import Order


@dataclass
class Runtime:
    config: AppConfig
    corpus: Corpus
    engine: RetrievalEngine
    queries: list[Query] = field(default_factory=list)

    @property
    def backend(self) -> Backend:
        return self.engine.backend

    def dataset(self) -> RetrievalDataset:
        return RetrievalDataset(self.corpus, tuple(self.queries))


def load_corpus(config: AppConfig) -> Corpus:
    if config.paths.corpus is None:
        raise ConfigError("no corpus path configured (paths.corpus, $RAHORE_CORPUS or --corpus)")
    return Corpus.from_jsonl(config.paths.corpus)


def build_backend(config: AppConfig, gold: Mapping[str, Sequence[str]] | None = None) -> Backend:
    t = config.prompt_template()
    return make_backend(config.backend, gold, t.true_token, t.false_token)


def build_runtime(
    config: AppConfig,
    extra_queries: Sequence[Query] = (),
    load_query_file: bool = True,
) -> Runtime:
    """Load corpus (and queries, when configured) and construct backend + engine.

    The oracle backend's gold table comes from the loaded queries plus any
    ``extra_queries`` that carry gold ids.
    """
    corpus = load_corpus(config)
    queries: list[Query] = []
    if load_query_file and config.paths.queries is not None:
        ds = load_dataset(config.paths.corpus, config.paths.queries)
        corpus, queries = ds.corpus, list(ds.queries)
    gold = {q.id: sorted(q.gold_doc_ids) for q in [*queries, *extra_queries] if q.gold_doc_ids}
    backend = build_backend(config, gold)
    engine = RetrievalEngine(
        backend,
        config.prompt_template(),
        config.normalization,
        config.role_labels,
        config.cache_ttl,
        scheduling_order(config),
    )
    return Runtime(config, corpus, engine, queries)


def scheduling_order(config: AppConfig) -> Order | None:
    return {"auto": None, "document_major": Order.DOC_FIRST, "query_major": Order.QUERY_FIRST}[config.scheduling]
