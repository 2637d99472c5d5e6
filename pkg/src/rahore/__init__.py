"""Generative binary-choice retrieval: rank documents by an LLM's <T>/<F> answer confidence."""

from .backend import (
    Backend,
    BackendConfig,
    BackendConfigError,
    BackendError,
    ChoiceLogProbs,
    HttpCompletionsBackend,
    LatencyModel,
    MockBackend,
    OracleMockBackend,
    RetryableBackendError,
    make_backend,
)
from .corpus import Corpus, Document, Query, ValidationError, flatten_query, parse_dialogue
from .datasets import (
    ExportKind,
    Pair,
    PairSpec,
    RetrievalDataset,
    export_training,
    generate_pairs,
    load_dataset,
    split,
)
from .engine import (
    CacheLedger,
    ExecutionPlan,
    PartialRetrievalError,
    RetrievalEngine,
    RetrievalResult,
    ScoredDocument,
    augment_generation_prompt,
    schedule,
)
from .evaluation import EvalReport, ablation_grid, evaluate, mrr, recall_at_k, sensitivity_sweep
from .prompt import Order, PromptTemplate, RenderedPrompt, render_prompt
from .scoring import Direction, Normalization, RelevanceScore, rank_direction, relevance

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendConfig",
    "BackendConfigError",
    "BackendError",
    "CacheLedger",
    "ChoiceLogProbs",
    "Corpus",
    "Direction",
    "Document",
    "EvalReport",
    "ExecutionPlan",
    "ExportKind",
    "HttpCompletionsBackend",
    "LatencyModel",
    "MockBackend",
    "Normalization",
    "OracleMockBackend",
    "Order",
    "Pair",
    "PairSpec",
    "PartialRetrievalError",
    "PromptTemplate",
    "Query",
    "RelevanceScore",
    "RenderedPrompt",
    "RetrievalDataset",
    "RetrievalEngine",
    "RetrievalResult",
    "RetryableBackendError",
    "ScoredDocument",
    "ValidationError",
    "ablation_grid",
    "augment_generation_prompt",
    "evaluate",
    "export_training",
    "flatten_query",
    "generate_pairs",
    "load_dataset",
    "make_backend",
    "mrr",
    "parse_dialogue",
    "rank_direction",
    "recall_at_k",
    "relevance",
    "render_prompt",
    "schedule",
    "sensitivity_sweep",
    "split",
]
