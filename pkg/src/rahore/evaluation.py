"""Recall@k / MRR, the I_bc x order ablation grid, ratio sweeps and latency stats."""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .backend import Backend
from .datasets import PairSpec, PairStats, RetrievalDataset, generate_pairs, pair_stats
from .engine import RetrievalEngine, RetrievalResult
from .prompt import Order, PromptTemplate
from .scoring import Normalization


class AblationError(RuntimeError):
    pass


class ExcludedQueryError(ValueError):
    """Query has no gold documents and cannot be scored by a recall/MRR metric."""


def _check(gold: Iterable[str], k: int | None = None) -> frozenset[str]:
    gold = frozenset(gold)
    if not gold:
        raise ExcludedQueryError("query has no gold documents")
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    return gold


def _ids(result: RetrievalResult | Sequence[str]) -> Sequence[str]:
    return result.doc_ids if isinstance(result, RetrievalResult) else result


def recall_at_k(result: RetrievalResult | Sequence[str], gold: Iterable[str], k: int) -> float:
    """1.0 if any gold document sits in the top ``k`` ranks (hit-rate convention)."""
    gold = _check(gold, k)
    return 1.0 if any(d in gold for d in _ids(result)[:k]) else 0.0


def mrr(result: RetrievalResult | Sequence[str], gold: Iterable[str]) -> float:
    """Reciprocal rank of the best-ranked gold document (0 if none is ranked)."""
    gold = _check(gold)
    for rank, d in enumerate(_ids(result), start=1):
        if d in gold:
            return 1.0 / rank
    return 0.0


def latency_stats(values: Sequence[float]) -> dict[str, float]:
    if not values:
        return {}
    ordered = sorted(values)

    def pct(p: float) -> float:
        # nearest-rank percentile
        idx = max(0, min(len(ordered) - 1, int(-(-p * len(ordered) // 100)) - 1))
        return ordered[idx]

    return {
        "mean": statistics.fmean(ordered),
        "p50": pct(50),
        "p90": pct(90),
        "p99": pct(99),
        "max": ordered[-1],
    }


@dataclass
class EvalReport:
    metrics: dict[str, float]
    n_queries: int
    n_excluded: int
    config: dict[str, Any]
    latency: dict[str, float] = field(default_factory=dict)
    k_list: tuple[int, ...] = ()

    def metric_names(self) -> list[str]:
        return [f"R@{k}" for k in self.k_list] + ["mrr"]

    @property
    def percentages(self) -> dict[str, float]:
        return {name: 100.0 * v for name, v in self.metrics.items()}

    @property
    def rt_ms(self) -> float | None:
        return 1000.0 * self.latency["mean"] if self.latency else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "metrics": self.metrics,
            "metrics_pct": self.percentages,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "latency": self.latency,
        }


def evaluate_results(
    results: Sequence[RetrievalResult],
    gold: Mapping[str, Iterable[str]],
    k_list: Sequence[int],
    config: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Aggregate per-query metrics, folding in query-id order."""
    k_list = tuple(sorted(set(k_list)))
    sums = {f"R@{k}": 0.0 for k in k_list}
    sums["mrr"] = 0.0
    n = excluded = 0
    for r in sorted(results, key=lambda r: r.query_id):
        try:
            g = _check(gold.get(r.query_id, ()))
        except ExcludedQueryError:
            excluded += 1
            continue
        n += 1
        for k in k_list:
            sums[f"R@{k}"] += recall_at_k(r, g, k)
        sums["mrr"] += mrr(r, g)
    metrics = {name: (total / n if n else 0.0) for name, total in sums.items()}
    latency = latency_stats([r.total_latency for r in results])
    return EvalReport(metrics, n, excluded, dict(config or {}), latency, k_list)


def template_flags(t: PromptTemplate) -> dict[str, Any]:
    return {"ibc": t.has_choice_instruction, "doc_first": t.order is Order.DOC_FIRST}


def evaluate(
    engine: RetrievalEngine,
    ds: RetrievalDataset,
    k_list: Sequence[int],
    warm: bool | None = None,
) -> EvalReport:
    """Retrieve for every query in ``ds`` and score against its gold set.

    ``warm=None`` primes the prefix cache whenever the template is
    document-first.
    """
    if warm is None:
        warm = engine.template.order is Order.DOC_FIRST
    if warm:
        engine.warm_cache(ds.corpus)
    results = engine.retrieve_many(list(ds.queries), ds.corpus) if ds.queries else []
    config = {
        **template_flags(engine.template),
        "normalization": engine.normalization.value,
        "warm": bool(warm),
        "split": ds.split.value,
    }
    return evaluate_results(results, {q.id: q.gold_doc_ids for q in ds.queries}, k_list, config)


ABLATION_ROWS: tuple[tuple[bool, Order], ...] = (
    (False, Order.QUERY_FIRST),
    (False, Order.DOC_FIRST),
    (True, Order.QUERY_FIRST),
    (True, Order.DOC_FIRST),
)


def ablation_grid(
    ds: RetrievalDataset,
    backend: Backend,
    k_list: Sequence[int],
    template: PromptTemplate | None = None,
    normalization: Normalization | str = Normalization.PROB_SOFTMAX,
    role_labels: Mapping[str, str] | None = None,
) -> list[EvalReport]:
    """Four runs over {I_bc absent, present} x {query-first, document-first}.

    Document-first rows are evaluated with a primed prefix cache; query-first
    rows cannot be primed and run cold.
    """
    base = template or PromptTemplate()
    rows = []
    for ibc, order in ABLATION_ROWS:
        engine = RetrievalEngine(backend, base.variant(choice_instruction=ibc, order=order), normalization, role_labels)
        try:
            rows.append(evaluate(engine, ds, k_list))
        except Exception as exc:
            raise AblationError(f"ablation config ibc={ibc}, order={order.value} failed: {exc}") from exc
    return rows


@dataclass
class SweepRow:
    stats: PairStats
    reports: dict[str, EvalReport] = field(default_factory=dict)


def sensitivity_sweep(
    ds: RetrievalDataset,
    ratios: Sequence[PairSpec],
    template: PromptTemplate | None = None,
    backends: Mapping[str, Mapping[str, Backend]] | None = None,
    k_list: Sequence[int] = (1, 3),
    role_labels: Mapping[str, str] | None = None,
) -> list[SweepRow]:
    """Pair counts and export sizes per ratio.

    Metric comparison needs one fine-tuned checkpoint per ratio; pass them as
    ``backends[ratio_label][checkpoint_name]`` and each is evaluated on ``ds``.
    """
    t = template or PromptTemplate()
    rows = []
    for spec in ratios:
        pairs = generate_pairs(ds, spec, t)
        row = SweepRow(pair_stats(pairs, spec, t, role_labels))
        for name, backend in ((backends or {}).get(spec.label) or {}).items():
            row.reports[name] = evaluate(RetrievalEngine(backend, t, role_labels=role_labels), ds, k_list)
        rows.append(row)
    return rows


# -- formatting ------------------------------------------------------------


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def report_rows(reports: Sequence[EvalReport], percent: bool = True, mrr_label: str = "mrr") -> tuple[list[str], list[list[str]]]:
    names = reports[0].metric_names() if reports else ["mrr"]
    header = ["I_bc", "D=>Q"] + [mrr_label if n == "mrr" else n for n in names] + ["RT(ms)", "n", "excluded"]
    body = []
    for r in reports:
        values = r.percentages if percent else r.metrics
        fmt = "{:.1f}" if percent else "{:.4f}"
        rt = r.rt_ms
        body.append(
            [_mark(r.config.get("ibc", True)), _mark(r.config.get("doc_first", True))]
            + [fmt.format(values[n]) for n in names]
            + ["-" if rt is None else f"{rt:.2f}", str(r.n_queries), str(r.n_excluded)]
        )
    return header, body


def format_reports(reports: Sequence[EvalReport], fmt: str = "table", mrr_label: str = "mrr", percent: bool = True) -> str:
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    header, body = report_rows(reports, percent, mrr_label)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in body)
    return "\n".join(lines) + "\n"


def format_sweep(rows: Sequence[SweepRow], fmt: str = "table") -> str:
    records = [
        {
            "ratio": r.stats.ratio,
            "queries": r.stats.queries,
            "positives": r.stats.positives,
            "negatives": r.stats.negatives,
            "pairs": r.stats.total,
            "sft_bytes": r.stats.export_bytes.get("sft", 0),
            "dpo_bytes": r.stats.export_bytes.get("dpo", 0),
            "prompt_chars_max": r.stats.prompt_chars_max,
        }
        for r in rows
    ]
    if fmt == "json":
        return json.dumps(records, indent=2)
    header = list(records[0]) if records else []
    buf = io.StringIO()
    if fmt == "csv":
        writer = csv.DictWriter(buf, header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        return buf.getvalue()
    for rec in [dict(zip(header, header))] + records:
        buf.write("  ".join(str(rec[h]).rjust(max(len(h), 8)) for h in header) + "\n")
    return buf.getvalue()
