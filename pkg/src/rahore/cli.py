"""Command-line entry point: retrieve | eval | export | warm | bench | sweep | serve."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace

from .backend import BackendError
from .config import AppConfig, ConfigError, load_config
from .corpus import ValidationError, parse_dialogue
from .datasets import ExportError, ExportKind, PairSpec, RetrievalDataset, export_training, generate_pairs, split
from .engine import RetrievalEngine, UsageError
from .evaluation import ablation_grid, evaluate, format_reports, format_sweep, sensitivity_sweep
from .prompt import Order
from .runtime import Runtime, build_backend, build_runtime

log = logging.getLogger("rahore")


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return ks


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="YAML config file (default: $RAHORE_CONFIG)")
    g.add_argument("--corpus", help="corpus JSONL")
    g.add_argument("--queries", help="queries JSONL")
    g.add_argument("--backend", choices=["mock", "oracle_mock", "http"], help="backend kind")
    g.add_argument("--backend-url", help="OpenAI-compatible server base URL")
    g.add_argument("--model", help="model name sent to the backend")
    g.add_argument("--normalization", choices=["prob_softmax", "literal_log_ratio"])
    g.add_argument("--seed", type=int, help="seed for mock scores, splits and negative sampling")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rahore", description="Binary-choice LLM retrieval engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="rank the corpus for one query or a queries file")
    _common(p)
    p.add_argument("--query", help="dialogue text, e.g. 'user: I lost my job'")
    p.add_argument("--query-id", default="cli-query")
    p.add_argument("--gold", action="append", default=[], help="gold doc id for --query (repeatable)")
    p.add_argument("-k", type=int, help="number of documents to print")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", help="write JSONL results here instead of stdout")

    p = sub.add_parser("eval", help="Recall@k / MRR report, optionally the 4-row ablation grid")
    _common(p)
    p.add_argument("-k", type=_k_list, default=[1, 3], help="comma-separated k values, e.g. 1,3")
    p.add_argument("--ablate", action="store_true", help="run the I_bc x order grid")
    p.add_argument("--no-ibc", action="store_true", help="drop the binary-choice instruction line")
    p.add_argument("--query-first", action="store_true", help="put the query before the document")
    p.add_argument("--cold", action="store_true", help="skip the prefix-cache warm-up")
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--mrr-label", help="column name for MRR (e.g. p-MRR)")
    p.add_argument("--fractions", action="store_true", help="print fractions instead of percentages")

    p = sub.add_parser("export", help="write SFT or DPO training JSONL")
    _common(p)
    p.add_argument("--kind", choices=["sft", "dpo"], required=True)
    p.add_argument("--ratio", default="all", help="negatives per positive: all, 1, 3, 5, ...")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--train-fraction", type=float, default=0.9)

    p = sub.add_parser("warm", help="prime the backend prefix cache with every document")
    _common(p)

    p = sub.add_parser("bench", help="latency: cold vs warm, document-major vs query-major")
    _common(p)
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("sweep", help="pair counts and export sizes per positive:negative ratio")
    _common(p)
    p.add_argument("--ratios", default="all,1,3,5")
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")

    p = sub.add_parser("serve", help="run the HTTP service")
    _common(p)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> AppConfig:
    overrides = {
        "paths.corpus": args.corpus,
        "paths.queries": args.queries,
        "backend.kind": args.backend,
        "backend.endpoint_url": args.backend_url,
        "backend.model": args.model,
        "normalization": args.normalization,
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["backend.seed"] = args.seed
    if getattr(args, "host", None):
        overrides["service.host"] = args.host
    if getattr(args, "port", None):
        overrides["service.port"] = args.port
    return load_config(args.config, overrides)


def _dataset(rt: Runtime, which: str, fraction: float) -> RetrievalDataset:
    if rt.config.paths.queries is None:
        raise ConfigError("no queries path configured (paths.queries, $RAHORE_QUERIES or --queries)")
    ds = rt.dataset()
    if which == "all":
        return ds
    train, test = split(ds, fraction, rt.config.seed)
    return train if which == "train" else test


def cmd_retrieve(args, config: AppConfig, out=sys.stdout) -> int:
    extra = []
    if args.query:
        q = parse_dialogue(args.query, args.query_id, config.role_labels)
        q = replace(q, gold_doc_ids=frozenset(args.gold))
        extra.append(q)
    rt = build_runtime(config, extra_queries=extra, load_query_file=not args.query)
    queries = extra or rt.queries
    if not queries:
        raise ConfigError("nothing to retrieve: pass --query or configure a queries file")
    k = min(args.k or config.default_k, len(rt.corpus))
    results = rt.engine.retrieve_many(queries, rt.corpus, k)
    lines = [r.to_json(top_only=True) for r in results]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.writelines(line + "\n" for line in lines)
    elif args.format == "json":
        out.writelines(line + "\n" for line in lines)
    else:
        for r in results:
            out.write(f"# {r.query_id}  latency={1000 * r.total_latency:.2f}ms  cached_tokens={r.cached_tokens}\n")
            for s in r.top:
                out.write(f"{s.rank:>3}  {s.score.s_rel:.6f}  {s.doc_id}\n")
    return 0


def cmd_eval(args, config: AppConfig, out=sys.stdout) -> int:
    rt = build_runtime(config)
    ds = _dataset(rt, args.split, args.train_fraction)
    mrr_label = args.mrr_label or config.mrr_label
    if args.ablate:
        reports = ablation_grid(ds, rt.backend, args.k, rt.engine.template, config.normalization, config.role_labels)
    else:
        template = rt.engine.template
        if args.no_ibc:
            template = template.variant(choice_instruction=False)
        if args.query_first:
            template = template.variant(order=Order.QUERY_FIRST)
        engine = RetrievalEngine(rt.backend, template, config.normalization, config.role_labels, config.cache_ttl)
        warm = False if args.cold else None
        reports = [evaluate(engine, ds, args.k, warm=warm)]
    out.write(format_reports(reports, args.format, mrr_label, percent=not args.fractions))
    return 0


def cmd_export(args, config: AppConfig, out=sys.stdout) -> int:
    rt = build_runtime(config)
    ds = _dataset(rt, args.split, args.train_fraction)
    spec = PairSpec.parse(args.ratio, config.seed)
    pairs = generate_pairs(ds, spec, rt.engine.template)
    n = export_training(pairs, rt.engine.template, ExportKind(args.kind), args.out, config.role_labels)
    out.write(f"wrote {n} {args.kind} example(s) ({spec.label}) to {args.out}\n")
    return 0


def cmd_warm(args, config: AppConfig, out=sys.stdout) -> int:
    rt = build_runtime(config, load_query_file=False)
    ledger = rt.engine.warm_cache(rt.corpus)
    out.write(json.dumps(ledger.summary(), indent=2) + "\n")
    return 0


def cmd_bench(args, config: AppConfig, out=sys.stdout) -> int:
    """Each scenario gets a fresh backend so cache state does not leak between rows."""
    base = build_runtime(config)
    if not base.queries:
        raise ConfigError("bench needs a queries file")
    rows = []
    scenarios = [
        ("query_first/cold", Order.QUERY_FIRST, False, Order.QUERY_FIRST),
        ("doc_first/cold/query_major", Order.DOC_FIRST, False, Order.QUERY_FIRST),
        ("doc_first/cold/document_major", Order.DOC_FIRST, False, Order.DOC_FIRST),
        ("doc_first/warm/document_major", Order.DOC_FIRST, True, Order.DOC_FIRST),
    ]
    for name, order, warm, plan in scenarios:
        backend = build_backend(config, {q.id: sorted(q.gold_doc_ids) for q in base.queries})
        engine = RetrievalEngine(backend, base.engine.template.variant(order=order), config.normalization, config.role_labels)
        if warm:
            engine.warm_cache(base.corpus)
        results = engine.retrieve_many(base.queries, base.corpus, order=plan)
        total = sum(r.total_latency for r in results)
        rows.append(
            {
                "scenario": name,
                "queries": len(results),
                "mean_rt_ms": 1000 * total / len(results),
                "cached_tokens": sum(r.cached_tokens for r in results),
            }
        )
        backend.close()
    if args.format == "json":
        out.write(json.dumps(rows, indent=2) + "\n")
    else:
        for row in rows:
            out.write(f"{row['scenario']:<32}{row['mean_rt_ms']:>10.2f} ms  cached_tokens={row['cached_tokens']}\n")
    return 0


def cmd_sweep(args, config: AppConfig, out=sys.stdout) -> int:
    rt = build_runtime(config)
    ds = _dataset(rt, "all", 0.9)
    ratios = [PairSpec.parse(r, config.seed) for r in args.ratios.split(",") if r.strip()]
    out.write(format_sweep(sensitivity_sweep(ds, ratios, rt.engine.template, role_labels=config.role_labels), args.format))
    return 0


def cmd_serve(args, config: AppConfig, out=sys.stdout) -> int:
    import uvicorn

    from .runtime import load_corpus
    from .service import create_app

    rt = build_runtime(config)
    status = rt.backend.health()
    if status.get("status") != "ok":
        raise BackendError(f"backend health check failed: {status}")
    app = create_app(rt, reload_corpus=lambda: load_corpus(config))
    uvicorn.run(app, host=config.service.host, port=config.service.port)
    return 0


COMMANDS = {
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "export": cmd_export,
    "warm": cmd_warm,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        return COMMANDS[args.command](args, config, out)
    except (ConfigError, ValidationError, UsageError, FileNotFoundError, ExportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
