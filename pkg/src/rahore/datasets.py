"""Strategy-retrieval datasets, positive/negative pairing and SFT/DPO export."""

from __future__ import annotations

import enum
import json
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, Document, Query, ValidationError, flatten_query, iter_jsonl
from .prompt import PromptTemplate, render_prompt


class Split(str, enum.Enum):
    ALL = "all"
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class RetrievalDataset:
    corpus: Corpus
    queries: tuple[Query, ...]
    split: Split = Split.ALL

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        issues = []
        seen: set[str] = set()
        for q in self.queries:
            if q.id in seen:
                issues.append(f"duplicate query id {q.id!r}")
            seen.add(q.id)
            for gid in self.corpus.unresolved(q.gold_doc_ids):
                issues.append(f"query {q.id!r}: gold id {gid!r} not in corpus")
        if issues:
            raise ValidationError(issues)

    def gold_table(self) -> dict[str, list[str]]:
        return {q.id: sorted(q.gold_doc_ids) for q in self.queries}


def load_queries(path: str | Path) -> list[Query]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"queries file not found: {path}")
    issues: list[str] = []
    queries = []
    for lineno, obj in iter_jsonl(path, issues):
        try:
            queries.append(Query.from_dict(obj))
        except ValidationError as exc:
            issues.append(f"{path}:{lineno}: {exc}")
    if issues:
        raise ValidationError(issues)
    return queries


def load_dataset(corpus_path: str | Path, queries_path: str | Path) -> RetrievalDataset:
    corpus = Corpus.from_jsonl(corpus_path)
    queries = load_queries(queries_path)
    issues = []
    seen: dict[str, int] = {}
    for lineno, q in enumerate(queries, start=1):
        if q.id in seen:
            issues.append(f"{queries_path}: duplicate query id {q.id!r} (records {seen[q.id]} and {lineno})")
        seen.setdefault(q.id, lineno)
        for gid in corpus.unresolved(q.gold_doc_ids):
            issues.append(f"{queries_path}: record {lineno}: query {q.id!r} has gold id {gid!r} not in corpus")
    if issues:
        raise ValidationError(issues)
    return RetrievalDataset(corpus, tuple(queries))


def split(ds: RetrievalDataset, train_fraction: float = 0.9, seed: int = 0) -> tuple[RetrievalDataset, RetrievalDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    shuffled = list(ds.queries)
    random.Random(seed).shuffle(shuffled)
    n_train = round(train_fraction * len(shuffled))
    return (
        RetrievalDataset(ds.corpus, tuple(shuffled[:n_train]), Split.TRAIN),
        RetrievalDataset(ds.corpus, tuple(shuffled[n_train:]), Split.TEST),
    )


@dataclass(frozen=True)
class PairSpec:
    """Negatives per positive: ``negatives=None`` means every mismatched document (1:all)."""

    negatives: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.negatives is not None and self.negatives < 1:
            raise ValueError("negatives per positive must be >= 1")

    @classmethod
    def parse(cls, text: str | int, seed: int = 0) -> PairSpec:
        """``"all"``, ``"1:all"``, ``"3"`` or ``"1:3"``."""
        text = str(text).strip().lower()
        if text.startswith("1:"):
            text = text[2:]
        if text == "all":
            return cls(None, seed)
        return cls(int(text), seed)

    @property
    def label(self) -> str:
        return "1:all" if self.negatives is None else f"1:{self.negatives}"

    def negatives_for(self, n_gold: int, pool: int) -> int:
        if self.negatives is None:
            return pool
        return min(self.negatives * n_gold, pool)


@dataclass(frozen=True)
class Pair:
    query: Query
    document: Document
    is_positive: bool


def generate_pairs(ds: RetrievalDataset, spec: PairSpec, t: PromptTemplate | None = None) -> list[Pair]:
    """One positive per gold document plus negatives per ``spec``, query by query.

    Sampled negatives are drawn without replacement with an RNG keyed on the
    seed and query id, so a query's pairs do not depend on its neighbours.
    """
    pairs = []
    for q in ds.queries:
        golds = [d for d in ds.corpus if d.id in q.gold_doc_ids]
        pool = [d for d in ds.corpus if d.id not in q.gold_doc_ids]
        n_neg = spec.negatives_for(len(golds), len(pool))
        if n_neg < len(pool):
            rng = random.Random(f"{spec.seed}:{q.id}")
            chosen = set(rng.sample(range(len(pool)), n_neg))
            negatives = [d for i, d in enumerate(pool) if i in chosen]
        else:
            negatives = pool
        pairs.extend(Pair(q, d, True) for d in golds)
        pairs.extend(Pair(q, d, False) for d in negatives)
    return pairs


class ExportKind(str, enum.Enum):
    SFT = "sft"
    DPO = "dpo"


@dataclass(frozen=True)
class TrainExample:
    kind: ExportKind
    prompt: str
    query_id: str
    doc_id: str
    is_positive: bool
    answer: str | None = None
    chosen: str | None = None
    rejected: str | None = None


@dataclass(frozen=True)
class ExportFields:
    sft_prompt: str = "instruction"
    sft_answer: str = "output"
    dpo_prompt: str = "prompt"
    dpo_chosen: str = "chosen"
    dpo_rejected: str = "rejected"


class ExportError(OSError):
    def __init__(self, message: str, written: int):
        super().__init__(f"{message} ({written} line(s) written)")
        self.written = written


def make_example(pair: Pair, t: PromptTemplate, kind: ExportKind | str, role_labels: Mapping[str, str] | None = None) -> TrainExample:
    kind = ExportKind(kind)
    prompt = render_prompt(t, pair.document, flatten_query(pair.query, role_labels), pair.query.id).text
    yes, no = t.true_token, t.false_token
    common = dict(kind=kind, prompt=prompt, query_id=pair.query.id, doc_id=pair.document.id, is_positive=pair.is_positive)
    if kind is ExportKind.SFT:
        return TrainExample(answer=yes if pair.is_positive else no, **common)
    chosen, rejected = (yes, no) if pair.is_positive else (no, yes)
    return TrainExample(chosen=chosen, rejected=rejected, **common)


def example_record(ex: TrainExample, fields: ExportFields = ExportFields()) -> dict[str, str]:
    if ex.kind is ExportKind.SFT:
        return {fields.sft_prompt: ex.prompt, fields.sft_answer: ex.answer}
    return {fields.dpo_prompt: ex.prompt, fields.dpo_chosen: ex.chosen, fields.dpo_rejected: ex.rejected}


def export_lines(
    pairs: Iterable[Pair],
    t: PromptTemplate,
    kind: ExportKind | str,
    role_labels: Mapping[str, str] | None = None,
    fields: ExportFields = ExportFields(),
) -> Iterable[str]:
    for pair in pairs:
        record = example_record(make_example(pair, t, kind, role_labels), fields)
        yield json.dumps(record, ensure_ascii=False) + "\n"


def export_training(
    pairs: Sequence[Pair],
    t: PromptTemplate,
    kind: ExportKind | str,
    path: str | Path,
    role_labels: Mapping[str, str] | None = None,
    fields: ExportFields = ExportFields(),
) -> int:
    if not pairs:
        raise ValueError("nothing to export: pairs is empty")
    written = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in export_lines(pairs, t, kind, role_labels, fields):
                f.write(line)
                written += 1
    except OSError as exc:
        raise ExportError(f"failed writing {path}: {exc}", written) from exc
    return written


@dataclass
class PairStats:
    ratio: str
    queries: int
    positives: int
    negatives: int
    prompt_chars_max: int = 0
    prompt_chars_mean: float = 0.0
    export_bytes: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.positives + self.negatives


def pair_stats(pairs: Sequence[Pair], spec: PairSpec, t: PromptTemplate, role_labels=None) -> PairStats:
    lengths = [len(render_prompt(t, p.document, flatten_query(p.query, role_labels)).text) for p in pairs]
    stats = PairStats(
        ratio=spec.label,
        queries=len({p.query.id for p in pairs}),
        positives=sum(p.is_positive for p in pairs),
        negatives=sum(not p.is_positive for p in pairs),
        prompt_chars_max=max(lengths, default=0),
        prompt_chars_mean=sum(lengths) / len(lengths) if lengths else 0.0,
    )
    for kind in ExportKind:
        stats.export_bytes[kind.value] = sum(len(line.encode()) for line in export_lines(pairs, t, kind, role_labels))
    return stats
