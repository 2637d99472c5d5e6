"""Domain types: documents, dialogue queries and the document pool."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DEFAULT_ROLE_LABELS: dict[str, str] = {"user": "user", "assistant": "assistant"}


class ValidationError(ValueError):
    """Invalid domain data. ``issues`` holds one human-readable line per problem."""

    def __init__(self, issues: Sequence[str] | str):
        if isinstance(issues, str):
            issues = [issues]
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


@dataclass(frozen=True)
class Document:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("document id must be a non-empty string")
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError(f"document {self.id!r} has empty text")


@dataclass(frozen=True)
class Query:
    id: str
    utterance: str
    history: tuple[tuple[str, str], ...] = ()
    gold_doc_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("query id must be a non-empty string")
        if not isinstance(self.utterance, str) or not self.utterance.strip():
            raise ValidationError(f"query {self.id!r} has an empty utterance")
        object.__setattr__(self, "history", tuple((str(r), str(t)) for r, t in self.history))
        object.__setattr__(self, "gold_doc_ids", frozenset(self.gold_doc_ids))

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> Query:
        if not isinstance(obj, Mapping):
            raise ValidationError("query record must be a JSON object")
        missing = [k for k in ("id", "utterance") if k not in obj]
        if missing:
            raise ValidationError(f"query record missing field(s): {', '.join(missing)}")
        history = obj.get("history") or []
        turns = []
        for turn in history:
            if not isinstance(turn, (list, tuple)) or len(turn) != 2:
                raise ValidationError(f"query {obj['id']!r}: history turns must be [role, text] pairs")
            turns.append((turn[0], turn[1]))
        gold = obj.get("gold") or []
        if isinstance(gold, str):
            gold = [gold]
        return cls(id=str(obj["id"]), utterance=obj["utterance"], history=tuple(turns), gold_doc_ids=frozenset(gold))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "history": [list(turn) for turn in self.history],
            "utterance": self.utterance,
            "gold": sorted(self.gold_doc_ids),
        }


class Corpus(Sequence[Document]):
    """Ordered, immutable pool of candidate documents.

    Order matters: it is the tie-break order used when ranking.
    """

    def __init__(self, documents: Iterable[Document]):
        docs = tuple(documents)
        if not docs:
            raise ValidationError("corpus must contain at least one document")
        index: dict[str, int] = {}
        dupes = []
        for i, doc in enumerate(docs):
            if doc.id in index:
                dupes.append(doc.id)
            index[doc.id] = i
        if dupes:
            raise ValidationError([f"duplicate document id {d!r}" for d in dupes])
        self._docs = docs
        self._index = index

    def __len__(self) -> int:
        return len(self._docs)

    def __getitem__(self, i):  # type: ignore[override]
        return self._docs[i]

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._index

    def __repr__(self) -> str:
        return f"Corpus({len(self)} documents)"

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self._docs]

    def get(self, doc_id: str) -> Document:
        try:
            return self._docs[self._index[doc_id]]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def position(self, doc_id: str) -> int:
        return self._index[doc_id]

    def unresolved(self, doc_ids: Iterable[str]) -> list[str]:
        return sorted(d for d in doc_ids if d not in self._index)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> Corpus:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        docs = []
        issues = []
        for lineno, obj in iter_jsonl(path, issues):
            try:
                docs.append(Document(id=str(obj["id"]), text=obj["text"]))
            except (KeyError, TypeError):
                issues.append(f"{path}:{lineno}: document record needs 'id' and 'text'")
            except ValidationError as exc:
                issues.append(f"{path}:{lineno}: {exc}")
        if issues:
            raise ValidationError(issues)
        return cls(docs)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for d in self._docs:
                f.write(json.dumps({"id": d.id, "text": d.text}, ensure_ascii=False) + "\n")


def iter_jsonl(path: Path, issues: list[str]) -> Iterator[tuple[int, Any]]:
    """Yield ``(lineno, obj)`` for each non-blank line; parse errors go to ``issues``."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                issues.append(f"{path}:{lineno}: malformed JSON ({exc.msg})")


def flatten_query(q: Query, role_labels: Mapping[str, str] | None = None) -> str:
    """Render dialogue history plus the final user utterance as ``label: text`` lines."""
    labels = {**DEFAULT_ROLE_LABELS, **(role_labels or {})}
    lines = [f"{labels.get(role, role)}: {text}" for role, text in q.history]
    lines.append(f"{labels['user']}: {q.utterance}")
    return "\n".join(lines)


def parse_dialogue(text: str, query_id: str = "query", role_labels: Mapping[str, str] | None = None) -> Query:
    """Inverse of :func:`flatten_query` for ad-hoc text queries.

    Lines starting with a known role label become turns; the last turn is the
    utterance. Text without any recognised label becomes the bare utterance.
    """
    labels = {**DEFAULT_ROLE_LABELS, **(role_labels or {})}
    by_label = {label: role for role, label in labels.items()}
    turns: list[tuple[str, str]] = []
    for line in text.strip().splitlines():
        head, sep, rest = line.partition(": ")
        if sep and head in by_label:
            turns.append((by_label[head], rest))
        elif turns:
            role, prev = turns[-1]
            turns[-1] = (role, prev + "\n" + line)
        else:
            turns.append(("user", line))
    *history, (_, utterance) = turns
    return Query(id=query_id, utterance=utterance, history=tuple(history))
