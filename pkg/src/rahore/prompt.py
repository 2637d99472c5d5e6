"""Binary-choice relevance prompt.

Layout (defaults)::

    document: {D}
    query: {Q}
    Can Q be appropriately responded with D?
    If you think the answer is true, choose <T>; otherwise choose <F>.

Putting the document first makes every prompt for that document share a
byte-identical prefix, which a serving stack can keep in its KV cache.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace

from .corpus import Document, ValidationError

RELEVANCE_INSTRUCTION = "Can Q be appropriately responded with D?"
CHOICE_INSTRUCTION = "If you think the answer is true, choose <T>; otherwise choose <F>."
TRUE_TOKEN = "<T>"
FALSE_TOKEN = "<F>"


class Order(str, enum.Enum):
    DOC_FIRST = "doc_first"
    QUERY_FIRST = "query_first"


@dataclass(frozen=True)
class PromptTemplate:
    order: Order = Order.DOC_FIRST
    relevance_instruction: str = RELEVANCE_INSTRUCTION
    choice_instruction: str | None = CHOICE_INSTRUCTION
    true_token: str = TRUE_TOKEN
    false_token: str = FALSE_TOKEN
    document_label: str = "document: "
    query_label: str = "query: "
    separator: str = "\n"
    # Substitute the actual texts for the letters Q and D in the relevance line.
    interpolate_instruction: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", Order(self.order))
        if not self.true_token or not self.false_token:
            raise ValidationError("choice tokens must be non-empty")
        if self.true_token == self.false_token:
            raise ValidationError("true_token and false_token must differ")

    @property
    def choices(self) -> list[str]:
        return [self.true_token, self.false_token]

    @property
    def has_choice_instruction(self) -> bool:
        return self.choice_instruction is not None

    def variant(self, *, choice_instruction: bool | None = None, order: Order | str | None = None) -> PromptTemplate:
        """Copy with the I_bc line toggled and/or the segment order changed."""
        changes: dict = {}
        if choice_instruction is not None:
            changes["choice_instruction"] = CHOICE_INSTRUCTION if choice_instruction else None
        if order is not None:
            changes["order"] = Order(order)
        return replace(self, **changes)


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    prefix_len: int  # UTF-8 bytes of the query-independent prefix; 0 when query-first
    doc_id: str
    query_id: str

    @property
    def prefix(self) -> str:
        return self.text.encode("utf-8")[: self.prefix_len].decode("utf-8")


def _instruction(t: PromptTemplate, doc_text: str, q_text: str) -> str:
    text = t.relevance_instruction
    if t.interpolate_instruction:
        text = re.sub(r"\b[QD]\b", lambda m: q_text if m.group() == "Q" else doc_text, text)
    if t.choice_instruction is not None:
        text = text + t.separator + t.choice_instruction
    return text


def render_prompt(t: PromptTemplate, d: Document, q_text: str, query_id: str = "") -> RenderedPrompt:
    doc_segment = t.document_label + d.text + t.separator
    query_segment = t.query_label + q_text + t.separator
    tail = _instruction(t, d.text, q_text)
    if t.order is Order.DOC_FIRST:
        text = doc_segment + query_segment + tail
        prefix_len = len(doc_segment.encode("utf-8"))
    else:
        text = query_segment + doc_segment + tail
        prefix_len = 0
    return RenderedPrompt(text=text, prefix_len=prefix_len, doc_id=d.id, query_id=query_id)


def render_document_prefix(t: PromptTemplate, d: Document) -> RenderedPrompt:
    """The cacheable document segment alone, used to prime a prefix cache."""
    if t.order is not Order.DOC_FIRST:
        raise ValueError("only document-first prompts have a document prefix")
    seg = t.document_label + d.text + t.separator
    return RenderedPrompt(text=seg, prefix_len=len(seg.encode("utf-8")), doc_id=d.id, query_id="")
