"""Prompt assembly: head, retrieved context and question with fixed separators."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import InputError
from .vector_store import RetrievalHit

DEFAULT_K = 4
EMPTY_CONTEXT = "(no relevant visual context)"
CONTEXT_LABEL = "Context:"
QUESTION_LABEL = "Question:"
HEAD_RESOURCE = "prompt_head_v1.txt"


def default_head() -> str:
    return resources.files("sgrag.resources").joinpath(HEAD_RESOURCE).read_text(encoding="utf-8")


@dataclass(frozen=True)
class PromptTemplate:
    head_text: str = field(default_factory=default_head)
    context_label: str = CONTEXT_LABEL
    question_label: str = QUESTION_LABEL

    def __post_init__(self) -> None:
        if not self.head_text:
            raise InputError("prompt head must be non-empty")
        if (self.context_label, self.question_label) != (CONTEXT_LABEL, QUESTION_LABEL):
            raise InputError("section labels are fixed")

    @classmethod
    def from_file(cls, path: str | Path) -> PromptTemplate:
        return cls(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class AssembledPrompt:
    text: str
    question: str
    retrieved_chunk_ids: tuple[str, ...] = ()
    similarity_scores: tuple[float, ...] = ()
    k_used: int = DEFAULT_K


def format_context(result: Sequence[RetrievalHit]) -> str:
    """``[i] <chunk text>`` per hit in rank order, or the empty-context sentinel."""
    if not result:
        return EMPTY_CONTEXT
    lines = []
    for i, hit in enumerate(result, 1):
        # keep one logical line per chunk even if a payload carries newlines
        text = hit.chunk.canonical_text.replace("\n", "\n    ")
        lines.append(f"[{i}] {text}")
    return "\n".join(lines)


def assemble(
    template: PromptTemplate,
    context: str,
    question: str,
    result: Sequence[RetrievalHit] = (),
    k: int = DEFAULT_K,
) -> AssembledPrompt:
    if not question or not question.strip():
        raise InputError("question must be non-empty")
    text = f"{template.head_text}\n\n{template.context_label}\n{context}\n\n{template.question_label}\n{question}"
    return AssembledPrompt(
        text=text,
        question=question,
        retrieved_chunk_ids=tuple(h.chunk_id for h in result),
        similarity_scores=tuple(h.score for h in result),
        k_used=k,
    )


def build_prompt(
    template: PromptTemplate, result: Sequence[RetrievalHit], question: str, k: int = DEFAULT_K
) -> AssembledPrompt:
    return assemble(template, format_context(result), question, result, k)


def context_lines(prompt_text: str) -> list[str]:
    """Recover the context block's lines from an assembled prompt."""
    head, sep, rest = prompt_text.rpartition(f"\n\n{QUESTION_LABEL}\n")
    if not sep:
        return []
    _, sep, context = head.rpartition(f"\n\n{CONTEXT_LABEL}\n")
    if not sep or context == EMPTY_CONTEXT:
        return []
    return context.split("\n")
