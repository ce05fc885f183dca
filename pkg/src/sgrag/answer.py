"""Generation backends and the end-to-end ask pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol

from ._http import JSONClient
from .chunks import build_chunks
from .errors import ConfigurationError, StageError
from .prompt import DEFAULT_K, EMPTY_CONTEXT, AssembledPrompt, PromptTemplate, build_prompt, context_lines
from .scene_graph import SceneGraph
from .vector_store import (
    Embedder,
    LocalHashEmbedder,
    RetrievalHit,
    RetrievalResult,
    VectorIndex,
    build_index,
    chunk_entries,
    embed,
)

log = logging.getLogger(__name__)

DEFAULT_LLM_MODEL = "Qwen2-72B-Instruct"
NO_ANSWER = "The provided context does not contain the answer."


class GenerationBackend(Protocol):
    name: str

    def complete(self, prompt: AssembledPrompt) -> str | None:
        """Return the answer text, or ``None`` when the backend declines to answer."""


# -- stub backend -----------------------------------------------------------------

_CHUNK_LINE = re.compile(
    r"^\[(\d+)\] category: (?P<label>\S+) \| count: (?P<count>\d+) \| "
    r"locations: (?P<locations>.*?) \| relations: (?P<relations>.*)$"
)


def _plural(label: str, n: int) -> str:
    if n == 1:
        return label
    if label.endswith(("s", "x", "ch", "sh")):
        return label + "es"
    return label + "s"


def _join(items: list[str]) -> str:
    return items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]


def template_answer(lines: list[str]) -> str:
    """Compose an answer mechanically from context lines in the canonical chunk grammar.

    One sentence per category (count and cells) followed by one sentence per
    distinct relation, so each sentence holds a single fact for the parser.
    """
    sentences: list[str] = []
    relations: list[str] = []
    for line in lines:
        m = _CHUNK_LINE.match(line)
        if not m:
            continue
        n = int(m["count"])
        cells = [part.rsplit(" x", 1)[0] for part in m["locations"].split(", ")]
        verb = "is" if n == 1 else "are"
        sentences.append(f"There {verb} {n} {_plural(m['label'], n)} in the {_join(cells)}.")
        if m["relations"] != "none":
            relations += [r for r in m["relations"].split("; ") if r not in relations]
    for phrase in relations:
        subj, pred, obj = phrase.split(" ")
        sentences.append(f"The {subj} is {pred} the {obj}.")
    return " ".join(sentences) if sentences else NO_ANSWER


class StubBackend:
    """Deterministic offline backend.

    ``echo`` returns the first context line, ``scripted`` looks the question up
    in a table (unknown questions are declined), ``template`` fills an answer
    from the retrieved chunk fields.
    """

    def __init__(self, mode: str = "template", script: Mapping[str, str] | None = None) -> None:
        if mode not in ("echo", "scripted", "template"):
            raise ConfigurationError(f"unknown stub mode {mode!r}")
        if mode == "scripted" and script is None:
            raise ConfigurationError("scripted stub needs a question -> answer table")
        self.mode = mode
        self.script = dict(script or {})
        self.name = f"stub-{mode}"

    def complete(self, prompt: AssembledPrompt) -> str | None:
        lines = context_lines(prompt.text)
        if self.mode == "echo":
            return lines[0] if lines else EMPTY_CONTEXT
        if self.mode == "scripted":
            return self.script.get(prompt.question)
        return template_answer(lines)


# -- remote backend ---------------------------------------------------------------


class ChatBackend:
    """OpenAI-compatible chat-completions client; the whole prompt goes in one user message."""

    def __init__(
        self,
        url: str,
        model: str = DEFAULT_LLM_MODEL,
        api_key: str | None = None,
        temperature: float = 0.0,
        max_tokens: int = 512,
        timeout_ms: int = 60000,
        **client_kw,
    ) -> None:
        self.name = f"chat:{model}"
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._client = JSONClient(url, api_key=api_key, timeout=timeout_ms / 1000, **client_kw)

    def complete(self, prompt: AssembledPrompt) -> str | None:
        body = self._client.post(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": prompt.text}],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            }
        )
        try:
            choice = body["choices"][0]
        except (KeyError, IndexError, TypeError):
            raise ConfigurationError(f"unexpected chat response shape: {str(body)[:200]}") from None
        if choice.get("finish_reason") == "content_filter":
            return None
        return (choice.get("message") or {}).get("content")


# -- records ----------------------------------------------------------------------


@dataclass(frozen=True)
class AnswerRecord:
    answer_text: str
    prompt: AssembledPrompt
    backend: str
    latency: float
    timestamp: str
    refused: bool = False
    image_id: str | None = None
    hits: tuple[RetrievalHit, ...] = field(default=(), repr=False)

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.prompt.text.encode("utf-8")).hexdigest()

    def transcript_line(self) -> str:
        """One JSON line without timing fields, so stub runs reproduce byte-for-byte."""
        return json.dumps(
            {
                "image_id": self.image_id,
                "question": self.prompt.question,
                "answer": self.answer_text,
                "refused": self.refused,
                "backend": self.backend,
                "k": self.prompt.k_used,
                "chunk_ids": list(self.prompt.retrieved_chunk_ids),
                "scores": list(self.prompt.similarity_scores),
                "prompt_sha256": self.prompt_hash,
            },
            sort_keys=True,
            ensure_ascii=False,
        )


def generate(backend: GenerationBackend, prompt: AssembledPrompt, image_id: str | None = None) -> AnswerRecord:
    started = time.perf_counter()
    text = backend.complete(prompt)
    latency = time.perf_counter() - started
    return AnswerRecord(
        answer_text=text or "",
        prompt=prompt,
        backend=backend.name,
        latency=latency,
        timestamp=datetime.now(timezone.utc).isoformat(),
        refused=text is None,
        image_id=image_id,
    )


def index_graph(graph: SceneGraph, embedder: Embedder) -> VectorIndex:
    return build_index(chunk_entries(build_chunks(graph)), embedder)


def ask(
    source: SceneGraph | VectorIndex,
    question: str,
    k: int = DEFAULT_K,
    template: PromptTemplate | None = None,
    embedder: Embedder | None = None,
    backend: GenerationBackend | None = None,
    image_id: str | None = None,
) -> AnswerRecord:
    """Embed the question, retrieve top-k chunks, assemble the prompt and generate.

    Failures are re-raised as :class:`StageError` naming the stage.
    """
    template = template or PromptTemplate()
    embedder = embedder or LocalHashEmbedder()
    backend = backend or StubBackend()

    def stage(name: str, fn, *args):
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    if isinstance(source, SceneGraph):
        image_id = image_id or source.image_id
        index = stage("index", index_graph, source, embedder)
    else:
        index = source
    query = stage("embed", embed, question, embedder)
    hits: RetrievalResult = stage("retrieve", index.top_k, query, k)
    prompt = stage("prompt", build_prompt, template, hits, question, k)
    record = stage("generate", generate, backend, prompt, image_id)
    return replace(record, hits=tuple(hits))


def replay_prompt(record: AnswerRecord, index: VectorIndex, template: PromptTemplate) -> AssembledPrompt:
    """Rebuild a record's prompt from its chunk ids and scores alone."""
    payload = dict(zip(index.ids, index.payloads))
    hits = [
        RetrievalHit(cid, score, payload[cid])
        for cid, score in zip(record.prompt.retrieved_chunk_ids, record.prompt.similarity_scores)
    ]
    return build_prompt(template, hits, record.prompt.question, record.prompt.k_used)


def append_transcript(path: str | Path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.transcript_line() + "\n")


def read_transcript(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
