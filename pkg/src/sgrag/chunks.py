"""Per-category knowledge chunks: the retrieval unit built from a scene graph."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ParseError
from .scene_graph import GridCell, SceneGraph, object_cell


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    image_id: str
    category_label: str
    count: int
    location_histogram: tuple[tuple[GridCell, int], ...]
    relation_phrases: tuple[str, ...]
    canonical_text: str = ""

    def __post_init__(self) -> None:
        hist = tuple(sorted(((GridCell(c), int(k)) for c, k in dict(self.location_histogram).items()), key=lambda ck: ck[0].index))
        object.__setattr__(self, "location_histogram", hist)
        object.__setattr__(self, "relation_phrases", tuple(sorted(set(self.relation_phrases))))
        if self.count < 1 or any(k < 1 for _, k in hist) or sum(k for _, k in hist) != self.count:
            raise ValueError(f"chunk {self.chunk_id!r}: histogram {hist} does not sum to count {self.count}")
        if not self.canonical_text:
            object.__setattr__(self, "canonical_text", render_chunk_text(self))

    @property
    def locations(self) -> dict[GridCell, int]:
        return dict(self.location_histogram)


def render_chunk_text(chunk: KnowledgeChunk) -> str:
    locations = ", ".join(f"{cell.value} x{k}" for cell, k in chunk.location_histogram)
    relations = "; ".join(chunk.relation_phrases) or "none"
    return f"category: {chunk.category_label} | count: {chunk.count} | locations: {locations} | relations: {relations}"


def relation_phrase(graph: SceneGraph, subject_id: int, predicate: str, object_id: int) -> str:
    return f"{graph.object(subject_id).category_label} {predicate} {graph.object(object_id).category_label}"


def build_chunks(graph: SceneGraph) -> list[KnowledgeChunk]:
    """One chunk per category, sorted by label; each relation lands in both endpoint chunks."""
    hist: dict[str, Counter] = {}
    for obj in graph.objects:
        hist.setdefault(obj.category_label, Counter())[object_cell(graph, obj)] += 1
    phrases: dict[str, set[str]] = {label: set() for label in hist}
    for rel in graph.relations:
        phrase = relation_phrase(graph, rel.subject_id, rel.predicate_label, rel.object_id)
        phrases[graph.object(rel.subject_id).category_label].add(phrase)
        phrases[graph.object(rel.object_id).category_label].add(phrase)
    return [
        KnowledgeChunk(
            chunk_id=f"{graph.image_id}#{label}",
            image_id=graph.image_id,
            category_label=label,
            count=sum(hist[label].values()),
            location_histogram=tuple(hist[label].items()),
            relation_phrases=tuple(phrases[label]),
        )
        for label in sorted(hist)
    ]


def chunk_to_record(chunk: KnowledgeChunk) -> dict[str, Any]:
    return {
        "chunk_id": chunk.chunk_id,
        "image_id": chunk.image_id,
        "category_label": chunk.category_label,
        "count": chunk.count,
        "location_histogram": {cell.value: k for cell, k in chunk.location_histogram},
        "relation_phrases": list(chunk.relation_phrases),
        "canonical_text": chunk.canonical_text,
    }


def chunk_from_record(record: Mapping[str, Any]) -> KnowledgeChunk:
    try:
        chunk = KnowledgeChunk(
            chunk_id=record["chunk_id"],
            image_id=record["image_id"],
            category_label=record["category_label"],
            count=record["count"],
            location_histogram=tuple(record["location_histogram"].items()),
            relation_phrases=tuple(record["relation_phrases"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError("chunk record", str(exc)) from exc
    if "canonical_text" in record and record["canonical_text"] != chunk.canonical_text:
        raise ParseError("canonical_text", f"does not match fields of chunk {chunk.chunk_id!r}")
    return chunk


def encode_chunk(chunk: KnowledgeChunk) -> str:
    """Canonical one-line record; byte-stable for equal chunks."""
    return json.dumps(chunk_to_record(chunk), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def decode_chunk(line: str | bytes) -> KnowledgeChunk:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError("chunk record", f"invalid JSON: {exc}") from exc
    return chunk_from_record(record)


def dump_chunks(chunks: Iterable[KnowledgeChunk]) -> str:
    return "".join(encode_chunk(c) + "\n" for c in chunks)


def write_chunks(chunks: Iterable[KnowledgeChunk], path: str | Path) -> None:
    Path(path).write_text(dump_chunks(chunks), encoding="utf-8")


def read_chunks(path: str | Path) -> list[KnowledgeChunk]:
    with open(path, encoding="utf-8") as fh:
        return [decode_chunk(line) for line in fh if line.strip()]
