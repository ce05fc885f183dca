"""Attribute-level answer scoring, VQA accuracy, top-k ablation and report tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .answer import GenerationBackend, StubBackend, ask, index_graph
from .chunks import relation_phrase
from .errors import InputError
from .prompt import PromptTemplate
from .scene_graph import GridCell, SceneGraph, category_counts, normalize_label, object_cell
from .vector_store import Embedder, LocalHashEmbedder, VectorIndex

log = logging.getLogger(__name__)

ATTRIBUTES = ("category", "quantity", "location", "relation")
DEFAULT_K_VALUES = (1, 2, 4, 8, 16)
DEFAULT_QUESTION = "What objects are in the image, how many of each are there, where are they, and how are they related?"

NUMBER_WORDS = {
    w: i
    for i, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
        "fifteen sixteen seventeen eighteen nineteen twenty".split()
    )
}
QUANTITY_WINDOW = 3


def grid_synonyms() -> dict[str, str]:
    data = json.loads(resources.files("sgrag.resources").joinpath("grid_synonyms_v1.json").read_text("utf-8"))
    table = {cell.value: cell.value for cell in GridCell}
    table.update(data["synonyms"])
    return table


# -- ground truth and mentions --------------------------------------------------


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: str
    categories: Mapping[str, int]
    locations: Mapping[str, Mapping[GridCell, int]]
    relations: frozenset[str]

    @classmethod
    def from_graph(cls, graph: SceneGraph) -> GroundTruthRecord:
        locations: dict[str, dict[GridCell, int]] = {}
        for obj in graph.objects:
            cells = locations.setdefault(obj.category_label, {})
            cell = object_cell(graph, obj)
            cells[cell] = cells.get(cell, 0) + 1
        relations = frozenset(
            relation_phrase(graph, r.subject_id, r.predicate_label, r.object_id) for r in graph.relations
        )
        return cls(graph.image_id, category_counts(graph), locations, relations)

    @classmethod
    def from_dict(cls, image_id: str, doc: Mapping) -> GroundTruthRecord:
        """Question-scoped truth: ``{"categories": {label: n}, "locations": {label: {cell: n}}, "relations": [...]}``."""
        categories = {normalize_label(k): int(v) for k, v in doc.get("categories", {}).items()}
        locations = {
            normalize_label(k): {GridCell(c): int(n) for c, n in cells.items()}
            for k, cells in doc.get("locations", {}).items()
        }
        relations = frozenset(" ".join(normalize_label(p) for p in r.split()) for r in doc.get("relations", []))
        if any(v < 1 for v in categories.values()):
            raise InputError(f"truth for {image_id!r} has non-positive counts")
        return cls(image_id, categories, locations, relations)

    def to_dict(self) -> dict:
        return {
            "categories": dict(sorted(self.categories.items())),
            "locations": {
                k: {c.value: n for c, n in sorted(v.items(), key=lambda cn: cn[0].index)}
                for k, v in sorted(self.locations.items())
            },
            "relations": sorted(self.relations),
        }


@dataclass
class ExtractedMentions:
    categories: set[str] = field(default_factory=set)
    quantities: dict[str, int] = field(default_factory=dict)
    locations: dict[str, set[GridCell]] = field(default_factory=dict)
    relations: set[str] = field(default_factory=set)

    @classmethod
    def from_truth(cls, truth: GroundTruthRecord) -> ExtractedMentions:
        return cls(
            set(truth.categories),
            dict(truth.categories),
            {k: set(v) for k, v in truth.locations.items()},
            set(truth.relations),
        )


_SENTENCE = re.compile(r"[.!?;\n]+")
_WORD = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")


def _variants(phrase: str) -> set[tuple[str, ...]]:
    """Token sequences that spell a vocabulary phrase: as written, and split on hyphens."""
    words = phrase.split()
    return {tuple(words), tuple(p for w in words for p in w.split("-"))}


def _fold(token: str) -> list[str]:
    out = [token]
    if token.endswith("es"):
        out.append(token[:-2])
    if token.endswith("s"):
        out.append(token[:-1])
    return out


class _Matcher:
    """Greedy longest-match scan of token streams against a phrase vocabulary."""

    def __init__(self, table: Mapping[str, str], fold_plural: bool = False) -> None:
        self.fold_plural = fold_plural
        self.phrases: dict[tuple[str, ...], str] = {}
        for surface, canonical in table.items():
            for v in _variants(surface.casefold()):
                self.phrases.setdefault(v, canonical)
        self.longest = max((len(p) for p in self.phrases), default=0)

    def _lookup(self, seq: Sequence[str]) -> str | None:
        if tuple(seq) in self.phrases:
            return self.phrases[tuple(seq)]
        if self.fold_plural:
            for last in _fold(seq[-1])[1:]:
                key = (*seq[:-1], last)
                if key in self.phrases:
                    return self.phrases[key]
        return None

    def scan(self, tokens: Sequence[str]) -> list[tuple[int, int, str]]:
        found, i = [], 0
        while i < len(tokens):
            for n in range(min(self.longest, len(tokens) - i), 0, -1):
                hit = self._lookup(tokens[i : i + n])
                if hit is not None:
                    found.append((i, i + n, hit))
                    i += n
                    break
            else:
                i += 1
        return found


def _number(token: str) -> int | None:
    if token.isdigit():
        return int(token)
    return NUMBER_WORDS.get(token)


def extract_mentions(
    answer_text: str,
    category_vocabulary: Iterable[str],
    predicate_vocabulary: Iterable[str],
    synonyms: Mapping[str, str] | None = None,
) -> ExtractedMentions:
    """Parse a free-text answer into category, quantity, location and relation mentions.

    Rules (all case-insensitive, applied per sentence):

    * a category is a vocabulary phrase matched as whole words, with a trailing
      ``s``/``es`` on the last word folded away;
    * its quantity is the nearest cardinal (digits or a number word up to
      twenty) at most three tokens before or after it, preferring the one
      before; the first claim per category wins;
    * every grid-cell name or synonym in the sentence is a location of every
      category in that sentence;
    * subject, predicate and object phrases in that order form a relation.
    """
    mentions = ExtractedMentions()
    categories = _Matcher({c: c for c in category_vocabulary}, fold_plural=True)
    predicates = _Matcher({p: p for p in predicate_vocabulary})
    cells = _Matcher(synonyms if synonyms is not None else grid_synonyms())
    for sentence in _SENTENCE.split(answer_text.casefold()):
        tokens = _WORD.findall(sentence)
        if not tokens:
            continue
        cats = categories.scan(tokens)
        if not cats:
            continue
        for start, end, label in cats:
            mentions.categories.add(label)
            if label in mentions.quantities:
                continue
            best = None
            for dist in range(1, QUANTITY_WINDOW + 1):
                for pos in (start - dist, end - 1 + dist):
                    if 0 <= pos < len(tokens) and _number(tokens[pos]) is not None:
                        best = _number(tokens[pos])
                        break
                if best is not None:
                    mentions.quantities[label] = best
                    break
        found_cells = {GridCell(c) for _, _, c in cells.scan(tokens)}
        if found_cells:
            for _, _, label in cats:
                mentions.locations.setdefault(label, set()).update(found_cells)
        for p_start, p_end, pred in predicates.scan(tokens):
            subjects = [c for s, e, c in cats if e <= p_start]
            objects = [c for s, e, c in cats if s >= p_end]
            mentions.relations.update(f"{s} {pred} {o}" for s in subjects for o in objects)
    return mentions


# -- scoring ----------------------------------------------------------------------


@dataclass(frozen=True)
class PRF:
    recall: float
    precision: float
    f1: float


@dataclass(frozen=True)
class Counts:
    """True positives, number predicted and number in the ground truth."""

    tp: int = 0
    predicted: int = 0
    actual: int = 0

    def __add__(self, other: Counts) -> Counts:
        return Counts(self.tp + other.tp, self.predicted + other.predicted, self.actual + other.actual)

    def prf(self) -> PRF:
        return prf_from_counts(self.tp, self.predicted, self.actual)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def prf_from_counts(tp: int, predicted: int, actual: int) -> PRF:
    """Both sides empty is perfect agreement; otherwise a zero denominator scores 0."""
    if predicted == 0 and actual == 0:
        return PRF(1.0, 1.0, 1.0)
    recall = tp / actual if actual else 0.0
    precision = tp / predicted if predicted else 0.0
    return PRF(recall, precision, f1_score(precision, recall))


@dataclass(frozen=True)
class AttributeScores:
    category: PRF
    quantity: PRF
    location: PRF
    relation: PRF

    def __getitem__(self, attribute: str) -> PRF:
        return getattr(self, attribute)

    def to_dict(self) -> dict:
        return {a: {"recall": s.recall, "precision": s.precision, "f1": s.f1} for a, s in zip(ATTRIBUTES, self.as_tuple())}

    def as_tuple(self) -> tuple[PRF, PRF, PRF, PRF]:
        return (self.category, self.quantity, self.location, self.relation)

    @classmethod
    def from_dict(cls, doc: Mapping) -> AttributeScores:
        return cls(*(PRF(doc[a]["recall"], doc[a]["precision"], doc[a]["f1"]) for a in ATTRIBUTES))


def _set_counts(predicted: set, actual: set) -> Counts:
    return Counts(len(predicted & actual), len(predicted), len(actual))


def attribute_counts(mentions: ExtractedMentions, truth: GroundTruthRecord) -> dict[str, Counts]:
    correct_qty = sum(1 for c, n in mentions.quantities.items() if truth.categories.get(c) == n)
    return {
        "category": _set_counts(set(mentions.categories), set(truth.categories)),
        "quantity": Counts(correct_qty, len(mentions.quantities), len(truth.categories)),
        "location": _set_counts(
            {(c, cell) for c, cells in mentions.locations.items() for cell in cells},
            {(c, cell) for c, cells in truth.locations.items() for cell in cells},
        ),
        "relation": _set_counts(set(mentions.relations), set(truth.relations)),
    }


def aggregate(counts: Iterable[Mapping[str, Counts]]) -> AttributeScores:
    """Micro-average: pool counts over all answers before computing ratios."""
    total = {a: Counts() for a in ATTRIBUTES}
    for c in counts:
        for a in ATTRIBUTES:
            total[a] = total[a] + c[a]
    return AttributeScores(*(total[a].prf() for a in ATTRIBUTES))


def score_attributes(mentions: ExtractedMentions, truth: GroundTruthRecord) -> AttributeScores:
    return aggregate([attribute_counts(mentions, truth)])


# -- VQA accuracy ---------------------------------------------------------------

_ARTICLES = {"a", "an", "the"}
_PUNCT = str.maketrans({c: " " for c in string.punctuation if c != "'"} | {"'": ""})


def normalize_answer(text: str) -> str:
    words = text.casefold().translate(_PUNCT).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def vqa_accuracy(predicted_answer: str, human_answers: Sequence[str]) -> float:
    """Consensus accuracy: ``min(matches / 3, 1)`` averaged over every leave-one-out subset of annotators."""
    if len(human_answers) < 3:
        raise InputError(f"VQA accuracy needs at least 3 human answers, got {len(human_answers)}")
    pred = normalize_answer(predicted_answer)
    hits = [normalize_answer(h) == pred for h in human_answers]
    matches = sum(hits)
    return sum(min((matches - h) / 3, 1.0) for h in hits) / len(hits)


# -- datasets of questions ------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    image_id: str
    question: str
    truth: GroundTruthRecord | None = None
    human_answers: tuple[str, ...] = ()


def default_items(graphs: Iterable[SceneGraph]) -> list[EvalItem]:
    return [EvalItem(g.image_id, DEFAULT_QUESTION) for g in graphs]


def item_from_dict(doc: Mapping) -> EvalItem:
    image_id = doc["image_id"]
    truth = GroundTruthRecord.from_dict(image_id, doc["truth"]) if "truth" in doc else None
    return EvalItem(image_id, doc["question"], truth, tuple(doc.get("answers", ())))


def item_to_dict(item: EvalItem) -> dict:
    doc: dict = {"image_id": item.image_id, "question": item.question}
    if item.truth is not None:
        doc["truth"] = item.truth.to_dict()
    if item.human_answers:
        doc["answers"] = list(item.human_answers)
    return doc


def vocabularies(graphs: Iterable[SceneGraph]) -> tuple[set[str], set[str]]:
    labels: set[str] = set()
    preds: set[str] = set()
    for g in graphs:
        labels |= g.labels
        preds |= g.predicates
    return labels, preds


@dataclass
class EvaluationResult:
    scores: AttributeScores
    answered: int
    failures: int
    vqa_accuracy: float | None = None


def evaluate_answers(
    graphs: Sequence[SceneGraph],
    items: Sequence[EvalItem],
    answers: Sequence[str],
) -> EvaluationResult:
    """Score answers (aligned with ``items``) against question truth, else the whole image."""
    by_id = {g.image_id: g for g in graphs}
    labels, preds = vocabularies(graphs)
    synonyms = grid_synonyms()
    counts, vqa = [], []
    failures = 0
    for item, answer in sorted(zip(items, answers), key=lambda ia: (ia[0].image_id, ia[0].question)):
        if item.image_id not in by_id:
            log.error("no scene graph for image %s", item.image_id)
            failures += 1
            continue
        truth = item.truth or GroundTruthRecord.from_graph(by_id[item.image_id])
        counts.append(attribute_counts(extract_mentions(answer, labels, preds, synonyms), truth))
        if len(item.human_answers) >= 3:
            vqa.append(vqa_accuracy(answer, item.human_answers))
    return EvaluationResult(aggregate(counts), len(counts), failures, sum(vqa) / len(vqa) if vqa else None)


# -- ablation -------------------------------------------------------------------


@dataclass
class PipelineConfig:
    embedder: Embedder = field(default_factory=LocalHashEmbedder)
    backend: GenerationBackend = field(default_factory=StubBackend)
    template: PromptTemplate = field(default_factory=PromptTemplate)
    jobs: int = 1


@dataclass(frozen=True)
class AblationRow:
    k: int
    scores: AttributeScores
    answered: int
    failures: int


def run_ablation(
    graphs: Sequence[SceneGraph],
    items: Sequence[EvalItem] | None = None,
    k_values: Iterable[int] = DEFAULT_K_VALUES,
    config: PipelineConfig | None = None,
) -> list[AblationRow]:
    """Run the identical pipeline once per k and score every answer.

    Per-image indexes are built once and shared across k. A failing item is
    logged and counted; the sweep carries on.
    """
    config = config or PipelineConfig()
    k_values = sorted(set(k_values))
    if not k_values or k_values[0] < 1:
        raise InputError(f"k values must be >= 1, got {k_values}")
    items = list(items) if items is not None else default_items(graphs)
    by_id = {g.image_id: g for g in graphs}
    labels, preds = vocabularies(graphs)
    synonyms = grid_synonyms()

    indexes: dict[str, VectorIndex | Exception] = {}
    for image_id in sorted({i.image_id for i in items}):
        try:
            indexes[image_id] = index_graph(by_id[image_id], config.embedder)
        except Exception as exc:  # noqa: BLE001 - counted as a per-image failure
            log.error("indexing %s failed: %s", image_id, exc)
            indexes[image_id] = exc

    def run_one(item: EvalItem, k: int):
        index = indexes[item.image_id]
        if isinstance(index, Exception):
            return None
        try:
            record = ask(index, item.question, k, config.template, config.embedder, config.backend, item.image_id)
        except Exception as exc:  # noqa: BLE001
            log.error("k=%d image %s failed: %s", k, item.image_id, exc)
            return None
        truth = item.truth or GroundTruthRecord.from_graph(by_id[item.image_id])
        return attribute_counts(extract_mentions(record.answer_text, labels, preds, synonyms), truth)

    ordered = sorted(items, key=lambda i: (i.image_id, i.question))
    rows = []
    with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as pool:
        for k in k_values:
            results = list(pool.map(lambda it: run_one(it, k), ordered))
            done = [r for r in results if r is not None]
            rows.append(AblationRow(k, aggregate(done), len(done), len(results) - len(done)))
    return rows


# -- reports --------------------------------------------------------------------

REPORT_COLUMNS = [f"recall_{a}" for a in ATTRIBUTES] + [f"f1_{a}" for a in ATTRIBUTES]


def _cells(scores: AttributeScores) -> list[str]:
    return [f"{s.recall:.4f}" for s in scores.as_tuple()] + [f"{s.f1:.4f}" for s in scores.as_tuple()]


def render_report(rows: Sequence[tuple[str, AttributeScores]], fmt: str = "md") -> str:
    """Recall block then F1 block, one row per method, four decimals."""
    if fmt == "md":
        names = [a.capitalize() for a in ATTRIBUTES]
        header = ["Method"] + [f"Recall {n}" for n in names] + [f"F1 {n}" for n in names]
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join([":---"] + ["---:"] * 8) + "|"]
        lines += ["| " + " | ".join([name] + _cells(s)) + " |" for name, s in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method"] + REPORT_COLUMNS)
        for name, s in rows:
            writer.writerow([name] + _cells(s))
        return buf.getvalue()
    raise InputError(f"unknown report format {fmt!r}")


def ablation_report(rows: Sequence[AblationRow], fmt: str = "md") -> str:
    return render_report([(f"k={r.k}", r.scores) for r in rows], fmt)
