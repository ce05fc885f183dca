"""Scene-graph data model, annotation ingestion and per-object spatial attributes."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import DataError, ParseError, ReferentialIntegrityError, ValidationError

log = logging.getLogger(__name__)

_WS = re.compile(r"\s+")


def normalize_label(label: str) -> str:
    """Case-fold and join internal whitespace with hyphens: ``"Parked On"`` -> ``"parked-on"``."""
    return _WS.sub("-", label.strip().casefold())


class GridCell(Enum):
    TOP_LEFT = "top-left"
    TOP_CENTER = "top-center"
    TOP_RIGHT = "top-right"
    MIDDLE_LEFT = "middle-left"
    CENTER = "center"
    MIDDLE_RIGHT = "middle-right"
    BOTTOM_LEFT = "bottom-left"
    BOTTOM_CENTER = "bottom-center"
    BOTTOM_RIGHT = "bottom-right"

    @property
    def index(self) -> int:
        return _CELL_ORDER.index(self)

    @property
    def row(self) -> int:
        return self.index // 3

    @property
    def col(self) -> int:
        return self.index % 3

    @classmethod
    def from_row_col(cls, row: int, col: int) -> GridCell:
        if not (0 <= row <= 2 and 0 <= col <= 2):
            raise ValueError(f"grid position ({row}, {col}) outside 3x3 grid")
        return _CELL_ORDER[row * 3 + col]

    def __str__(self) -> str:
        return self.value


# row-major, top-left first
_CELL_ORDER: tuple[GridCell, ...] = tuple(GridCell)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"bbox has non-finite coordinates {coords}")
        if min(coords) < 0:
            raise ValidationError(f"bbox has negative coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate bbox {coords}: need x_min < x_max and y_min < y_max")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class ObjectInstance:
    object_id: int
    category_label: str
    bbox: BoundingBox
    detection_score: float = 1.0


@dataclass(frozen=True)
class RelationTriple:
    subject_id: int
    predicate_label: str
    object_id: int
    relation_score: float = 1.0


@dataclass(frozen=True)
class SceneGraph:
    """One image: objects, predicate vocabulary and relation triples.

    Construction validates every invariant, so any ``SceneGraph`` in hand is
    consistent. Instances are immutable.
    """

    image_id: str
    image_width: float
    image_height: float
    objects: tuple[ObjectInstance, ...] = ()
    relations: tuple[RelationTriple, ...] = ()
    declared_predicates: tuple[str, ...] = ()
    _by_id: Mapping[int, ObjectInstance] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "declared_predicates", tuple(self.declared_predicates))
        if not (self.image_width > 0 and self.image_height > 0):
            raise ValidationError(
                f"image {self.image_id!r}: width and height must be positive, got "
                f"{self.image_width}x{self.image_height}"
            )
        by_id: dict[int, ObjectInstance] = {}
        for obj in self.objects:
            if obj.object_id in by_id:
                raise ValidationError(f"image {self.image_id!r}: duplicate object id {obj.object_id}")
            if not obj.category_label:
                raise ValidationError(f"image {self.image_id!r}: object {obj.object_id} has empty label")
            b = obj.bbox
            if b.x_max > self.image_width or b.y_max > self.image_height:
                raise ValidationError(
                    f"image {self.image_id!r}: bbox {b.as_list()} of object {obj.object_id} "
                    f"exceeds image bounds {self.image_width}x{self.image_height}"
                )
            by_id[obj.object_id] = obj
        for rel in self.relations:
            for endpoint in (rel.subject_id, rel.object_id):
                if endpoint not in by_id:
                    raise ReferentialIntegrityError(
                        endpoint, f"image {self.image_id!r}: relation references unknown object id {endpoint}"
                    )
            if rel.subject_id == rel.object_id:
                raise ValidationError(f"image {self.image_id!r}: self-relation on object {rel.subject_id}")
            if not rel.predicate_label:
                raise ValidationError(f"image {self.image_id!r}: empty predicate label")
        object.__setattr__(self, "_by_id", by_id)

    def object(self, object_id: int) -> ObjectInstance:
        return self._by_id[object_id]

    @property
    def predicates(self) -> frozenset[str]:
        """Declared vocabulary united with every predicate used in a relation."""
        return frozenset(self.declared_predicates) | {r.predicate_label for r in self.relations}

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(o.category_label for o in self.objects)


def center(bbox: BoundingBox) -> tuple[float, float]:
    return ((bbox.x_min + bbox.x_max) / 2, (bbox.y_min + bbox.y_max) / 2)


def grid_cell(point: tuple[float, float], image_width: float, image_height: float) -> GridCell:
    """Map a pixel position to its 3x3 cell.

    Internal grid lines belong to the higher-index cell; the right and bottom
    image edges are clamped into the last row/column.
    """
    x, y = point
    if not (0 <= x <= image_width and 0 <= y <= image_height):
        raise ValidationError(f"point ({x}, {y}) outside image {image_width}x{image_height}")
    col = min(math.floor(3 * x / image_width), 2)
    row = min(math.floor(3 * y / image_height), 2)
    return GridCell.from_row_col(row, col)


def object_cell(graph: SceneGraph, obj: ObjectInstance) -> GridCell:
    return grid_cell(center(obj.bbox), graph.image_width, graph.image_height)


def category_counts(graph: SceneGraph) -> dict[str, int]:
    return dict(Counter(o.category_label for o in graph.objects))


def filter_by_score(graph: SceneGraph, min_score: float = 0.0) -> SceneGraph:
    """Drop objects and relations scored below ``min_score``; relations to dropped objects go too."""
    if min_score <= 0.0:
        return graph
    kept = [o for o in graph.objects if o.detection_score >= min_score]
    ids = {o.object_id for o in kept}
    rels = [
        r
        for r in graph.relations
        if r.relation_score >= min_score and r.subject_id in ids and r.object_id in ids
    ]
    return SceneGraph(
        graph.image_id, graph.image_width, graph.image_height, kept, rels, graph.declared_predicates
    )


# -- canonical annotation format ------------------------------------------------


def _require(doc: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in doc:
        raise ParseError(f"{where}{key}", "missing required field")
    return doc[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(where, f"expected a number, got {value!r}")
    return value


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(where, f"expected an integer, got {value!r}")
    return value


def _score(value: Any, where: str) -> float:
    s = float(_number(value, where))
    if not 0.0 <= s <= 1.0:
        raise ParseError(where, f"score {s} outside [0, 1]")
    return s


def _label(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise ParseError(where, f"expected a string, got {value!r}")
    label = normalize_label(value)
    if not label:
        raise ParseError(where, "empty label")
    return label


def parse_scene_graph(document: str | bytes | Mapping[str, Any]) -> SceneGraph:
    """Parse one canonical annotation document (JSON text or an already-decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError("<document>", f"invalid JSON: {exc}") from exc
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise ParseError("<document>", "top level must be an object")

    image_id = _require(doc, "image_id", "")
    if not isinstance(image_id, str) or not image_id:
        raise ParseError("image_id", "expected a non-empty string")
    width = _integer(_require(doc, "width", ""), "width")
    height = _integer(_require(doc, "height", ""), "height")
    if width <= 0 or height <= 0:
        raise ParseError("width" if width <= 0 else "height", "must be positive")

    raw_objects = _require(doc, "objects", "")
    if not isinstance(raw_objects, list):
        raise ParseError("objects", "expected an array")
    objects = []
    for i, raw in enumerate(raw_objects):
        where = f"objects[{i}]."
        if not isinstance(raw, Mapping):
            raise ParseError(f"objects[{i}]", "expected an object")
        oid = _integer(_require(raw, "id", where), where + "id")
        if oid < 0:
            raise ParseError(where + "id", "must be non-negative")
        label = _label(_require(raw, "label", where), where + "label")
        box = _require(raw, "bbox", where)
        if not isinstance(box, list) or len(box) != 4:
            raise ParseError(where + "bbox", f"expected [x_min, y_min, x_max, y_max], got {box!r}")
        coords = [float(_number(c, where + "bbox")) for c in box]
        try:
            bbox = BoundingBox(*coords)
        except ValidationError as exc:
            raise ValidationError(f"{where}bbox {coords}: {exc}") from exc
        score = _score(raw.get("score", 1.0), where + "score")
        objects.append(ObjectInstance(oid, label, bbox, score))

    raw_relations = doc.get("relations", [])
    if not isinstance(raw_relations, list):
        raise ParseError("relations", "expected an array")
    relations = []
    for i, raw in enumerate(raw_relations):
        where = f"relations[{i}]."
        if not isinstance(raw, Mapping):
            raise ParseError(f"relations[{i}]", "expected an object")
        relations.append(
            RelationTriple(
                _integer(_require(raw, "subject", where), where + "subject"),
                _label(_require(raw, "predicate", where), where + "predicate"),
                _integer(_require(raw, "object", where), where + "object"),
                _score(raw.get("score", 1.0), where + "score"),
            )
        )

    vocab = doc.get("predicates", [])
    if not isinstance(vocab, list):
        raise ParseError("predicates", "expected an array")
    declared = tuple(_label(p, f"predicates[{i}]") for i, p in enumerate(vocab))
    return SceneGraph(image_id, width, height, objects, relations, declared)


def _plain(x: float) -> int | float:
    return int(x) if float(x).is_integer() else x


def scene_graph_to_dict(graph: SceneGraph) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "image_id": graph.image_id,
        "width": _plain(graph.image_width),
        "height": _plain(graph.image_height),
        "objects": [
            {
                "id": o.object_id,
                "label": o.category_label,
                "bbox": [_plain(c) for c in o.bbox.as_list()],
                "score": o.detection_score,
            }
            for o in graph.objects
        ],
        "relations": [
            {"subject": r.subject_id, "predicate": r.predicate_label, "object": r.object_id, "score": r.relation_score}
            for r in graph.relations
        ],
    }
    if graph.declared_predicates:
        doc["predicates"] = list(graph.declared_predicates)
    return doc


def serialize_scene_graph(graph: SceneGraph) -> str:
    return json.dumps(scene_graph_to_dict(graph), sort_keys=True, separators=(",", ":"))


# -- foreign layouts ------------------------------------------------------------


def _clip_box(x0: float, y0: float, x1: float, y1: float, w: float, h: float, where: str) -> list[float]:
    clipped = [max(0.0, min(x0, w)), max(0.0, min(y0, h)), max(0.0, min(x1, w)), max(0.0, min(y1, h))]
    if clipped != [x0, y0, x1, y1]:
        log.warning("%s: bbox clipped to image bounds", where)
    return clipped


def from_aug(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Convert an AUG-style (COCO-like, ``[x, y, w, h]`` boxes) record into the canonical layout.

    Expected keys: ``image`` {``id``, ``width``, ``height``}, ``annotations``
    [{``id``, ``category``, ``bbox``, ``score``?}], ``relationships``
    [{``subject_id``, ``predicate``, ``object_id``}]. Anything else is dropped.
    """
    image = doc["image"]
    w, h = image["width"], image["height"]
    dropped = set(doc) - {"image", "annotations", "relationships"}
    dropped |= {f"image.{k}" for k in set(image) - {"id", "width", "height"}}
    objects = []
    for ann in doc.get("annotations", []):
        dropped |= {f"annotations.{k}" for k in set(ann) - {"id", "category", "bbox", "score"}}
        x, y, bw, bh = ann["bbox"]
        obj = {
            "id": ann["id"],
            "label": ann["category"],
            "bbox": _clip_box(x, y, x + bw, y + bh, w, h, f"annotation {ann['id']}"),
        }
        if "score" in ann:
            obj["score"] = ann["score"]
        objects.append(obj)
    relations = [
        {"subject": r["subject_id"], "predicate": r["predicate"], "object": r["object_id"]}
        for r in doc.get("relationships", [])
    ]
    if dropped:
        log.warning("aug adapter dropped fields: %s", ", ".join(sorted(dropped)))
    return {"image_id": str(image["id"]), "width": w, "height": h, "objects": objects, "relations": relations}


def from_vg150(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Convert a Visual-Genome-style record into the canonical layout.

    Objects carry ``object_id``, ``names`` (first name is kept) and ``x, y, w, h``;
    relationships carry ``subject_id``/``object_id`` (or nested ``subject``/``object``
    with ``object_id``) and ``predicate``. Attributes, synsets and region data are dropped.
    """
    w, h = doc["width"], doc["height"]
    dropped: set[str] = set(doc) - {"image_id", "width", "height", "objects", "relationships"}
    objects = []
    for o in doc.get("objects", []):
        dropped |= {f"objects.{k}" for k in set(o) - {"object_id", "names", "name", "x", "y", "w", "h"}}
        names = o.get("names") or [o.get("name", "")]
        if len(names) > 1:
            dropped.add("objects.names[1:]")
        x, y = o["x"], o["y"]
        objects.append(
            {
                "id": o["object_id"],
                "label": names[0],
                "bbox": _clip_box(x, y, x + o["w"], y + o["h"], w, h, f"object {o['object_id']}"),
            }
        )

    def endpoint(rel: Mapping[str, Any], key: str) -> int:
        if f"{key}_id" in rel:
            return rel[f"{key}_id"]
        return rel[key]["object_id"]

    relations = [
        {"subject": endpoint(r, "subject"), "predicate": r["predicate"], "object": endpoint(r, "object")}
        for r in doc.get("relationships", [])
    ]
    if dropped:
        log.warning("vg150 adapter dropped fields: %s", ", ".join(sorted(dropped)))
    return {"image_id": str(doc["image_id"]), "width": w, "height": h, "objects": objects, "relations": relations}


ADAPTERS = {"canonical": lambda d: d, "aug": from_aug, "vg150": from_vg150}


def _iter_documents(path: Path, fmt: str) -> Iterable[tuple[str, str]]:
    if fmt == "dir":
        if not path.is_dir():
            raise ParseError(str(path), "dataset path is not a directory (use --format lines for a file)")
        for p in sorted(path.glob("*.json")):
            yield str(p), p.read_text(encoding="utf-8")
    elif fmt == "lines":
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    yield f"{path}:{n}", line
    else:
        raise ParseError("--format", f"unknown dataset format {fmt!r}")


def load_dataset(path: str | Path, fmt: str = "dir", adapter: str = "canonical") -> list[SceneGraph]:
    if adapter not in ADAPTERS:
        raise ParseError("--adapter", f"unknown adapter {adapter!r}")
    convert = ADAPTERS[adapter]
    graphs = []
    seen: set[str] = set()
    for where, text in _iter_documents(Path(path), fmt):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(where, f"invalid JSON: {exc}") from exc
        try:
            graph = parse_scene_graph(convert(raw))
        except (KeyError, TypeError) as exc:
            raise ParseError(where, f"adapter {adapter!r} could not read record: {exc!r}") from exc
        except DataError as exc:
            exc.args = (f"{where}: {exc}",)
            raise
        if graph.image_id in seen:
            raise ValidationError(f"{where}: duplicate image_id {graph.image_id!r}")
        seen.add(graph.image_id)
        graphs.append(graph)
    return graphs


def write_dataset(graphs: Iterable[SceneGraph], path: str | Path, fmt: str = "lines") -> None:
    path = Path(path)
    if fmt == "lines":
        with open(path, "w", encoding="utf-8") as fh:
            for g in graphs:
                fh.write(serialize_scene_graph(g) + "\n")
    elif fmt == "dir":
        path.mkdir(parents=True, exist_ok=True)
        for g in graphs:
            (path / f"{g.image_id}.json").write_text(serialize_scene_graph(g) + "\n", encoding="utf-8")
    else:
        raise ParseError("--format", f"unknown dataset format {fmt!r}")
