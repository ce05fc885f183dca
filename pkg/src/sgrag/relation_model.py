"""Forward-only prototype relation model.

Entities and predicates are represented as a projected class prototype plus a
gated, instance-specific visual deviation::

    o   = W_role t + relu(FC_e([W_role t ; M_e(e)])) * M_e(e)
    p   = W_p t_p  + relu(FC_p([G(o_s, o_o) ; M_p(e_p)])) * M_p(e_p)
    G(a, b) = relu(a + b) - (a - b)**2

``FC`` and ``M`` are single affine maps. Only ``G`` has an analytic gradient;
it exists so the fusion can be checked against finite differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    NonDifferentiablePointError,
    ParseError,
    VocabularyError,
)
from .scene_graph import BoundingBox, RelationTriple, SceneGraph

DEFAULT_D = 64
DEFAULT_D_T = 50
DEFAULT_D_V = 128
DEFAULT_THRESHOLD = 0.5


def _vec(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {a.shape}")
    return a


def fuse(a, b) -> np.ndarray:
    a, b = _vec(a, "a"), _vec(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"fuse needs equal lengths, got {a.shape[0]} and {b.shape[0]}")
    return np.maximum(a + b, 0.0) - (a - b) ** 2


def fuse_gradient(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal Jacobians ``(dG/da, dG/db)`` as full ``d x d`` matrices."""
    a, b = _vec(a, "a"), _vec(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"fuse needs equal lengths, got {a.shape[0]} and {b.shape[0]}")
    s = a + b
    kinks = np.flatnonzero(s == 0)
    if kinks.size:
        raise NonDifferentiablePointError(kinks.tolist())
    step = (s > 0).astype(np.float64)
    diff = a - b
    return np.diag(step - 2 * diff), np.diag(step + 2 * diff)


# -- parameters -----------------------------------------------------------------


@dataclass(frozen=True)
class Affine:
    matrix: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.matrix.shape[1],):
            raise DimensionError(f"affine map expects length {self.matrix.shape[1]}, got {x.shape}")
        return self.matrix @ x + self.bias


@dataclass(frozen=True)
class ModelWeights:
    w_subject: np.ndarray
    w_object: np.ndarray
    w_predicate: np.ndarray
    fc_entity: Affine
    fc_predicate: Affine
    m_entity: Affine
    m_predicate: Affine

    def __post_init__(self) -> None:
        d, d_t = self.w_subject.shape
        d_v = self.m_entity.matrix.shape[1]
        expected = {
            "w_subject": (self.w_subject.shape, (d, d_t)),
            "w_object": (self.w_object.shape, (d, d_t)),
            "w_predicate": (self.w_predicate.shape, (d, d_t)),
            "fc_entity.matrix": (self.fc_entity.matrix.shape, (d, 2 * d)),
            "fc_entity.bias": (self.fc_entity.bias.shape, (d,)),
            "fc_predicate.matrix": (self.fc_predicate.matrix.shape, (d, 2 * d)),
            "fc_predicate.bias": (self.fc_predicate.bias.shape, (d,)),
            "m_entity.matrix": (self.m_entity.matrix.shape, (d, d_v)),
            "m_entity.bias": (self.m_entity.bias.shape, (d,)),
            "m_predicate.matrix": (self.m_predicate.matrix.shape, (d, d_v)),
            "m_predicate.bias": (self.m_predicate.bias.shape, (d,)),
        }
        for name, (got, want) in expected.items():
            if got != want:
                raise DimensionError(f"{name} has shape {got}, expected {want}")
        for name, arr in self.tensors().items():
            if not np.all(np.isfinite(arr)):
                raise DimensionError(f"{name} has non-finite entries")

    @property
    def d(self) -> int:
        return self.w_subject.shape[0]

    @property
    def d_t(self) -> int:
        return self.w_subject.shape[1]

    @property
    def d_v(self) -> int:
        return self.m_entity.matrix.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"w_subject": self.w_subject, "w_object": self.w_object, "w_predicate": self.w_predicate}
        for name in ("fc_entity", "fc_predicate", "m_entity", "m_predicate"):
            aff = getattr(self, name)
            out[f"{name}.matrix"] = aff.matrix
            out[f"{name}.bias"] = aff.bias
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> ModelWeights:
        def aff(name: str) -> Affine:
            return Affine(np.asarray(t[f"{name}.matrix"], float), np.asarray(t[f"{name}.bias"], float))

        try:
            return cls(
                np.asarray(t["w_subject"], float),
                np.asarray(t["w_object"], float),
                np.asarray(t["w_predicate"], float),
                aff("fc_entity"),
                aff("fc_predicate"),
                aff("m_entity"),
                aff("m_predicate"),
            )
        except KeyError as exc:
            raise ParseError(str(exc.args[0]), "tensor missing from weights") from exc


_TENSOR_ORDER = (
    "w_subject",
    "w_object",
    "w_predicate",
    "fc_entity.matrix",
    "fc_entity.bias",
    "fc_predicate.matrix",
    "fc_predicate.bias",
    "m_entity.matrix",
    "m_entity.bias",
    "m_predicate.matrix",
    "m_predicate.bias",
)


def init_weights(d: int = DEFAULT_D, d_t: int = DEFAULT_D_T, d_v: int = DEFAULT_D_V, seed: int = 42) -> ModelWeights:
    """Seeded uniform(-0.1, 0.1) weights; tensors are drawn in a fixed order."""
    rng = np.random.default_rng(seed)
    shapes = {
        "w_subject": (d, d_t),
        "w_object": (d, d_t),
        "w_predicate": (d, d_t),
        "fc_entity.matrix": (d, 2 * d),
        "fc_entity.bias": (d,),
        "fc_predicate.matrix": (d, 2 * d),
        "fc_predicate.bias": (d,),
        "m_entity.matrix": (d, d_v),
        "m_entity.bias": (d,),
        "m_predicate.matrix": (d, d_v),
        "m_predicate.bias": (d,),
    }
    return ModelWeights.from_tensors({k: rng.uniform(-0.1, 0.1, shapes[k]) for k in _TENSOR_ORDER})


_WEIGHTS_MAGIC = b"SGRAGW1"


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    """Write a one-line JSON header naming each tensor and its shape, then raw float64 LE data."""
    tensors = weights.tensors()
    header = {"tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in _TENSOR_ORDER]}
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC + b" " + json.dumps(header).encode() + b"\n")
        for k in _TENSOR_ORDER:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())


def load_weights(path: str | Path) -> ModelWeights:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(_WEIGHTS_MAGIC + b" "):
        raise ParseError(str(path), "not a weights file")
    header = json.loads(raw[len(_WEIGHTS_MAGIC) + 1 : nl])
    offset = nl + 1
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise ParseError(str(path), f"truncated while reading tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ParseError(str(path), f"{len(raw) - offset} trailing bytes after last tensor")
    return ModelWeights.from_tensors(tensors)


# -- prototypes -----------------------------------------------------------------


def _label_key(label: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def pseudo_prototype(label: str, d_t: int = DEFAULT_D_T, seed: int = 42) -> np.ndarray:
    """Deterministic stand-in for a word vector, from a Philox stream keyed by the label hash."""
    rng = np.random.Generator(np.random.Philox(key=_label_key(label, seed)))
    return rng.standard_normal(d_t) / np.sqrt(d_t)


@dataclass(frozen=True)
class PrototypeTable:
    dimension: int
    entity_prototypes: Mapping[str, np.ndarray]
    predicate_prototypes: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        for kind, table in (("entity", self.entity_prototypes), ("predicate", self.predicate_prototypes)):
            for label, vec in table.items():
                if np.shape(vec) != (self.dimension,):
                    raise DimensionError(
                        f"{kind} prototype {label!r} has shape {np.shape(vec)}, expected ({self.dimension},)"
                    )

    def entity(self, label: str) -> np.ndarray:
        try:
            return self.entity_prototypes[label]
        except KeyError:
            raise VocabularyError(f"no entity prototype for label {label!r}") from None

    def predicate(self, label: str) -> np.ndarray:
        try:
            return self.predicate_prototypes[label]
        except KeyError:
            raise VocabularyError(f"no predicate prototype for {label!r}") from None


def load_glove(path: str | Path) -> dict[str, np.ndarray]:
    """Read a GloVe-style text file: a word followed by its floats, one entry per line."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            vec = np.asarray([float(x) for x in parts[1:]])
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimensionError(f"{path}:{n}: vector length {vec.shape[0]} != {dim}")
            vectors[parts[0]] = vec
    return vectors


def build_prototypes(
    entity_labels,
    predicate_labels,
    d_t: int = DEFAULT_D_T,
    seed: int = 42,
    word_vectors: Mapping[str, np.ndarray] | None = None,
) -> PrototypeTable:
    """Look labels up in ``word_vectors`` (hyphenated labels average their parts); fall back to pseudo-prototypes."""
    word_vectors = word_vectors or {}

    def lookup(label: str) -> np.ndarray:
        if label in word_vectors:
            return np.asarray(word_vectors[label], float)
        parts = [word_vectors[p] for p in label.split("-") if p in word_vectors]
        if parts and len(parts) == len(label.split("-")):
            return np.mean(parts, axis=0)
        return pseudo_prototype(label, d_t, seed)

    return PrototypeTable(
        d_t,
        {label: lookup(label) for label in sorted(set(entity_labels))},
        {label: lookup(label) for label in sorted(set(predicate_labels))},
    )


# -- forward pass ---------------------------------------------------------------


def _check_prototypes(weights: ModelWeights, prototypes: PrototypeTable) -> None:
    if prototypes.dimension != weights.d_t:
        raise DimensionError(f"prototype dimension {prototypes.dimension} != weight input dimension {weights.d_t}")


def entity_representation(
    label: str, role: str, e, weights: ModelWeights, prototypes: PrototypeTable
) -> np.ndarray:
    if role == "subject":
        w = weights.w_subject
    elif role == "object":
        w = weights.w_object
    else:
        raise ValueError(f"role must be 'subject' or 'object', got {role!r}")
    _check_prototypes(weights, prototypes)
    base = w @ prototypes.entity(label)
    visual = weights.m_entity(_vec(e, "visual feature"))
    gate = np.maximum(weights.fc_entity(np.concatenate([base, visual])), 0.0)
    return base + gate * visual


def predicate_representation(
    predicate: str, o_subject, o_object, e_p, weights: ModelWeights, prototypes: PrototypeTable
) -> np.ndarray:
    _check_prototypes(weights, prototypes)
    base = weights.w_predicate @ prototypes.predicate(predicate)
    fused = fuse(o_subject, o_object)
    if fused.shape != (weights.d,):
        raise DimensionError(f"entity representations must have length {weights.d}, got {fused.shape[0]}")
    visual = weights.m_predicate(_vec(e_p, "union feature"))
    gate = np.maximum(weights.fc_predicate(np.concatenate([fused, visual])), 0.0)
    return base + gate * visual


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_predicates(
    o_subject, o_object, e_p, weights: ModelWeights, prototypes: PrototypeTable
) -> list[tuple[str, float]]:
    """Rank every predicate by cosine between the fused pair and its representation."""
    if not prototypes.predicate_prototypes:
        raise ConfigurationError("predicate vocabulary is empty")
    fused = fuse(o_subject, o_object)
    scored = [
        (p, _cosine(fused, predicate_representation(p, o_subject, o_object, e_p, weights, prototypes)))
        for p in prototypes.predicate_prototypes
    ]
    return sorted(scored, key=lambda ps: (-ps[1], ps[0]))


# -- annotation-free relation inference ----------------------------------------


def pseudo_feature(key: str, d_v: int = DEFAULT_D_V, seed: int = 42) -> np.ndarray:
    """Deterministic visual feature for a region, standing in for detector output."""
    rng = np.random.Generator(np.random.Philox(key=_label_key("feature:" + key, seed)))
    return rng.standard_normal(d_v)


def _box_key(image_id: str, box: BoundingBox) -> str:
    return image_id + ":" + ",".join(repr(float(c)) for c in box.as_list())


def infer_relations(
    graph: SceneGraph,
    weights: ModelWeights,
    prototypes: PrototypeTable,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 42,
) -> SceneGraph:
    """Replace the graph's relations with the top-1 predicate of each ordered object pair scoring >= threshold."""
    feats = {o.object_id: pseudo_feature(_box_key(graph.image_id, o.bbox), weights.d_v, seed) for o in graph.objects}
    relations = []
    for s in graph.objects:
        o_s = entity_representation(s.category_label, "subject", feats[s.object_id], weights, prototypes)
        for o in graph.objects:
            if o.object_id == s.object_id:
                continue
            o_o = entity_representation(o.category_label, "object", feats[o.object_id], weights, prototypes)
            a, b = s.bbox, o.bbox
            union = BoundingBox(
                min(a.x_min, b.x_min), min(a.y_min, b.y_min), max(a.x_max, b.x_max), max(a.y_max, b.y_max)
            )
            e_p = pseudo_feature(_box_key(graph.image_id, union), weights.d_v, seed)
            best, score = score_predicates(o_s, o_o, e_p, weights, prototypes)[0]
            if score >= threshold:
                relations.append(RelationTriple(s.object_id, best, o.object_id, max(score, 0.0)))
    return SceneGraph(
        graph.image_id, graph.image_width, graph.image_height, graph.objects, relations, graph.declared_predicates
    )
