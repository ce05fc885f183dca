"""Seeded synthetic scene graphs with question-scoped ground truth.

Each image has one *target* category whose instances relate only to each
other through a dedicated predicate, and a few distractor categories related
among themselves. The question names the target and its predicate, so the
target's chunk is the only relevant retrieval result; every additional chunk
can only add unsupported mentions.
"""

from __future__ import annotations

import numpy as np

from .evaluation import EvalItem, GroundTruthRecord
from .scene_graph import BoundingBox, ObjectInstance, RelationTriple, SceneGraph

CATEGORIES = (
    "car", "truck", "bus", "building", "tree", "ship", "bridge", "storage-tank",
    "swimming-pool", "tennis-court", "airplane", "roundabout", "harbor", "parking-lot",
)
TARGET_PREDICATES = ("aligned-with", "lined-up-with", "paired-with", "grouped-with")
DISTRACTOR_PREDICATES = ("near", "adjacent-to", "over", "surrounds")


def _box(rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    w = int(rng.integers(8, width // 6))
    h = int(rng.integers(8, height // 6))
    x = int(rng.integers(0, width - w))
    y = int(rng.integers(0, height - h))
    return BoundingBox(x, y, x + w, y + h)


def make_image(rng: np.random.Generator, image_id: str, width: int = 600, height: int = 600):
    labels = rng.choice(len(CATEGORIES), size=int(rng.integers(3, 6)), replace=False)
    target, distractors = CATEGORIES[labels[0]], [CATEGORIES[i] for i in labels[1:]]
    t_pred = TARGET_PREDICATES[int(rng.integers(len(TARGET_PREDICATES)))]

    objects: list[ObjectInstance] = []
    ids_by_label: dict[str, list[int]] = {}
    for label, n in [(target, int(rng.integers(2, 5)))] + [(d, int(rng.integers(1, 4))) for d in distractors]:
        for _ in range(n):
            oid = len(objects)
            objects.append(ObjectInstance(oid, label, _box(rng, width, height)))
            ids_by_label.setdefault(label, []).append(oid)

    t_ids = ids_by_label[target]
    relations = [RelationTriple(a, t_pred, b) for a, b in zip(t_ids, t_ids[1:])]
    d_ids = [i for d in distractors for i in ids_by_label[d]]
    for _ in range(int(rng.integers(1, 4))):
        a, b = rng.choice(d_ids, size=2, replace=False)
        if objects[a].category_label != objects[b].category_label:
            pred = DISTRACTOR_PREDICATES[int(rng.integers(len(DISTRACTOR_PREDICATES)))]
            relations.append(RelationTriple(int(a), pred, int(b)))

    graph = SceneGraph(image_id, width, height, objects, relations)
    question = f"Which {target} is {t_pred} another {target}, and where is each {target}?"
    full = GroundTruthRecord.from_graph(graph)
    truth = GroundTruthRecord(
        image_id,
        {target: full.categories[target]},
        {target: full.locations[target]},
        frozenset({f"{target} {t_pred} {target}"}),
    )
    return graph, EvalItem(image_id, question, truth)


def make_corpus(n_images: int = 20, seed: int = 42) -> tuple[list[SceneGraph], list[EvalItem]]:
    rng = np.random.default_rng(seed)
    graphs, items = [], []
    for i in range(n_images):
        g, item = make_image(rng, f"img{i:03d}")
        graphs.append(g)
        items.append(item)
    return graphs, items


def random_graph(rng: np.random.Generator, image_id: str = "rand", max_objects: int = 12) -> SceneGraph:
    """Unstructured random graph for property tests."""
    width, height = int(rng.integers(60, 800)), int(rng.integers(60, 800))
    n = int(rng.integers(0, max_objects + 1))
    objects = [ObjectInstance(i, CATEGORIES[int(rng.integers(0, 6))], _box(rng, width, height)) for i in range(n)]
    relations = []
    if n >= 2:
        for _ in range(int(rng.integers(0, 2 * n))):
            a, b = rng.choice(n, size=2, replace=False)
            relations.append(RelationTriple(int(a), DISTRACTOR_PREDICATES[int(rng.integers(4))], int(b)))
    return SceneGraph(image_id, width, height, objects, relations)
