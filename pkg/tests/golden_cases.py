"""Prompt fixtures pinned by the files in tests/golden/.

Run this module directly to rewrite the golden files after an intended
format change, then review the diff by hand.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sgrag.answer import index_graph
from sgrag.prompt import PromptTemplate, build_prompt
from sgrag.scene_graph import BoundingBox, ObjectInstance, SceneGraph, parse_scene_graph
from sgrag.synthetic import make_image
from sgrag.vector_store import LocalHashEmbedder, VectorIndex, embed

GOLDEN_DIR = Path(__file__).parent / "golden"

CAR_ROAD = {
    "image_id": "carroad",
    "width": 300,
    "height": 300,
    "objects": [
        {"id": 1, "label": "car", "bbox": [130, 130, 170, 170]},
        {"id": 2, "label": "road", "bbox": [0, 200, 300, 260]},
    ],
    "relations": [{"subject": 1, "predicate": "parked-on", "object": 2}],
}


def _prompt(index: VectorIndex, question: str, k: int, template: PromptTemplate | None = None):
    emb = LocalHashEmbedder()
    hits = index.top_k(embed(question, emb), k)
    return build_prompt(template or PromptTemplate(), hits, question, k)


def cases():
    emb = LocalHashEmbedder()
    car_road = parse_scene_graph(CAR_ROAD)
    lone = SceneGraph("lone", 300, 300, [ObjectInstance(1, "car", BoundingBox(130, 130, 170, 170))])
    synth, item = make_image(np.random.default_rng(7), "synth")
    return {
        # two chunks, k = 4: the context holds both
        "car_road_k4": _prompt(index_graph(car_road, emb), "Where is the car parked?", 4),
        "single_chunk_k4": _prompt(index_graph(lone, emb), "How many cars are there?", 4),
        "empty_context": _prompt(VectorIndex(256), "Is there a bridge?", 4),
        "synthetic_k4": _prompt(index_graph(synth, emb), item.question, 4),
        "custom_head_k1": _prompt(
            index_graph(car_road, emb), "What is the road under?", 1, PromptTemplate("Answer tersely.\nUse the context.")
        ),
    }


if __name__ == "__main__":
    GOLDEN_DIR.mkdir(exist_ok=True)
    for name, prompt in cases().items():
        (GOLDEN_DIR / f"{name}.txt").write_bytes(prompt.text.encode("utf-8"))
        print(name, prompt.retrieved_chunk_ids, prompt.k_used)
