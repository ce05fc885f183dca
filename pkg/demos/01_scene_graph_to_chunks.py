"""From annotations to knowledge chunks.

Walks one small aerial scene through parsing, grid placement and the
per-category text records that later get embedded.

    python demos/01_scene_graph_to_chunks.py
"""

# %%
from __future__ import annotations

from sgrag.chunks import build_chunks, dump_chunks
from sgrag.scene_graph import center, grid_cell, object_cell, parse_scene_graph

# A 600x400 frame: three cars in a parking lot, one truck on the road.
doc = {
    "image_id": "lot-01",
    "width": 600,
    "height": 400,
    "objects": [
        {"id": 1, "label": "Car", "bbox": [40, 30, 70, 50]},
        {"id": 2, "label": "car", "bbox": [90, 35, 120, 55]},
        {"id": 3, "label": "car", "bbox": [250, 180, 280, 200]},
        {"id": 4, "label": "parking lot", "bbox": [20, 10, 220, 120]},
        {"id": 5, "label": "truck", "bbox": [450, 300, 520, 340]},
        {"id": 6, "label": "road", "bbox": [0, 280, 600, 360]},
    ],
    "relations": [
        {"subject": 1, "predicate": "parked in", "object": 4},
        {"subject": 2, "predicate": "parked in", "object": 4},
        {"subject": 5, "predicate": "on", "object": 6},
    ],
}
graph = parse_scene_graph(doc)

# Labels are case-folded and multi-word labels become hyphenated.
print(sorted(graph.labels))
print(sorted(graph.predicates))

# %%
# Each object is placed by the center of its box in a 3x3 grid.
for obj in graph.objects:
    print(f"{obj.object_id}  {obj.category_label:12s} center={center(obj.bbox)}  cell={object_cell(graph, obj).value}")

# Grid lines belong to the cell on their right/below: x = 200 is already column 1.
print(grid_cell((199.9, 0), 600, 400).value, grid_cell((200, 0), 600, 400).value)

# %%
# One chunk per category. A relation appears in the chunks of both endpoints,
# so a question about the parking lot still retrieves what is parked in it.
for chunk in build_chunks(graph):
    print(chunk.canonical_text)

# %%
# The dump is byte-stable: the same graph always produces the same lines.
print(dump_chunks(build_chunks(graph))[:160], "...")
