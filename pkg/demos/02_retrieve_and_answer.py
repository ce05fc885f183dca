"""Question in, grounded answer out, fully offline.

The local hashing embedder and the template stub backend stand in for a
hosted embedding model and LLM; swapping them for the remote clients only
changes two constructor calls.

    python demos/02_retrieve_and_answer.py
"""

# %%
from __future__ import annotations

import numpy as np

from sgrag.answer import StubBackend, ask, index_graph, replay_prompt
from sgrag.evaluation import GroundTruthRecord, extract_mentions, score_attributes
from sgrag.prompt import PromptTemplate
from sgrag.synthetic import make_image
from sgrag.vector_store import LocalHashEmbedder, embed

graph, item = make_image(np.random.default_rng(3), "demo")
embedder = LocalHashEmbedder()
index = index_graph(graph, embedder)
print(f"{len(index)} chunks indexed at dimension {index.dimension}")
print(item.question)

# %%
# Exact cosine search; ties would be broken by chunk id.
for hit in index.top_k(embed(item.question, embedder), 4):
    print(f"{hit.score:+.3f}  {hit.chunk_id}")

# %%
record = ask(index, item.question, k=4, embedder=embedder, backend=StubBackend("template"))
print(record.prompt.text)
print()
print("answer:", record.answer_text)

# %%
# The prompt can be rebuilt from the recorded chunk ids alone.
assert replay_prompt(record, index, PromptTemplate()) == record.prompt

# %%
# Score the answer against the question-scoped truth, then against the whole image.
labels, preds = graph.labels, graph.predicates
mentions = extract_mentions(record.answer_text, labels, preds)
for name, truth in (("question", item.truth), ("image", GroundTruthRecord.from_graph(graph))):
    scores = score_attributes(mentions, truth)
    print(f"{name:9s}", {a: round(s["f1"], 3) for a, s in scores.to_dict().items()})
