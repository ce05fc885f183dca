"""Prototype embeddings with gated visual deviations.

A toy relation scorer: entity and predicate vectors start from word
prototypes and move toward the visual feature only where a learned gate
opens. The subject/object pair is combined by G(a, b) = ReLU(a + b) - (a - b)^2.

    python demos/03_prototype_fusion.py
"""

# %%
from __future__ import annotations

import numpy as np

from sgrag.relation_model import (
    build_prototypes,
    entity_representation,
    fuse,
    fuse_gradient,
    init_weights,
    score_predicates,
)

a = np.array([1.0, 1.0, 1.0, 0.5])
b = np.array([1.0, -3.0, 0.2, -0.4])
print("G(a, b) =", fuse(a, b))

# The Jacobians are diagonal: dG/da = 1[a+b>0] - 2(a-b), dG/db = 1[a+b>0] + 2(a-b).
ga, gb = fuse_gradient(a, b)
print("dG/da diag =", np.diag(ga))
print("dG/db diag =", np.diag(gb))

# %%
# Central differences agree with the analytic form away from the a + b = 0 kink.
h = 1e-5
numeric = np.array([(fuse(a + h * e, b) - fuse(a - h * e, b)) / (2 * h) for e in np.eye(4)]).T
print("max |analytic - numeric| =", np.abs(ga - numeric).max())

# %%
# Untrained weights, seeded: scores are meaningful only as a plumbing check.
weights = init_weights(d=16, d_t=8, d_v=12, seed=42)
protos = build_prototypes(["car", "road", "tree"], ["on", "near", "beside"], d_t=8, seed=42)
rng = np.random.default_rng(0)
e_car, e_road, e_union = rng.standard_normal((3, 12))
o_s = entity_representation("car", "subject", e_car, weights, protos)
o_o = entity_representation("road", "object", e_road, weights, protos)
for label, score in score_predicates(o_s, o_o, e_union, weights, protos):
    print(f"car {label:7s} road  cos={score:+.4f}")

# %%
# The gate only nudges the prototype: the visual deviation is small next to W t.
base = weights.w_subject @ protos.entity("car")
print(f"|W t| = {np.linalg.norm(base):.4f}, |deviation| = {np.linalg.norm(o_s - base):.4f}")
