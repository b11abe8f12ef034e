"""
Ranking pairwise interactions from network weights
==================================================

Interaction strength is read off the trained weights: a pair of inputs
interacts when both feed the same first-layer neurons and those neurons carry
weight to the output.
"""

import numpy as np

from nidglm import cann, glm, nid
from nidglm.data import generate_synthetic, split

# a one-neuron toy: incoming weights 2 and 3, downstream influence 5
toy = ([np.array([[2.0, 3.0]])], np.array([5.0]))
print("toy influence:", nid.influence(toy), "toy pair score:", nid.pair_scores(toy)[0].score)

data = generate_synthetic(100_000, seed=1)
parts = split(data, (0.8, 0.1, 0.1), seed=1)
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)
model = cann.train(parts, bench, cfg=cann.TrainConfig(seed=1))

ranking = nid.detect(model, surrogate="min", aggregation="min")
print("top pairs (planted: x4:x5 and x5:x6):")
for k, s in enumerate(ranking[:8], start=1):
    print(f"{k:3d}  {s.feature_1}:{s.feature_2}  {s.score:.4f}")
