"""
Boosting the GLM with a neural network
======================================

The network starts as an exact copy of the benchmark and learns only what the
GLM misses.
"""

import numpy as np

from nidglm import cann, glm
from nidglm.data import generate_synthetic, split

data = generate_synthetic(50_000, seed=1)
parts = split(data, (0.8, 0.1, 0.1), seed=1)
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)

untrained = cann.init_cann(bench, parts.train, seed=1)
gap = np.max(np.abs(cann.predict(untrained, parts.test) / glm.predict(bench, parts.test) - 1))
print("input neurons:", untrained.input_labels())
print("untrained network vs benchmark, max relative gap:", gap)

model = cann.train(parts, bench, cann.NnArchitecture(), cann.TrainConfig(seed=1))
print(f"stopped after {model.stopped_epoch} epochs, best epoch {model.best_epoch}")
for epoch, train_dev, val_dev in model.training_log[:8]:
    print(f"  epoch {epoch:3d}  train {train_dev:.5f}  validation {val_dev:.5f}")

test = parts.test
print("test mean deviance, benchmark:", glm.mean_poisson_deviance(test.claims, glm.predict(bench, test)))
print("test mean deviance, network:  ", glm.mean_poisson_deviance(test.claims, cann.predict(model, test)))
print("network balance gap on train:", cann.balance_violation(model, parts.train))
