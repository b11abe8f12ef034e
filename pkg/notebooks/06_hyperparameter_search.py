"""
Grid and genetic search over network settings
=============================================

Both searches take a training function and a scoring function, so a cheap
synthetic landscape shows the genetic algorithm at work before a real
activation grid is trained.
"""

from nidglm import glm, tuning
from nidglm.data import generate_synthetic, split

grid = tuning.HyperGrid({f"g{i}": [0, 1, 2] for i in range(5)})
target = (2, 0, 1, 2, 1)
result = tuning.ga_search(grid, tuning.GaConfig(seed=0), lambda point, seed: point,
                          lambda p: sum(abs(p[f"g{i}"] - t) for i, t in enumerate(target)), kpi="distance")
print("best genotype:", result.best.genes, "after", len(result.log) - 1, "generations,",
      result.evaluations, "of", grid.size, "points evaluated")

data = generate_synthetic(50_000, seed=1)
parts = split(data, (0.8, 0.1, 0.1), seed=1)
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)

activations = tuning.HyperGrid({"activation": ["lrelu", "sigmoid", "tanh"]})
board = tuning.grid_search(activations, tuning.cann_train_fn(parts, bench), tuning.validation_kpis(parts))
for e in board.leaderboard:
    print(f"{e.point['activation']:8s} validation deviance {e.kpis['val_deviance']:.5f}  "
          f"mae_lift_qbb {e.kpis['mae_lift_qbb']:.5f}")
