"""
Benchmark Poisson GLM on the synthetic portfolio
================================================

Simulate a portfolio with two planted interactions, split it, and fit a
main-effects GLM that knows nothing about them.
"""

import numpy as np

from nidglm import glm
from nidglm.data import generate_synthetic, split

data = generate_synthetic(50_000, seed=1)
parts = split(data, (0.8, 0.1, 0.1), seed=1)
print("rows per split:", parts.train.n, parts.validation.n, parts.test.n)
print("claim frequency:", data.claims.sum() / data.exposure.sum())

# main effects only; x4, x5, x6 act through interactions in the true model
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)

for c in bench.coefficient_stats:
    print(f"{c.label:8s} {c.estimate:+.4f}  (se {c.std_error:.4f})")

fit = bench.fit
print(f"IRLS iterations: {fit.iterations}, deviance path: {np.round(fit.deviance_path, 2)}")
print("AIC:", round(fit.aic, 1))
print("test mean deviance:", glm.metrics(bench, parts.test)["mean_poisson_deviance"])

# with an intercept the fitted exposure-weighted frequency matches the observed one
wapf = glm.wapf(glm.predict(bench, parts.fitting), parts.fitting.exposure)
print("balance gap:", wapf - glm.waof(parts.fitting.claims, parts.fitting.exposure))
