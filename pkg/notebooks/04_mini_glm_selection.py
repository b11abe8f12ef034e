"""
Choosing the form of the next interaction
=========================================

Each top-ranked pair is expanded into candidate terms and fitted as a small
GLM on top of the frozen benchmark; the lowest AIC wins.
"""

from nidglm import glm, selection
from nidglm.data import generate_synthetic, split
from nidglm.nid import FeaturePairScore

data = generate_synthetic(100_000, seed=1)
parts = split(data, (0.8, 0.1, 0.1), seed=1)
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)

# pairs as a detection step might rank them
top = [FeaturePairScore("x4", "x5", 3.0), FeaturePairScore("x5", "x6", 2.0), FeaturePairScore("x6", "x9", 1.0)]
rec = selection.recommend(parts, bench, top, selection.FormsConfig(powers=(1, 2), bins=5))

print(f"{'form':16s} {'AIC':>12s} {'test deviance':>14s}")
for r in rec.reports[:10]:
    print(f"{r.form_label:16s} {r.aic:12.1f} {r.test_mean_deviance:14.5f}")
print("recommended:", rec.winner.form_label)

updated = selection.add_interaction(bench, parts.fitting, rec.term)
before = glm.metrics(bench, parts.test)["mean_poisson_deviance"]
after = glm.metrics(updated, parts.test)["mean_poisson_deviance"]
print(f"test deviance {before:.5f} -> {after:.5f} ({1 - after / before:.2%} lower)")
