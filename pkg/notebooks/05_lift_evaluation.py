"""
Double lift comparison
======================

Rows are sorted by how much a competitor disagrees with the benchmark; within
each bucket both models are compared with the observed frequency.
"""

from nidglm import evaluation, glm, selection
from nidglm.data import generate_synthetic, split

data = generate_synthetic(100_000, seed=2)
parts = split(data, (0.8, 0.1, 0.1), seed=2)
terms = [glm.parse_term(t, data.schema) for t in ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]]
bench = glm.fit_poisson(parts.fitting, terms)
better = selection.add_interaction(bench, parts.fitting, glm.NumNum("x4", 1, "x5", 1))

test = parts.test
comp, base = glm.predict_rate(better, test), glm.predict_rate(bench, test)
report = evaluation.lift_report(comp, base, test.claims, test.exposure, evaluation.QUANTILE, n_bins=10)
print(f"{'ratio range':>22s} {'weight':>7s} {'observed':>9s} {'competitor':>10s} {'benchmark':>9s}")
for b in report.bins:
    print(f"({b.lower:+9.4f}, {b.upper:+9.4f}] {b.exposure_weight:7.3f} {b.waof:9.4f} "
          f"{b.wapf_competitor:10.4f} {b.wapf_benchmark:9.4f}")

for name, value in evaluation.lift_kpis(comp, base, test.claims, test.exposure).items():
    print(f"{name:24s} {value:.5f}")
