"""Mini-GLM comparison of candidate interactions on top of a frozen benchmark."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import calinski_harabasz_score

from . import glm
from .data import CATEGORICAL, Column, DataError, Dataset, SplitDataset

KPIS = ("aic", "bic", "residual_deviance")


class SelectionError(RuntimeError):
    def __init__(self, message: str, reports=()):
        super().__init__(message)
        self.reports = list(reports)


@dataclass(frozen=True)
class CandidateInteraction:
    feature_1: str
    feature_2: str
    forms: tuple

    @property
    def name(self) -> str:
        return f"{self.feature_1}:{self.feature_2}"


@dataclass(frozen=True)
class MiniGlmReport:
    candidate: CandidateInteraction
    form: object
    aic: float = float("nan")
    bic: float = float("nan")
    residual_deviance: float = float("nan")
    test_mean_deviance: float = float("nan")
    n_coef: int = 0
    coefficient_pvalues: tuple = ()
    converged: bool = False
    error: str | None = None

    @property
    def form_label(self) -> str:
        return self.form.label


@dataclass(frozen=True)
class ClusterMap:
    feature: str
    k: int
    assignment: dict
    ch_scores: dict

    @property
    def column_name(self) -> str:
        return f"{self.feature}_cl{self.k}"


@dataclass(frozen=True)
class FormsConfig:
    """How candidates are expanded into concrete interaction terms.

    ``powers`` is the exponent grid applied to numeric sides; ``bins`` adds a
    quantile-binned factor-by-factor variant for numeric sides; ``clusters``
    maps high-cardinality factors to an embedding clustering used as an extra
    coarsened variant.
    """

    powers: tuple = (1, 2, 3)
    bins: int | None = None
    clusters: dict = field(default_factory=dict)


@dataclass
class Recommendation:
    reports: list
    winner: MiniGlmReport
    kpi: str

    @property
    def term(self):
        return self.winner.form


def benchmark_offset(benchmark: glm.GlmModel, data: Dataset) -> np.ndarray:
    """``ln v + ln lambda_benchmark`` per row."""
    return np.log(glm.predict(benchmark, data))


def fit_mini_glm(data: Dataset, benchmark: glm.GlmModel, form, test: Dataset | None = None,
                 candidate: CandidateInteraction | None = None,
                 offset=None, test_offset=None) -> MiniGlmReport:
    """Fit ``N ~ Poisson(v * lambda_benchmark * exp(I))`` with only the
    interaction columns and no intercept."""
    candidate = candidate or CandidateInteraction(*form.features(), (form,))
    offset = benchmark_offset(benchmark, data) if offset is None else offset
    if not np.all(np.isfinite(offset)):
        raise glm.GlmError("benchmark predictions must be strictly positive")
    model = glm.fit_poisson(data, [form], offset=offset)
    test_dev = float("nan")
    if test is not None:
        t_off = benchmark_offset(benchmark, test) if test_offset is None else test_offset
        test_dev = glm.mean_poisson_deviance(test.claims, glm.predict(model, test, t_off))
    return MiniGlmReport(
        candidate, form,
        aic=model.fit.aic, bic=model.fit.bic, residual_deviance=model.fit.residual_deviance,
        test_mean_deviance=test_dev, n_coef=model.n_coef,
        coefficient_pvalues=tuple(c.p_value for c in model.coefficient_stats),
        converged=model.fit.converged,
    )


# --------------------------------------------------------------------------
# coarsening of features


def quantile_edges(values: np.ndarray, bins: int) -> np.ndarray:
    if bins < 2:
        raise DataError("need at least 2 bins")
    values = np.asarray(values, dtype=np.float64)
    if np.unique(values).size < bins:
        raise DataError(f"fewer distinct values than bins ({bins})")
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1))
    if np.any(np.diff(edges[1:-1]) <= 0):
        raise DataError("quantile edges are not distinct; use fewer bins")
    return edges


def assign_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index per value; a value equal to an inner edge goes to the lower bin."""
    return np.searchsorted(edges[1:-1], values, side="left").astype(np.int64)


def quantile_bin(data: Dataset, feature: str, bins: int, source: Dataset | None = None,
                 edges: np.ndarray | None = None):
    """Add ``<feature>_q<bins>``, a factor of equal-probability bins.

    Edges come from ``source`` (the training split) unless given. Returns the
    extended dataset and the edges.
    """
    if data.schema[feature].is_categorical:
        raise DataError(f"{feature!r} is not numeric")
    if edges is None:
        edges = quantile_edges((source if source is not None else data).features[feature], bins)
    codes = assign_bins(data.features[feature], edges)
    name = f"{feature}_q{bins}"
    col = Column(name, CATEGORICAL, tuple(str(j) for j in range(bins)), 0)
    return data.with_feature(col, codes), edges


def cluster_embeddings(model, feature: str, k_range=None, seed: int = 0, n_init: int = 10) -> ClusterMap:
    """k-means on the embedding rows of ``feature`` for each k in ``k_range``;
    the k with the highest Calinski-Harabasz index wins."""
    specs = [s.feature for s in model.embedding_specs]
    if feature not in specs:
        raise ValueError(f"model has no embedding for {feature!r}")
    E = np.asarray(model.weights.embeddings[specs.index(feature)], dtype=np.float64)
    k_cat = E.shape[0]
    if k_range is None:
        k_range = (2, min(10, k_cat - 1))
    lo, hi = int(k_range[0]), int(k_range[1])
    if lo < 2 or hi > k_cat - 1 or lo > hi:
        raise ValueError(f"k_range must lie within [2, {k_cat - 1}]")
    labels_by_k, scores = {}, {}
    for k in range(lo, hi + 1):
        km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(E)
        labels_by_k[k] = km.labels_
        n_distinct = np.unique(km.labels_).size
        scores[k] = float(calinski_harabasz_score(E, km.labels_)) if 1 < n_distinct < k_cat else float("nan")
    finite = {k: v for k, v in scores.items() if np.isfinite(v)}
    best = max(finite, key=lambda k: (finite[k], -k)) if finite else lo
    cats = model.embedding_specs[specs.index(feature)].categories
    labels = labels_by_k[best]
    # relabel clusters by first appearance so the map is canonical
    remap = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    keys = list(cats) if cats and len(cats) == k_cat else [str(j) for j in range(k_cat)]
    assignment = {keys[j]: remap[int(labels[j])] for j in range(k_cat)}
    return ClusterMap(feature, best, assignment, scores)


def apply_clusters(data: Dataset, cmap: ClusterMap) -> Dataset:
    col = data.schema[cmap.feature]
    lookup = np.array([cmap.assignment[c] for c in col.categories], dtype=np.int64)
    k = max(cmap.assignment.values()) + 1
    new = Column(cmap.column_name, CATEGORICAL, tuple(str(j) for j in range(k)))
    return data.with_feature(new, lookup[data.features[cmap.feature]])


# --------------------------------------------------------------------------
# candidate expansion and recommendation


def expand_forms(f1: str, f2: str, schema, config: FormsConfig) -> list:
    c1, c2 = schema[f1].is_categorical, schema[f2].is_categorical
    forms = []
    if not c1 and not c2:
        forms += [glm.NumNum(f1, a, f2, b) for a, b in product(config.powers, config.powers)]
        if config.bins:
            forms.append(glm.CatCat(f"{f1}_q{config.bins}", f"{f2}_q{config.bins}"))
    elif c1 and c2:
        forms.append(glm.CatCat(f1, f2))
        for cat, other in ((f1, f2), (f2, f1)):
            if cat in config.clusters:
                forms.append(glm.CatCat(config.clusters[cat].column_name, other))
    else:
        num, cat = (f2, f1) if c1 else (f1, f2)
        forms += [glm.NumCat(num, cat, a) for a in config.powers]
        if cat in config.clusters:
            forms += [glm.NumCat(num, config.clusters[cat].column_name, a) for a in config.powers]
        if config.bins:
            forms.append(glm.CatCat(f"{num}_q{config.bins}", cat))
    return forms


def prepare_columns(data: Dataset, needed, config: FormsConfig, source: Dataset, edges: dict) -> Dataset:
    """Add the binned or clustered columns named in ``needed``; bin edges come
    from ``source`` and are cached in ``edges``."""
    for name in needed:
        if config.bins and name not in data.schema and name.endswith(f"_q{config.bins}"):
            base = name[: -len(f"_q{config.bins}")]
            if base not in edges:
                edges[base] = quantile_edges(source.features[base], config.bins)
            data, _ = quantile_bin(data, base, config.bins, edges=edges[base])
    for cmap in config.clusters.values():
        if cmap.column_name in needed and cmap.column_name not in data.schema:
            data = apply_clusters(data, cmap)
    return data


def _kpi_key(report: MiniGlmReport, kpi: str):
    return (getattr(report, kpi), report.n_coef, report.candidate.name, report.form_label)


def recommend(data: SplitDataset | Dataset, benchmark: glm.GlmModel, top: Sequence, config: FormsConfig | None = None,
              kpi: str = "aic", test: Dataset | None = None, max_workers: int | None = 1) -> Recommendation:
    """Fit a mini-GLM for every relevant form of every top-ranked pair and pick
    the one with the lowest ``kpi``.

    With a :class:`SplitDataset`, mini-GLMs are fitted on train+validation and
    scored on test.
    """
    if kpi not in KPIS:
        raise ValueError(f"kpi must be one of {KPIS}")
    if not top:
        raise ValueError("no candidate interactions given")
    config = config or FormsConfig()
    if isinstance(data, SplitDataset):
        test = data.test if test is None else test
        fit_data, source = data.fitting, data.train
    else:
        fit_data, source = data, data

    candidates = []
    for s in top:
        forms = expand_forms(s.feature_1, s.feature_2, fit_data.schema, config)
        candidates.append(CandidateInteraction(s.feature_1, s.feature_2, tuple(forms)))
    needed = {name for c in candidates for f in c.forms for name in f.features()}
    edges: dict = {}
    fit_data = prepare_columns(fit_data, needed, config, source, edges)
    if test is not None:
        test = prepare_columns(test, needed, config, source, edges)
    offset = benchmark_offset(benchmark, fit_data)
    test_offset = benchmark_offset(benchmark, test) if test is not None else None

    def run(job):
        cand, form = job
        try:
            return fit_mini_glm(fit_data, benchmark, form, test, cand, offset, test_offset)
        except (glm.GlmError, DataError) as exc:
            return MiniGlmReport(cand, form, error=str(exc))

    jobs = [(c, f) for c in candidates for f in c.forms]
    if max_workers == 1:
        reports = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers) as pool:
            reports = list(pool.map(run, jobs))
    ok = [r for r in reports if r.converged and r.error is None]
    if not ok:
        detail = "; ".join(f"{r.candidate.name} {r.form_label}: {r.error or 'not converged'}" for r in reports)
        raise SelectionError(f"every mini-GLM failed: {detail}", reports)
    winner = min(ok, key=lambda r: _kpi_key(r, kpi))
    ordered = sorted(ok, key=lambda r: _kpi_key(r, kpi)) + [r for r in reports if r not in ok]
    return Recommendation(ordered, winner, kpi)


def add_interaction(benchmark: glm.GlmModel, data: Dataset, form, **kwargs) -> glm.GlmModel:
    """Refit the benchmark with one extra term."""
    return glm.fit_poisson(data, tuple(benchmark.terms) + (form,), **kwargs)


def write_comparison(rec: Recommendation, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["candidate", "form", "aic", "bic", "resid_deviance", "test_deviance", "converged"])
        for r in rec.reports:
            w.writerow([r.candidate.name, r.form_label, repr(float(r.aic)), repr(float(r.bic)),
                        repr(float(r.residual_deviance)), repr(float(r.test_mean_deviance)),
                        str(r.converged and r.error is None).lower()])


def recommendation_record(rec: Recommendation) -> dict:
    w = rec.winner
    return {
        "kpi": rec.kpi,
        "feature_1": w.candidate.feature_1,
        "feature_2": w.candidate.feature_2,
        "form": w.form_label,
        "term": glm.term_to_dict(w.form),
        "aic": w.aic,
        "bic": w.bic,
        "residual_deviance": w.residual_deviance,
        "test_mean_deviance": w.test_mean_deviance,
        "coefficient_pvalues": list(w.coefficient_pvalues),
    }


def write_recommendation(rec: Recommendation, path, extra: dict | None = None) -> None:
    record = recommendation_record(rec)
    if extra:
        record.update(extra)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
