"""Hyper-parameter search for the CANN: exhaustive grid search and a
steady-state genetic algorithm over the same grid.

Both searches are generic. ``train_fn(point, seed)`` builds a model from a
hyper-parameter point (a ``dict``) and ``kpi_fn(model)`` scores it, returning
either a float or a dict of named KPIs; lower is better.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from itertools import product
from typing import Callable

import numpy as np

from . import cann, evaluation, glm
from .data import SplitDataset

DEFAULT_KPI = "val_deviance"


class TuningError(RuntimeError):
    def __init__(self, message: str, failures=()):
        super().__init__(message)
        self.failures = list(failures)


@dataclass(frozen=True)
class HyperGrid:
    """Ordered mapping from hyper-parameter name to its candidate values."""

    params: dict

    def __post_init__(self):
        if not self.params:
            raise ValueError("grid has no hyper-parameters")
        clean = {}
        for name, values in self.params.items():
            values = tuple(tuple(v) if isinstance(v, list) else v for v in values)
            if not values:
                raise ValueError(f"no candidates for {name!r}")
            clean[name] = values
        object.__setattr__(self, "params", clean)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.params.values())

    @property
    def size(self) -> int:
        return int(np.prod(self.cardinalities, dtype=object))

    def point(self, genes) -> dict:
        genes = tuple(int(g) for g in genes)
        if len(genes) != len(self.params):
            raise ValueError("genotype length does not match the grid")
        for g, k in zip(genes, self.cardinalities):
            if not 0 <= g < k:
                raise ValueError(f"gene {g} outside [0, {k})")
        return {name: values[g] for (name, values), g in zip(self.params.items(), genes)}

    def genotypes(self):
        return product(*(range(k) for k in self.cardinalities))

    def to_dict(self) -> dict:
        return {k: [list(v) if isinstance(v, tuple) else v for v in vals] for k, vals in self.params.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperGrid":
        return cls(dict(d))


@dataclass(frozen=True)
class Genotype:
    genes: tuple
    fitness: float = float("nan")


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 20
    max_generations: int = 200
    mutation_rate: float = 0.2
    elitism: bool = True
    seed: int = 0
    stall_patience: int = 50

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.max_generations < 0:
            raise ValueError("max_generations must be >= 0")
        if self.stall_patience < 1:
            raise ValueError("stall_patience must be >= 1")


@dataclass(frozen=True)
class Evaluation:
    genes: tuple
    point: dict
    seed: int
    kpis: dict = field(default_factory=dict)
    error: str | None = None
    model: object = None

    def fitness(self, kpi: str) -> float:
        return float(self.kpis.get(kpi, np.inf)) if self.error is None else float("inf")


@dataclass
class GridResult:
    best: Evaluation
    leaderboard: list
    failures: list
    kpi: str


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    worst_fitness: float
    mean_fitness: float
    child: tuple
    child_fitness: float
    replaced: bool


@dataclass
class GaResult:
    best: Evaluation
    population: list
    log: list
    failures: list
    evaluations: int
    kpi: str


def _seed_for(base: int, genes) -> int:
    return int(np.random.SeedSequence([int(base), *(int(g) for g in genes)]).generate_state(1)[0])


def _as_kpis(value, kpi: str) -> dict:
    if isinstance(value, dict):
        return {k: float(v) for k, v in value.items()}
    return {kpi: float(value)}


def _evaluate(grid: HyperGrid, genes, seed: int, train_fn, kpi_fn, kpi: str, keep_model: bool) -> Evaluation:
    point = grid.point(genes)
    try:
        model = train_fn(point, seed)
        kpis = _as_kpis(kpi_fn(model), kpi)
    except Exception as exc:  # a failed configuration is recorded, not fatal
        return Evaluation(tuple(genes), point, seed, error=f"{type(exc).__name__}: {exc}")
    if kpi not in kpis:
        return Evaluation(tuple(genes), point, seed, kpis, error=f"kpi_fn did not report {kpi!r}")
    if not np.isfinite(kpis[kpi]):
        return Evaluation(tuple(genes), point, seed, kpis, error=f"{kpi} is {kpis[kpi]}")
    return Evaluation(tuple(genes), point, seed, kpis, model=model if keep_model else None)


def _map(fn, items, max_workers):
    if max_workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers) as pool:
        return list(pool.map(fn, items))


def grid_search(grid: HyperGrid, train_fn: Callable, kpi_fn: Callable, seed: int = 0,
                kpi: str = DEFAULT_KPI, max_workers: int | None = 1, keep_models: bool = False) -> GridResult:
    """Train and score every grid point; the leaderboard is sorted by ``kpi``
    with ties broken by grid order. Failed points are listed separately."""
    genotypes = list(grid.genotypes())
    evals = _map(lambda g: _evaluate(grid, g, _seed_for(seed, g), train_fn, kpi_fn, kpi, keep_models),
                 genotypes, max_workers)
    ok = [e for e in evals if e.error is None]
    failures = [e for e in evals if e.error is not None]
    if not ok:
        raise TuningError("every grid point failed", failures)
    order = {g: i for i, g in enumerate(genotypes)}
    leaderboard = sorted(ok, key=lambda e: (e.fitness(kpi), order[e.genes]))
    return GridResult(leaderboard[0], leaderboard, failures, kpi)


def _initial_genotypes(grid: HyperGrid, n: int, rng: np.random.Generator) -> list[tuple]:
    card = grid.cardinalities
    if grid.size <= 10**6:
        # distinct combinations while the grid allows it
        flat = rng.choice(grid.size, size=min(n, grid.size), replace=False)
        out = [tuple(int(i) for i in np.unravel_index(f, card)) for f in flat]
    else:
        out = []
    while len(out) < n:
        out.append(tuple(int(rng.integers(k)) for k in card))
    return out


def _mutate(genes: list, card, rate: float, rng: np.random.Generator) -> list:
    for i, k in enumerate(card):
        if k > 1 and rng.random() < rate:
            alt = int(rng.integers(k - 1))
            genes[i] = alt if alt < genes[i] else alt + 1
    return genes


def ga_search(grid: HyperGrid, cfg: GaConfig, train_fn: Callable, kpi_fn: Callable,
              kpi: str = DEFAULT_KPI, max_workers: int | None = 1, keep_models: bool = False) -> GaResult:
    """Steady-state genetic algorithm.

    Each generation the two fittest individuals produce one child by uniform
    crossover; every gene then mutates to a different value with probability
    ``mutation_rate``. With ``elitism`` the child replaces the worst individual
    only if strictly fitter, so no individual better than the child is ever
    lost; without it the worst is always replaced. A child already present in
    the population is discarded to keep the population diverse. Genotypes are evaluated
    once and cached. The search stops after ``max_generations`` or after
    ``stall_patience`` generations without a new best.
    """
    rng = np.random.default_rng(cfg.seed)
    card = grid.cardinalities
    cache: dict[tuple, Evaluation] = {}
    failures: list[Evaluation] = []

    def evaluate_many(genotypes):
        todo = [g for g in dict.fromkeys(genotypes) if g not in cache]
        for e in _map(lambda g: _evaluate(grid, g, _seed_for(cfg.seed, g), train_fn, kpi_fn, kpi, keep_models),
                      todo, max_workers):
            cache[e.genes] = e
            if e.error is not None:
                failures.append(e)
        return [cache[g] for g in genotypes]

    population = evaluate_many(_initial_genotypes(grid, cfg.population_size, rng))
    if all(e.error is not None for e in population):
        raise TuningError("every individual of the initial population failed", failures)

    def fit(e):
        return e.fitness(kpi)

    def best_of(pop):
        return min(pop, key=lambda e: (fit(e), e.genes))

    best = best_of(population)
    fits = [fit(e) for e in population]
    log = [GenerationRecord(0, fit(best), max(fits), _finite_mean(fits), (), float("nan"), False)]
    stall = 0
    for gen in range(1, cfg.max_generations + 1):
        ranked = sorted(range(len(population)), key=lambda i: (fit(population[i]), population[i].genes))
        p1, p2 = population[ranked[0]].genes, population[ranked[1]].genes
        take = rng.random(len(card)) < 0.5
        child_genes = [a if t else b for a, b, t in zip(p1, p2, take)]
        child = evaluate_many([tuple(_mutate(child_genes, card, cfg.mutation_rate, rng))])[0]
        worst = max(range(len(population)), key=lambda i: (fit(population[i]), population[i].genes))
        duplicate = any(e.genes == child.genes for e in population)
        replaced = not duplicate and (fit(child) < fit(population[worst]) if cfg.elitism else True)
        if replaced:
            population[worst] = child
        if fit(child) < fit(best):
            best, stall = child, 0
        else:
            stall += 1
        fits = [fit(e) for e in population]
        log.append(GenerationRecord(gen, fit(best), max(fits), _finite_mean(fits), child.genes, fit(child), replaced))
        if stall >= cfg.stall_patience:
            break
    return GaResult(best, population, log, failures, len(cache), kpi)


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("inf")


# --------------------------------------------------------------------------
# CANN adapters

_ARCH_FIELDS = {f.name for f in fields(cann.NnArchitecture)}
_CFG_FIELDS = {f.name for f in fields(cann.TrainConfig)}


def apply_point(point: dict, arch: cann.NnArchitecture | None = None,
                cfg: cann.TrainConfig | None = None) -> tuple[cann.NnArchitecture, cann.TrainConfig]:
    """Overlay a hyper-parameter point on a base architecture and training
    config. ``activation`` sets one activation for every hidden layer."""
    arch = arch or cann.NnArchitecture()
    cfg = cfg or cann.TrainConfig()
    a_kw, c_kw = {}, {}
    for name, value in point.items():
        if name == "activation":
            a_kw["activations"] = (value,) * len(point.get("hidden_sizes", arch.hidden_sizes))
        elif name in _ARCH_FIELDS:
            a_kw[name] = value
        elif name in _CFG_FIELDS:
            c_kw[name] = value
        else:
            raise ValueError(f"unknown hyper-parameter {name!r}")
    if "hidden_sizes" in a_kw and "activations" not in a_kw:
        a_kw["activations"] = (arch.activations[0],) * len(a_kw["hidden_sizes"])
    return replace(arch, **a_kw), replace(cfg, **c_kw)


def cann_train_fn(data: SplitDataset, benchmark: glm.GlmModel, arch: cann.NnArchitecture | None = None,
                  cfg: cann.TrainConfig | None = None) -> Callable:
    def train_fn(point: dict, seed: int):
        a, c = apply_point(point, arch, cfg)
        return cann.train(data, benchmark, a, replace(c, seed=seed))
    return train_fn


def validation_kpis(data: SplitDataset) -> Callable:
    """KPI function: validation mean Poisson deviance plus the lift KPIs of the
    CANN against its benchmark on the validation split."""
    val = data.validation

    def kpi_fn(model) -> dict:
        mu = cann.predict(model, val)
        kpis = {DEFAULT_KPI: glm.mean_poisson_deviance(val.claims, mu)}
        kpis.update(evaluation.lift_kpis(mu / val.exposure, glm.predict_rate(model.benchmark, val),
                                         val.claims, val.exposure))
        return kpis
    return kpi_fn


# --------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return json.dumps(list(v))
    return v


def write_leaderboard(result: GridResult, path) -> None:
    rows = result.leaderboard + result.failures
    names = list(rows[0].point) if rows else []
    kpi_names = sorted({k for e in rows for k in e.kpis})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank"] + names + ["seed"] + kpi_names + ["error"])
        for r, e in enumerate(rows, start=1):
            rank = r if e.error is None else ""
            w.writerow([rank] + [_cell(e.point[n]) for n in names] + [e.seed]
                       + [_cell(e.kpis.get(k, float("nan"))) for k in kpi_names] + [e.error or ""])


def write_generation_log(result: GaResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_fitness", "worst_fitness", "mean_fitness", "child", "child_fitness", "replaced"])
        for g in result.log:
            w.writerow([g.generation, repr(g.best_fitness), repr(g.worst_fitness), repr(g.mean_fitness),
                        " ".join(str(x) for x in g.child), repr(g.child_fitness), str(g.replaced).lower()])


def best_config(best: Evaluation, arch: cann.NnArchitecture | None = None,
                cfg: cann.TrainConfig | None = None) -> dict:
    """Structured record that :func:`load_best_config` turns back into an
    architecture and training config."""
    a, c = apply_point(best.point, arch, cfg)
    c = replace(c, seed=best.seed)
    return {"architecture": a.to_dict(), "train": dict(c.__dict__),
            "point": {k: list(v) if isinstance(v, tuple) else v for k, v in best.point.items()},
            "kpis": best.kpis}


def load_best_config(record: dict) -> tuple[cann.NnArchitecture, cann.TrainConfig]:
    return cann.NnArchitecture.from_dict(record["architecture"]), cann.TrainConfig(**record["train"])
