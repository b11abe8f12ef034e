"""Command-line front end.

Exit codes: 0 on success, 1 when a pipeline stage fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import cann, glm, selection, tuning
from .data import DataError
from .pipeline import (DEFAULT_OUTPUT, OUTPUT_ENV, ConfigError, Pipeline, PipelineError, RunConfig)

PIPELINE_ERRORS = (PipelineError, DataError, glm.GlmError, selection.SelectionError,
                   cann.TrainingDivergedError, cann.LayoutError, tuning.TuningError, OSError)


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fractions(text: str) -> list[float]:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("fractions look like 0.8,0.1,0.1") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("need exactly three fractions")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nidglm", description="Find the next-best pairwise interaction for a Poisson GLM.")
    p.add_argument("--config", help="JSON config with one section per module")
    p.add_argument("--output", help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        return sub.add_parser(name, help=help_)

    def cycle(sp):
        sp.add_argument("--cycle", type=_positive_int, default=1, help="detection cycle (default 1)")

    g = cmd("generate", "simulate the synthetic portfolio and split it")
    g.add_argument("--n", type=_positive_int)
    g.add_argument("--seed", type=int)
    g.add_argument("--split-seed", type=int)
    g.add_argument("--fractions", type=_fractions)
    g.add_argument("--no-clamp", action="store_true", help="do not cap the true rate at 1")

    i = cmd("ingest", "load a claims CSV and split it")
    i.add_argument("path")
    i.add_argument("--schema", help="schema JSON; inferred from the header when absent")
    i.add_argument("--response")
    i.add_argument("--exposure")
    i.add_argument("--categorical", nargs="*")
    i.add_argument("--ignore", nargs="*")
    i.add_argument("--seed", type=int)
    i.add_argument("--fractions", type=_fractions)

    b = cmd("fit-benchmark", "fit the benchmark GLM on train+validation")
    b.add_argument("--terms", nargs="+", help='e.g. 1 x1 "x2^2" x9 "x4:x5"')

    t = cmd("tune", "grid or genetic search over CANN hyper-parameters")
    cycle(t)
    t.add_argument("--mode", choices=("grid", "ga"))
    t.add_argument("--population-size", type=_positive_int)
    t.add_argument("--max-generations", type=int)

    tr = cmd("train-cann", "train the CANN on top of the benchmark")
    cycle(tr)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--dtype", choices=("float64", "float32"))

    d = cmd("detect", "rank pairwise interactions of the trained CANN")
    cycle(d)
    d.add_argument("--top-k", type=_positive_int)
    d.add_argument("--surrogate", choices=("min", "harmonic_mean"))
    d.add_argument("--aggregation", choices=("min", "mean", "max"))

    r = cmd("recommend", "compare mini-GLMs for the top-ranked pairs")
    cycle(r)
    r.add_argument("--top-k", type=int)
    r.add_argument("--kpi", choices=selection.KPIS)
    r.add_argument("--powers", type=int, nargs="+")
    r.add_argument("--bins", type=_positive_int)
    r.add_argument("--clusters", nargs="*", help="categorical features whose embeddings are clustered")

    e = cmd("evaluate", "double lift reports of a competitor against the benchmark")
    cycle(e)
    e.add_argument("--n-bins", type=_positive_int)
    e.add_argument("--competitor", choices=("cann", "updated-glm"))

    a = cmd("run-all", "run every stage that is missing or stale")
    a.add_argument("--cycles", type=_positive_int, default=1)
    a.add_argument("--n", type=_positive_int)
    a.add_argument("--seed", type=int)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    c = args.command
    if c == "generate":
        cfg = cfg.override("data", source="synthetic", n=args.n, seed=args.seed, split_seed=args.split_seed,
                           fractions=args.fractions, clamp=False if args.no_clamp else None)
    elif c == "ingest":
        cfg = cfg.override("data", source="csv", path=args.path, schema=args.schema, response=args.response,
                           exposure=args.exposure, categorical=args.categorical, ignore=args.ignore,
                           seed=args.seed, fractions=args.fractions)
    elif c == "fit-benchmark":
        cfg = cfg.override("benchmark", terms=args.terms)
    elif c == "tune":
        ga = dict(cfg["tuning"]["ga"])
        if args.population_size is not None:
            ga["population_size"] = args.population_size
        if args.max_generations is not None:
            ga["max_generations"] = args.max_generations
        cfg = cfg.override("tuning", mode=args.mode, ga=ga)
    elif c == "train-cann":
        train = dict(cfg["cann"]["train"])
        for key in ("seed", "max_epochs", "dtype"):
            if getattr(args, key) is not None:
                train[key] = getattr(args, key)
        cfg = cfg.override("cann", train=train)
    elif c == "detect":
        cfg = cfg.override("nid", top_k=args.top_k, surrogate=args.surrogate, aggregation=args.aggregation)
    elif c == "recommend":
        if args.top_k is not None and args.top_k < 1:
            raise UsageError("--top-k must be >= 1; an empty candidate list cannot be compared")
        cfg = cfg.override("nid", top_k=args.top_k)
        cfg = cfg.override("selection", kpi=args.kpi, powers=args.powers, bins=args.bins, clusters=args.clusters)
    elif c == "evaluate":
        cfg = cfg.override("evaluation", n_bins=args.n_bins, competitor=args.competitor)
    elif c == "run-all":
        cfg = cfg.override("data", n=args.n, seed=args.seed)
    return cfg


def output_dir(args) -> str:
    return args.output or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT


def run(args) -> None:
    cfg = resolve_config(args)
    pipe = Pipeline(cfg, output_dir(args))
    c = args.command
    if c in ("generate", "ingest"):
        parts = pipe.make_data()
        print(f"wrote {parts.train.n} / {parts.validation.n} / {parts.test.n} rows to {pipe.ws.root / 'data'}")
    elif c == "fit-benchmark":
        model = pipe.fit_benchmark()
        print(f"benchmark: deviance {model.fit.residual_deviance:.6g}, AIC {model.fit.aic:.6g}, "
              f"{model.fit.iterations} iterations")
    elif c == "tune":
        result = pipe.tune(args.cycle)
        print(f"best: {json.dumps(result.best.point)} ({result.kpi} {result.best.kpis[result.kpi]:.6g})")
    elif c == "train-cann":
        model = pipe.train_cann(args.cycle)
        print(f"trained for {model.stopped_epoch} epochs, best at epoch {model.best_epoch}")
    elif c == "detect":
        ranking = pipe.detect(args.cycle)
        for k, s in enumerate(ranking[: cfg["nid"]["top_k"]], start=1):
            print(f"{k:3d}  {s.feature_1}:{s.feature_2}  {s.score:.6g}")
    elif c == "recommend":
        rec = pipe.recommend(args.cycle)
        print(f"recommended {rec.winner.candidate.name} as {rec.winner.form_label} "
              f"({rec.kpi} {getattr(rec.winner, rec.kpi):.6g})")
    elif c == "evaluate":
        kpis = pipe.evaluate(args.cycle)
        print(json.dumps(kpis, indent=2, sort_keys=True))
    elif c == "run-all":
        ran = pipe.run_all(args.cycles)
        print("ran: " + (", ".join(ran) if ran else "nothing (all stages up to date)"))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
