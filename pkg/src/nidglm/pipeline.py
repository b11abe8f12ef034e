"""Artifact-based orchestration of the detection workflow.

Every stage reads its inputs from and writes its outputs to an output
directory. ``state.json`` records, per stage, the content hashes of the inputs
and outputs plus a hash of the configuration section it used, so stale
artifacts can be detected and up-to-date stages skipped. Nothing time-dependent
is written, so repeated runs produce byte-identical files.

Layout::

    data/{train,validation,test}.csv, data/schema.json, data/manifest.json
    benchmark.json, benchmark_summary.json
    cycle_<c>/best_config.json, tuning_*.csv          (tuning)
    cycle_<c>/cann_weights.json, cann_epochs.csv
    cycle_<c>/nid_ranking.csv, nid_top.csv
    cycle_<c>/comparison.csv, recommendation.json, benchmark_updated.json
    cycle_<c>/lift_pb.csv, lift_qbb.csv, lift_kpis.json

Cycle ``c > 1`` uses ``cycle_<c-1>/benchmark_updated.json`` as its benchmark.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cann, evaluation, glm, nid, selection, tuning
from .data import FeatureSchema, SplitDataset, generate_synthetic, infer_schema, load_csv, split, write_csv

log = logging.getLogger(__name__)

OUTPUT_ENV = "NIDGLM_OUTPUT"
DEFAULT_OUTPUT = "nidglm-output"

DEFAULTS = {
    "data": {
        "source": "synthetic",
        "n": 200_000,
        "seed": 1,
        "clamp": True,
        "path": None,
        "schema": None,
        "response": "claims",
        "exposure": "exposure",
        "categorical": [],
        "ignore": [],
        "fractions": [0.8, 0.1, 0.1],
        "split_seed": None,
    },
    "benchmark": {"terms": ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]},
    "cann": {"architecture": {}, "train": {}},
    "tuning": {
        "mode": "none",
        "kpi": tuning.DEFAULT_KPI,
        "grid": {"activation": ["lrelu", "sigmoid", "tanh"]},
        "ga": {},
        "seed": 0,
    },
    "nid": {"surrogate": "min", "aggregation": "min", "top_k": 5},
    "selection": {"kpi": "aic", "powers": [1, 2, 3], "bins": None, "clusters": [], "k_range": None},
    "evaluation": {"n_bins": 20, "competitor": "cann"},
}


class ConfigError(ValueError):
    """Invalid configuration (reported as a usage error)."""


class PipelineError(RuntimeError):
    pass


class StaleArtifactError(PipelineError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict) and key not in ("architecture", "train", "grid", "ga"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a section")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with the non-None ``values`` set in ``section``."""
        return RunConfig.from_dict(_merge(self.sections, {section: {k: v for k, v in values.items() if v is not None}}))

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def validate(self) -> None:
        d = self["data"]
        if d["source"] not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if d["source"] == "synthetic" and (not isinstance(d["n"], int) or d["n"] < 1):
            raise ConfigError("data.n must be a positive integer")
        if d["source"] == "csv" and not d["path"]:
            raise ConfigError("data.path is required for CSV input")
        if len(d["fractions"]) != 3 or abs(sum(d["fractions"]) - 1.0) > 1e-9 or min(d["fractions"]) <= 0:
            raise ConfigError("data.fractions must be three positive numbers summing to 1")
        if not self["benchmark"]["terms"]:
            raise ConfigError("benchmark.terms is empty")
        t = self["tuning"]
        if t["mode"] not in ("none", "grid", "ga"):
            raise ConfigError("tuning.mode must be none, grid or ga")
        n = self["nid"]
        if n["surrogate"] not in nid.SURROGATES:
            raise ConfigError(f"nid.surrogate must be one of {nid.SURROGATES}")
        if n["aggregation"] not in nid.AGGREGATIONS:
            raise ConfigError(f"nid.aggregation must be one of {nid.AGGREGATIONS}")
        if not isinstance(n["top_k"], int) or n["top_k"] < 1:
            raise ConfigError("nid.top_k must be a positive integer")
        s = self["selection"]
        if s["kpi"] not in selection.KPIS:
            raise ConfigError(f"selection.kpi must be one of {selection.KPIS}")
        if not s["powers"] or min(s["powers"]) < 1:
            raise ConfigError("selection.powers must be positive integers")
        e = self["evaluation"]
        if e["competitor"] not in ("cann", "updated-glm"):
            raise ConfigError("evaluation.competitor must be 'cann' or 'updated-glm'")
        if e["n_bins"] < 1:
            raise ConfigError("evaluation.n_bins must be >= 1")
        try:
            self.architecture()
            self.train_config()
            if t["mode"] == "ga":
                self.ga_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def architecture(self) -> cann.NnArchitecture:
        return cann.NnArchitecture(**self["cann"]["architecture"])

    def train_config(self) -> cann.TrainConfig:
        return cann.TrainConfig(**self["cann"]["train"])

    def ga_config(self) -> tuning.GaConfig:
        return tuning.GaConfig(**self["tuning"]["ga"])

    def forms_config(self, clusters: dict | None = None) -> selection.FormsConfig:
        s = self["selection"]
        return selection.FormsConfig(tuple(s["powers"]), s["bins"], clusters or {})


# --------------------------------------------------------------------------
# state bookkeeping


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _params_hash(params) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


class Workspace:
    """Output directory plus its ``state.json``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.state_path = self.root / "state.json"
        self.state = json.loads(self.state_path.read_text()) if self.state_path.exists() else {"stages": {}}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, stage: str, inputs, outputs, params) -> None:
        self.state["stages"][stage] = {
            "inputs": {r: file_hash(self.root / r) for r in sorted(inputs)},
            "outputs": {r: file_hash(self.root / r) for r in sorted(outputs)},
            "params": _params_hash(params),
        }
        self.state_path.write_text(json.dumps(self.state, indent=2, sort_keys=True) + "\n")

    def missing(self, stage: str) -> bool:
        rec = self.state["stages"].get(stage)
        return rec is None or any(not (self.root / r).exists() for r in rec["outputs"])

    def stale_reason(self, stage: str, params) -> str | None:
        rec = self.state["stages"].get(stage)
        if rec is None:
            return "never run"
        for r, h in rec["outputs"].items():
            p = self.root / r
            if not p.exists():
                return f"{r} is missing"
            if file_hash(p) != h:
                return f"{r} was modified"
        for r, h in rec["inputs"].items():
            p = self.root / r
            if not p.exists() or file_hash(p) != h:
                return f"input {r} changed since the stage ran"
        if rec["params"] != _params_hash(params):
            return "configuration changed"
        return None


# --------------------------------------------------------------------------
# stages

DATA_FILES = ("data/train.csv", "data/validation.csv", "data/test.csv", "data/schema.json", "data/manifest.json")


COMMANDS = {"data": "generate", "benchmark": "fit-benchmark", "tune": "tune", "train": "train-cann",
            "detect": "detect", "recommend": "recommend", "evaluate": "evaluate"}


def _cycle_dir(cycle: int) -> str:
    if cycle < 1:
        raise ConfigError("cycle must be >= 1")
    return f"cycle_{cycle}"


def benchmark_file(cycle: int) -> str:
    return "benchmark.json" if cycle == 1 else f"{_cycle_dir(cycle - 1)}/benchmark_updated.json"


class Pipeline:
    def __init__(self, config: RunConfig, output):
        self.config = config
        self.ws = Workspace(output)

    # -- dependency handling ---------------------------------------------

    def _params(self, stage: str, cycle: int = 1):
        c = self.config
        if stage == "data":
            return c["data"]
        if stage == "benchmark":
            return c["benchmark"]
        if stage == "tune":
            return {"tuning": c["tuning"], "cann": c["cann"]}
        if stage == "train":
            return {"cann": c["cann"], "tuning_mode": c["tuning"]["mode"]}
        if stage == "detect":
            return {k: c["nid"][k] for k in ("surrogate", "aggregation", "top_k")}
        if stage == "recommend":
            return {"selection": c["selection"], "top_k": c["nid"]["top_k"]}
        if stage == "evaluate":
            return c["evaluation"]
        raise KeyError(stage)

    def _key(self, stage: str, cycle: int) -> str:
        return stage if stage in ("data", "benchmark") else f"{stage}@{cycle}"

    def _runner(self, stage: str):
        return {"data": lambda c: self.make_data(), "benchmark": lambda c: self.fit_benchmark(),
                "tune": self.tune, "train": self.train_cann, "detect": self.detect,
                "recommend": self.recommend, "evaluate": self.evaluate}[stage]

    def require(self, stage: str, cycle: int = 1, rebuild_stale: bool = False) -> None:
        """Make sure an upstream stage's artifacts exist and are current.

        Missing artifacts are produced; stale ones raise unless
        ``rebuild_stale`` is set.
        """
        if stage == "benchmark" and cycle > 1:
            self.require("recommend", cycle - 1, rebuild_stale)
            return
        key = self._key(stage, cycle)
        params = self._params(stage, cycle)
        reason = self.ws.stale_reason(key, params)
        if reason is None:
            return
        if self.ws.missing(key) or rebuild_stale:
            log.info("running %s (%s)", key, reason)
            self._runner(stage)(cycle)
            return
        raise StaleArtifactError(f"artifacts of stage {key!r} are stale ({reason}); "
                                 f"re-run `{COMMANDS[stage]}` or `run-all`")

    def up_to_date(self, stage: str, cycle: int = 1) -> bool:
        return self.ws.stale_reason(self._key(stage, cycle), self._params(stage, cycle)) is None

    # -- loading -----------------------------------------------------------

    def load_schema(self) -> FeatureSchema:
        return FeatureSchema.load(self.ws.root / "data/schema.json")

    def load_split(self) -> SplitDataset:
        schema = self.load_schema()
        parts = [load_csv(self.ws.root / f"data/{p}.csv", schema) for p in ("train", "validation", "test")]
        manifest = json.loads((self.ws.root / "data/manifest.json").read_text())
        return SplitDataset(*parts, manifest["split_seed"], None)

    def load_benchmark(self, cycle: int) -> glm.GlmModel:
        return glm.GlmModel.load(self.ws.root / benchmark_file(cycle))

    # -- data ----------------------------------------------------------------

    def make_data(self) -> SplitDataset:
        d = self.config["data"]
        if d["source"] == "synthetic":
            data = generate_synthetic(d["n"], d["seed"], clamp=d["clamp"])
            inputs = []
        else:
            if d["schema"]:
                schema = FeatureSchema.load(d["schema"])
            else:
                schema = infer_schema(d["path"], d["response"], d["exposure"], d["categorical"], d["ignore"])
            data = load_csv(d["path"], schema)
        split_seed = d["seed"] if d["split_seed"] is None else d["split_seed"]
        parts = split(data, tuple(d["fractions"]), split_seed)
        for name in ("train", "validation", "test"):
            write_csv(getattr(parts, name), self.ws.path(f"data/{name}.csv"))
        data.schema.save(self.ws.path("data/schema.json"))
        manifest = {
            "source": d["source"],
            "n": data.n,
            "seed": d["seed"],
            "split_seed": split_seed,
            "fractions": list(d["fractions"]),
            "rows": {name: getattr(parts, name).n for name in ("train", "validation", "test")},
            "claims": {name: int(getattr(parts, name).claims.sum()) for name in ("train", "validation", "test")},
            "index_sha256": {
                name: hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()
                for name, idx in zip(("train", "validation", "test"), parts.indices)
            },
        }
        _write_json(self.ws.path("data/manifest.json"), manifest)
        self.ws.record("data", inputs, DATA_FILES, self._params("data"))
        return parts

    # -- benchmark ---------------------------------------------------------

    def fit_benchmark(self) -> glm.GlmModel:
        self.require("data")
        parts = self.load_split()
        schema = parts.train.schema
        try:
            terms = [glm.parse_term(t, schema) for t in self.config["benchmark"]["terms"]]
        except (KeyError, ValueError) as exc:
            raise PipelineError(f"bad benchmark term: {exc}") from None
        model = glm.fit_poisson(parts.fitting, terms)
        model.save(self.ws.path("benchmark.json"))
        _write_json(self.ws.path("benchmark_summary.json"), glm_summary(model, parts))
        self.ws.record("benchmark", DATA_FILES, ("benchmark.json", "benchmark_summary.json"), self._params("benchmark"))
        return model

    # -- tuning and training ---------------------------------------------

    def tune(self, cycle: int = 1):
        t = self.config["tuning"]
        if t["mode"] == "none":
            raise ConfigError("tuning.mode is 'none'; set it to 'grid' or 'ga'")
        self.require("data")
        self.require("benchmark", cycle)
        parts = self.load_split()
        bench_rel = benchmark_file(cycle)
        bench = self.load_benchmark(cycle)
        arch, cfg = self.config.architecture(), self.config.train_config()
        grid = tuning.HyperGrid.from_dict(t["grid"])
        train_fn = tuning.cann_train_fn(parts, bench, arch, cfg)
        kpi_fn = tuning.validation_kpis(parts)
        cdir = _cycle_dir(cycle)
        if t["mode"] == "grid":
            result = tuning.grid_search(grid, train_fn, kpi_fn, seed=t["seed"], kpi=t["kpi"])
            table = f"{cdir}/tuning_leaderboard.csv"
            tuning.write_leaderboard(result, self.ws.path(table))
        else:
            result = tuning.ga_search(grid, self.config.ga_config(), train_fn, kpi_fn, kpi=t["kpi"])
            table = f"{cdir}/tuning_generations.csv"
            tuning.write_generation_log(result, self.ws.path(table))
        _write_json(self.ws.path(f"{cdir}/best_config.json"), tuning.best_config(result.best, arch, cfg))
        self.ws.record(f"tune@{cycle}", DATA_FILES + (bench_rel,), (table, f"{cdir}/best_config.json"),
                       self._params("tune", cycle))
        return result

    def train_cann(self, cycle: int = 1) -> cann.CannModel:
        self.require("data")
        self.require("benchmark", cycle)
        cdir = _cycle_dir(cycle)
        bench_rel = benchmark_file(cycle)
        inputs = list(DATA_FILES) + [bench_rel]
        if self.config["tuning"]["mode"] != "none":
            self.require("tune", cycle)
            record = json.loads((self.ws.root / f"{cdir}/best_config.json").read_text())
            arch, cfg = tuning.load_best_config(record)
            inputs.append(f"{cdir}/best_config.json")
        else:
            arch, cfg = self.config.architecture(), self.config.train_config()
        parts = self.load_split()
        model = cann.train(parts, self.load_benchmark(cycle), arch, cfg)
        cann.save(model, self.ws.path(f"{cdir}/cann_weights.json"))
        cann.write_epoch_log(model, self.ws.path(f"{cdir}/cann_epochs.csv"))
        self.ws.record(f"train@{cycle}", inputs, (f"{cdir}/cann_weights.json", f"{cdir}/cann_epochs.csv"),
                       self._params("train", cycle))
        return model

    def load_cann(self, cycle: int) -> cann.CannModel:
        return cann.load(self.ws.root / f"{_cycle_dir(cycle)}/cann_weights.json")

    # -- detection and selection ----------------------------------------

    def detect(self, cycle: int = 1) -> list:
        self.require("train", cycle)
        cdir = _cycle_dir(cycle)
        n = self.config["nid"]
        model = self.load_cann(cycle)
        ranking = nid.rank(nid.aggregate(nid.pair_scores(model.weights, n["surrogate"]),
                                         model.input_neurons(), n["aggregation"]))
        nid.write_ranking(ranking, self.ws.path(f"{cdir}/nid_ranking.csv"))
        nid.write_ranking(ranking[: n["top_k"]], self.ws.path(f"{cdir}/nid_top.csv"))
        self.ws.record(f"detect@{cycle}", (f"{cdir}/cann_weights.json",),
                       (f"{cdir}/nid_ranking.csv", f"{cdir}/nid_top.csv"), self._params("detect", cycle))
        return ranking

    def recommend(self, cycle: int = 1) -> selection.Recommendation:
        self.require("detect", cycle)
        self.require("benchmark", cycle)
        cdir = _cycle_dir(cycle)
        bench_rel = benchmark_file(cycle)
        s = self.config["selection"]
        top = nid.read_ranking(self.ws.root / f"{cdir}/nid_ranking.csv")[: self.config["nid"]["top_k"]]
        if not top:
            raise ConfigError("the NID ranking is empty; nothing to recommend")
        parts = self.load_split()
        bench = self.load_benchmark(cycle)
        inputs = list(DATA_FILES) + [bench_rel, f"{cdir}/nid_ranking.csv"]
        clusters = {}
        if s["clusters"]:
            model = self.load_cann(cycle)
            inputs.append(f"{cdir}/cann_weights.json")
            for feat in s["clusters"]:
                clusters[feat] = selection.cluster_embeddings(model, feat, s["k_range"])
        forms = self.config.forms_config(clusters)
        rec = selection.recommend(parts, bench, top, forms, kpi=s["kpi"])
        # binned or clustered winners need their derived column in the refit data
        needed, edges = set(rec.term.features()), {}
        fitting = selection.prepare_columns(parts.fitting, needed, forms, parts.train, edges)
        test = selection.prepare_columns(parts.test, needed, forms, parts.train, edges)
        updated = selection.add_interaction(bench, fitting, rec.term)
        updated.save(self.ws.path(f"{cdir}/benchmark_updated.json"))
        selection.write_comparison(rec, self.ws.path(f"{cdir}/comparison.csv"))
        extra = {
            "cycle": cycle,
            "before": {"aic": bench.fit.aic, "bic": bench.fit.bic, "residual_deviance": bench.fit.residual_deviance,
                       "test_mean_deviance": glm.metrics(bench, parts.test)["mean_poisson_deviance"]},
            "after": {"aic": updated.fit.aic, "bic": updated.fit.bic,
                      "residual_deviance": updated.fit.residual_deviance,
                      "test_mean_deviance": glm.metrics(updated, test)["mean_poisson_deviance"]},
            "clusters": {f: {"k": c.k, "assignment": c.assignment} for f, c in clusters.items()},
        }
        selection.write_recommendation(rec, self.ws.path(f"{cdir}/recommendation.json"), extra)
        self.ws.record(f"recommend@{cycle}", inputs,
                       (f"{cdir}/comparison.csv", f"{cdir}/recommendation.json", f"{cdir}/benchmark_updated.json"),
                       self._params("recommend", cycle))
        return rec

    # -- evaluation --------------------------------------------------------

    def evaluate(self, cycle: int = 1) -> dict:
        e = self.config["evaluation"]
        self.require("data")
        self.require("benchmark", cycle)
        cdir = _cycle_dir(cycle)
        bench_rel = benchmark_file(cycle)
        parts = self.load_split()
        test = parts.test
        bench = self.load_benchmark(cycle)
        if e["competitor"] == "cann":
            self.require("train", cycle)
            comp_rel = f"{cdir}/cann_weights.json"
            comp_rate = cann.predict_rate(self.load_cann(cycle), test)
        else:
            self.require("recommend", cycle)
            comp_rel = f"{cdir}/benchmark_updated.json"
            updated = glm.GlmModel.load(self.ws.root / comp_rel)
            if any(name not in test.schema for name in updated.terms[-1].features()):
                raise PipelineError("the updated GLM uses derived features; evaluate it with competitor 'cann'")
            comp_rate = glm.predict_rate(updated, test)
        bench_rate = glm.predict_rate(bench, test)
        pb = evaluation.lift_report(comp_rate, bench_rate, test.claims, test.exposure, evaluation.PREDETERMINED)
        qbb = evaluation.lift_report(comp_rate, bench_rate, test.claims, test.exposure, evaluation.QUANTILE,
                                     e["n_bins"])
        evaluation.write_lift_csv(pb, self.ws.path(f"{cdir}/lift_pb.csv"))
        evaluation.write_lift_csv(qbb, self.ws.path(f"{cdir}/lift_qbb.csv"))
        kpis = {
            "competitor": e["competitor"],
            "mae_lift_pb": pb.mae_lift,
            "mae_lift_pb_benchmark": pb.mae_lift_benchmark,
            "mae_lift_qbb": qbb.mae_lift,
            "mae_lift_qbb_benchmark": qbb.mae_lift_benchmark,
            "test_mean_deviance": glm.mean_poisson_deviance(test.claims, comp_rate * test.exposure),
            "test_mean_deviance_benchmark": glm.mean_poisson_deviance(test.claims, bench_rate * test.exposure),
        }
        evaluation.write_kpis(kpis, self.ws.path(f"{cdir}/lift_kpis.json"))
        self.ws.record(f"evaluate@{cycle}", list(DATA_FILES) + [bench_rel, comp_rel],
                       (f"{cdir}/lift_pb.csv", f"{cdir}/lift_qbb.csv", f"{cdir}/lift_kpis.json"),
                       self._params("evaluate", cycle))
        return kpis

    # -- everything --------------------------------------------------------

    def run_all(self, cycles: int = 1) -> list[str]:
        """Run every stage that is missing or stale; returns the stages run."""
        ran = []

        def step(stage, cycle=1):
            if not self.up_to_date(stage, cycle):
                self._runner(stage)(cycle)
                ran.append(self._key(stage, cycle))

        step("data")
        step("benchmark")
        for c in range(1, cycles + 1):
            if self.config["tuning"]["mode"] != "none":
                step("tune", c)
            step("train", c)
            step("detect", c)
            step("recommend", c)
            step("evaluate", c)
        return ran


def glm_summary(model: glm.GlmModel, parts: SplitDataset) -> dict:
    fitting = parts.fitting
    mu = glm.predict(model, fitting)
    return {
        "terms": [t.label for t in model.terms],
        "converged": model.fit.converged,
        "iterations": model.fit.iterations,
        "residual_deviance": model.fit.residual_deviance,
        "null_deviance": model.fit.null_deviance,
        "degrees_of_freedom": model.fit.degrees_of_freedom,
        "aic": model.fit.aic,
        "bic": model.fit.bic,
        "wapf": glm.wapf(mu, fitting.exposure),
        "waof": glm.waof(fitting.claims, fitting.exposure),
        "balance_residual": glm.wapf(mu, fitting.exposure) - glm.waof(fitting.claims, fitting.exposure),
        "test_mean_deviance": glm.metrics(model, parts.test)["mean_poisson_deviance"],
        "coefficients": model.coef(),
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
