"""Poisson GLMs with log link: design matrices, IRLS fitting, fit statistics."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import linalg, special, stats

from .data import Dataset, FeatureSchema


class GlmError(ValueError):
    pass


class RankDeficientError(GlmError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(
            "design matrix is rank deficient; collinear or empty columns: " + ", ".join(self.columns)
        )


class GlmOverflowError(GlmError):
    pass


# --------------------------------------------------------------------------
# terms


@dataclass(frozen=True)
class Intercept:
    @property
    def label(self) -> str:
        return "1"

    def features(self) -> tuple[str, ...]:
        return ()


@dataclass(frozen=True)
class Numeric:
    name: str
    power: int = 1

    @property
    def label(self) -> str:
        return _pow(self.name, self.power)

    def features(self):
        return (self.name,)


@dataclass(frozen=True)
class LogNumeric:
    name: str

    @property
    def label(self) -> str:
        return f"log({self.name})"

    def features(self):
        return (self.name,)


@dataclass(frozen=True)
class Categorical:
    name: str

    @property
    def label(self) -> str:
        return self.name

    def features(self):
        return (self.name,)


@dataclass(frozen=True)
class NumNum:
    """``x1^a * x2^b``."""

    name1: str
    power1: int
    name2: str
    power2: int

    @property
    def label(self) -> str:
        return f"{_pow(self.name1, self.power1)}:{_pow(self.name2, self.power2)}"

    def features(self):
        return (self.name1, self.name2)


@dataclass(frozen=True)
class NumCat:
    """Numeric feature (optionally raised to a power) times each non-base level."""

    num_name: str
    cat_name: str
    power: int = 1

    @property
    def label(self) -> str:
        return f"{_pow(self.num_name, self.power)}:{self.cat_name}"

    def features(self):
        return (self.num_name, self.cat_name)


@dataclass(frozen=True)
class CatCat:
    name1: str
    name2: str

    @property
    def label(self) -> str:
        return f"{self.name1}:{self.name2}"

    def features(self):
        return (self.name1, self.name2)


InteractionForm = Union[NumNum, NumCat, CatCat]
TermSpec = Union[Intercept, Numeric, LogNumeric, Categorical, NumNum, NumCat, CatCat]

_TERM_TYPES = {cls.__name__: cls for cls in (Intercept, Numeric, LogNumeric, Categorical, NumNum, NumCat, CatCat)}


def _pow(name: str, power: int) -> str:
    return name if power == 1 else f"{name}^{power}"


def term_to_dict(term) -> dict:
    d = {"type": type(term).__name__}
    d.update(term.__dict__)
    return d


def term_from_dict(d: dict):
    d = dict(d)
    cls = _TERM_TYPES[d.pop("type")]
    return cls(**d)


_FACTOR = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(?:\^\s*(\d+))?\s*$")


def parse_term(text: str, schema: FeatureSchema):
    """Parse ``1``, ``x``, ``x^2``, ``log(x)``, ``a:b`` or ``a^2:b``.

    Whether a name is a factor or numeric is looked up in ``schema``.
    """
    text = text.strip()
    if text in ("1", "(Intercept)"):
        return Intercept()
    m = re.match(r"^log\(\s*([\w.]+)\s*\)$", text)
    if m:
        return LogNumeric(m.group(1))
    parts = text.split(":")
    factors = []
    for part in parts:
        m = _FACTOR.match(part)
        if not m:
            raise GlmError(f"cannot parse term {text!r}")
        name, power = m.group(1), int(m.group(2) or 1)
        if name not in schema:
            raise GlmError(f"unknown feature {name!r} in term {text!r}")
        if schema[name].is_categorical and power != 1:
            raise GlmError(f"cannot raise factor {name!r} to a power")
        factors.append((name, power, schema[name].is_categorical))
    if len(factors) == 1:
        name, power, is_cat = factors[0]
        return Categorical(name) if is_cat else Numeric(name, power)
    if len(factors) != 2:
        raise GlmError(f"only pairwise interactions are supported: {text!r}")
    (n1, p1, c1), (n2, p2, c2) = factors
    if not c1 and not c2:
        return NumNum(n1, p1, n2, p2)
    if c1 and c2:
        return CatCat(n1, n2)
    if c1:
        return NumCat(n2, n1, p2)
    return NumCat(n1, n2, p1)


def interaction_form(name1: str, name2: str, schema: FeatureSchema, power1: int = 1, power2: int = 1):
    """The pairwise interaction term matching the kinds of the two features."""
    c1, c2 = schema[name1].is_categorical, schema[name2].is_categorical
    if not c1 and not c2:
        return NumNum(name1, power1, name2, power2)
    if c1 and c2:
        return CatCat(name1, name2)
    if c1:
        return NumCat(name2, name1, power2)
    return NumCat(name1, name2, power1)


# --------------------------------------------------------------------------
# design matrix


def _numeric(data: Dataset, name: str) -> np.ndarray:
    if name not in data.schema:
        raise GlmError(f"unknown feature {name!r}")
    if data.schema[name].is_categorical:
        raise GlmError(f"feature {name!r} is categorical, numeric expected")
    return data.features[name]


def _indicators(data: Dataset, name: str) -> tuple[np.ndarray, list[str]]:
    if name not in data.schema:
        raise GlmError(f"unknown feature {name!r}")
    col = data.schema[name]
    if not col.is_categorical:
        raise GlmError(f"feature {name!r} is numeric, categorical expected")
    levels = [j for j in range(len(col.categories)) if j != col.reference]
    codes = data.features[name]
    block = (codes[:, None] == np.asarray(levels)[None, :]).astype(np.float64)
    return block, [f"{name}[{col.categories[j]}]" for j in levels]


def term_columns(data: Dataset, term) -> tuple[np.ndarray, list[str]]:
    n = data.n
    if isinstance(term, Intercept):
        return np.ones((n, 1)), ["1"]
    if isinstance(term, Numeric):
        if term.power < 1:
            raise GlmError("powers must be positive integers")
        return _numeric(data, term.name)[:, None] ** term.power, [term.label]
    if isinstance(term, LogNumeric):
        x = _numeric(data, term.name)
        if np.any(x <= 0):
            raise GlmError(f"log({term.name}) requires strictly positive values")
        return np.log(x)[:, None], [term.label]
    if isinstance(term, Categorical):
        return _indicators(data, term.name)
    if isinstance(term, NumNum):
        col = _numeric(data, term.name1) ** term.power1 * _numeric(data, term.name2) ** term.power2
        return col[:, None], [term.label]
    if isinstance(term, NumCat):
        x = _numeric(data, term.num_name) ** term.power
        block, labels = _indicators(data, term.cat_name)
        return block * x[:, None], [f"{_pow(term.num_name, term.power)}:{lab}" for lab in labels]
    if isinstance(term, CatCat):
        b1, l1 = _indicators(data, term.name1)
        b2, l2 = _indicators(data, term.name2)
        block = (b1[:, :, None] * b2[:, None, :]).reshape(n, -1)
        return block, [f"{a}:{b}" for a in l1 for b in l2]
    raise GlmError(f"unsupported term {term!r}")


def build_design(data: Dataset, terms: Sequence) -> tuple[np.ndarray, list[str]]:
    """Expand ``terms`` into a design matrix, reference levels dropped."""
    blocks, labels = [], []
    for term in terms:
        block, lab = term_columns(data, term)
        blocks.append(block)
        labels.extend(lab)
    if not blocks:
        return np.zeros((data.n, 0)), []
    return np.hstack(blocks), labels


# --------------------------------------------------------------------------
# deviance helpers


def unit_deviance(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``2 [mu - y + y ln(y / mu)]`` with ``y ln(y/mu) = 0`` at ``y = 0``."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return 2.0 * (mu - y + special.xlogy(y, y) - special.xlogy(y, mu))


def poisson_deviance(y, mu) -> float:
    return float(np.sum(unit_deviance(y, mu)))


def mean_poisson_deviance(y, mu) -> float:
    return float(np.mean(unit_deviance(y, mu)))


def poisson_loglik(y, mu) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)))


def wapf(pred_counts, exposure) -> float:
    """Weighted average predicted frequency from expected counts ``v * lambda``."""
    return float(np.sum(pred_counts) / np.sum(exposure))


def waof(claims, exposure) -> float:
    return float(np.sum(claims) / np.sum(exposure))


def exposure_offset(data: Dataset) -> np.ndarray:
    return np.log(data.exposure)


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class FitStats:
    log_likelihood: float
    residual_deviance: float
    null_deviance: float
    aic: float
    bic: float
    degrees_of_freedom: int
    n_obs: int
    converged: bool
    iterations: int
    deviance_path: tuple = ()


@dataclass(frozen=True)
class CoefficientStat:
    label: str
    estimate: float
    std_error: float
    z_value: float
    p_value: float


@dataclass(frozen=True)
class GlmModel:
    terms: tuple
    labels: tuple
    beta: np.ndarray
    fit: FitStats
    coefficient_stats: tuple
    levels: dict = field(default_factory=dict)

    @property
    def n_coef(self) -> int:
        return int(self.beta.shape[0])

    @property
    def has_intercept(self) -> bool:
        return any(isinstance(t, Intercept) for t in self.terms)

    def coef(self) -> dict[str, float]:
        return dict(zip(self.labels, self.beta.tolist()))

    def to_dict(self) -> dict:
        return {
            "terms": [term_to_dict(t) for t in self.terms],
            "labels": list(self.labels),
            "beta": [float(b) for b in self.beta],
            "fit": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.fit.__dict__.items()},
            "coefficient_stats": [c.__dict__ for c in self.coefficient_stats],
            "levels": {k: list(v) for k, v in self.levels.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlmModel":
        fit = dict(d["fit"])
        fit["deviance_path"] = tuple(fit.get("deviance_path", ()))
        return cls(
            tuple(term_from_dict(t) for t in d["terms"]),
            tuple(d["labels"]),
            np.asarray(d["beta"], dtype=np.float64),
            FitStats(**fit),
            tuple(CoefficientStat(**c) for c in d["coefficient_stats"]),
            {k: tuple(v) for k, v in d.get("levels", {}).items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GlmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _used_levels(data: Dataset, terms) -> dict:
    names = {name for t in terms for name in t.features()}
    return {name: data.schema[name].categories for name in sorted(names)
            if name in data.schema and data.schema[name].is_categorical}


def _check_rank(X: np.ndarray, labels: Sequence[str], weights: np.ndarray) -> None:
    if X.shape[1] == 0:
        return
    Xw = X * np.sqrt(weights)[:, None]
    norms = np.linalg.norm(Xw, axis=0)
    zero = [labels[j] for j in np.flatnonzero(norms == 0)]
    if zero:
        raise RankDeficientError(zero)
    _, R, piv = linalg.qr(Xw / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * 1e-9 * max(X.shape)))
    if rank < X.shape[1]:
        raise RankDeficientError([labels[j] for j in sorted(piv[rank:])])


def _irls(X, y, offset, tol, max_iter):
    """Fisher scoring from ``beta = 0`` with step halving.

    Returns ``beta, mu, deviance path, converged, iterations``.
    """
    p = X.shape[1]
    beta = np.zeros(p)
    eta = offset.copy()
    if np.any(eta > 700):
        raise GlmOverflowError("exp(offset) overflows; rescale exposure or offset")
    mu = np.exp(eta)
    dev = poisson_deviance(y, mu)
    path = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # Newton direction for the Poisson log-likelihood, log link
        score = X.T @ (y - mu)
        info = (X * mu[:, None]).T @ X
        try:
            cho = linalg.cho_factor(info, check_finite=False)
            step = linalg.cho_solve(cho, score, check_finite=False)
        except linalg.LinAlgError:
            step = linalg.lstsq(info, score)[0]
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            eta_c = X @ cand + offset
            if np.all(eta_c < 700):
                mu_c = np.exp(eta_c)
                dev_c = poisson_deviance(y, mu_c)
                if np.isfinite(dev_c) and dev_c <= dev * (1 + 1e-12) + 1e-12:
                    break
            t *= 0.5
        else:
            if np.any(X @ (beta + step) + offset > 700):
                raise GlmOverflowError(
                    "exp(eta) overflows during fitting; rescale numeric features"
                )
            break
        beta, mu = cand, mu_c
        change = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        dev = dev_c
        path.append(dev)
        if change < tol:
            converged = True
            break
    if converged:
        beta, mu, dev = _polish(X, y, offset, beta, mu, dev)
    return beta, mu, path, converged, it


def _polish(X, y, offset, beta, mu, dev):
    """One extra Newton step once the deviance has settled, so the
    coefficients (not only the deviance) are accurate to rounding level."""
    score = X.T @ (y - mu)
    info = (X * mu[:, None]).T @ X
    try:
        step = linalg.cho_solve(linalg.cho_factor(info, check_finite=False), score, check_finite=False)
    except linalg.LinAlgError:
        return beta, mu, dev
    cand = beta + step
    eta = X @ cand + offset
    if np.any(eta >= 700):
        return beta, mu, dev
    mu_c = np.exp(eta)
    dev_c = poisson_deviance(y, mu_c)
    if np.isfinite(dev_c) and dev_c <= dev * (1 + 1e-12) + 1e-12:
        return cand, mu_c, dev_c
    return beta, mu, dev


def fit_poisson(data: Dataset, terms: Sequence, offset=None, tol: float = 1e-8, max_iter: int = 25) -> GlmModel:
    """Maximum-likelihood Poisson GLM ``N ~ Poisson(exp(offset + X beta))``.

    ``offset`` defaults to ``ln v``. Convergence is declared once the relative
    deviance change drops below ``tol``; a model that runs out of iterations is
    returned with ``fit.converged = False``.
    """
    terms = tuple(terms)
    X, labels = build_design(data, terms)
    y = data.claims.astype(np.float64)
    offset = exposure_offset(data) if offset is None else np.asarray(offset, dtype=np.float64)
    if offset.shape != (data.n,) or not np.all(np.isfinite(offset)):
        raise GlmError("offset must be finite with one value per row")
    _check_rank(X, labels, np.exp(np.clip(offset, -50, 50)))
    beta, mu, path, converged, iterations = _irls(X, y, offset, tol, max_iter)

    info = (X * mu[:, None]).T @ X
    cov = linalg.pinvh(info) if X.shape[1] else np.zeros((0, 0))
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.nan)
    pvals = 2.0 * stats.norm.sf(np.abs(z))

    n, p = data.n, X.shape[1]
    ll = poisson_loglik(y, mu)
    dev = poisson_deviance(y, mu)
    if any(isinstance(t, Intercept) for t in terms):
        level = np.log(y.sum() / np.exp(offset).sum()) if y.sum() > 0 else -np.inf
        null_mu = np.exp(offset + level)
    else:
        null_mu = np.exp(offset)
    fit = FitStats(
        log_likelihood=ll,
        residual_deviance=dev,
        null_deviance=poisson_deviance(y, null_mu),
        aic=-2.0 * ll + 2.0 * p,
        bic=-2.0 * ll + np.log(n) * p,
        degrees_of_freedom=n - p,
        n_obs=n,
        converged=bool(converged),
        iterations=int(iterations),
        deviance_path=tuple(float(d) for d in path),
    )
    coef_stats = tuple(
        CoefficientStat(lab, float(b), float(s), float(zz), float(pv))
        for lab, b, s, zz, pv in zip(labels, beta, se, z, pvals)
    )
    return GlmModel(terms, tuple(labels), beta, fit, coef_stats, _used_levels(data, terms))


def linear_predictor(model: GlmModel, data: Dataset, offset=None) -> np.ndarray:
    for name, levels in model.levels.items():
        if name not in data.schema or data.schema[name].categories != tuple(levels):
            raise GlmError(f"categories of {name!r} differ from those the model was fitted on")
    X, _ = build_design(data, model.terms)
    offset = exposure_offset(data) if offset is None else np.asarray(offset, dtype=np.float64)
    return X @ model.beta + offset


def predict(model: GlmModel, data: Dataset, offset=None) -> np.ndarray:
    """Expected claim counts ``exp(offset + X beta)``; divide by exposure for rates."""
    eta = linear_predictor(model, data, offset)
    if np.any(eta > 700):
        raise GlmOverflowError("exp(eta) overflows")
    return np.exp(eta)


def predict_rate(model: GlmModel, data: Dataset, offset=None) -> np.ndarray:
    return predict(model, data, offset) / data.exposure


def metrics(model: GlmModel, data: Dataset, offset=None) -> dict[str, float]:
    mu = predict(model, data, offset)
    return {
        "mean_poisson_deviance": mean_poisson_deviance(data.claims, mu),
        "wapf": wapf(mu, data.exposure),
        "waof": waof(data.claims, data.exposure),
    }


def score_vector(model: GlmModel, data: Dataset, offset=None) -> np.ndarray:
    """Gradient of the log-likelihood at the fitted coefficients."""
    X, _ = build_design(data, model.terms)
    mu = predict(model, data, offset)
    return X.T @ (data.claims - mu)
