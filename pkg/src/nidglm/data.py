"""Tabular claim-frequency data: schema, ingestion, synthetic generation, splits
and network encodings."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Raised for malformed or inconsistent data."""


class CsvParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class UnknownCategoryError(CsvParseError):
    pass


class MissingValueError(CsvParseError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: tuple[str, ...] = ()
    reference: int | None = None

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            cats = tuple(str(c) for c in self.categories)
            object.__setattr__(self, "categories", cats)
            if len(set(cats)) != len(cats):
                raise DataError(f"column {self.name!r}: duplicate categories")
            if len(cats) < 2:
                raise DataError(f"column {self.name!r}: categorical needs >= 2 categories")
            # the last level is the base level unless stated otherwise
            ref = len(cats) - 1 if self.reference is None else int(self.reference)
            if not 0 <= ref < len(cats):
                raise DataError(f"column {self.name!r}: reference index out of range")
            object.__setattr__(self, "reference", ref)
        elif self.categories or self.reference is not None:
            raise DataError(f"column {self.name!r}: numeric columns carry no categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            d["categories"] = list(self.categories)
            d["reference"] = self.reference
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Column":
        return cls(d["name"], d["kind"], tuple(d.get("categories", ())), d.get("reference"))


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[Column, ...]
    response_column: str = "claims"
    exposure_column: str = "exposure"

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("column names must be unique")
        if self.response_column == self.exposure_column:
            raise DataError("response and exposure columns must differ")
        for special in (self.response_column, self.exposure_column):
            if special in names:
                raise DataError(f"{special!r} cannot also be a feature")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __getitem__(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def with_column(self, column: Column) -> "FeatureSchema":
        return FeatureSchema(self.columns + (column,), self.response_column, self.exposure_column)

    def to_dict(self) -> dict:
        return {
            "response_column": self.response_column,
            "exposure_column": self.exposure_column,
            "columns": [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            tuple(Column.from_dict(c) for c in d["columns"]),
            d.get("response_column", "claims"),
            d.get("exposure_column", "exposure"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Observations ``(N_i, x_i, v_i)``.

    Numeric features are stored as float64 arrays, categorical ones as integer
    codes indexing ``schema[name].categories``.
    """

    schema: FeatureSchema
    claims: np.ndarray
    exposure: np.ndarray
    features: dict

    def __post_init__(self):
        claims = np.asarray(self.claims)
        if claims.dtype.kind == "f":
            if not np.all(np.isfinite(claims)) or np.any(claims != np.round(claims)):
                raise DataError("claim counts must be integers")
        claims = claims.astype(np.int64)
        exposure = np.asarray(self.exposure, dtype=np.float64)
        n = claims.shape[0]
        if claims.ndim != 1 or exposure.shape != (n,):
            raise DataError("claims and exposure must be 1-d arrays of equal length")
        if np.any(claims < 0):
            raise DataError("claim counts must be non-negative")
        if not np.all(exposure > 0) or not np.all(np.isfinite(exposure)):
            raise DataError("exposure must be strictly positive and finite")
        feats = {}
        for col in self.schema.columns:
            if col.name not in self.features:
                raise DataError(f"missing feature {col.name!r}")
            values = np.asarray(self.features[col.name])
            if values.shape != (n,):
                raise DataError(f"feature {col.name!r} has wrong length")
            if col.is_categorical:
                if values.dtype.kind not in "iu":
                    raise DataError(f"feature {col.name!r} must hold integer category codes")
                if n and (values.min() < 0 or values.max() >= len(col.categories)):
                    raise DataError(f"feature {col.name!r} has codes outside its categories")
                values = values.astype(np.int64)
            else:
                values = values.astype(np.float64)
                if not np.all(np.isfinite(values)):
                    raise DataError(f"feature {col.name!r} has non-finite values")
            feats[col.name] = _frozen(values)
        extra = set(self.features) - set(feats)
        if extra:
            raise DataError(f"features not in schema: {sorted(extra)}")
        object.__setattr__(self, "claims", _frozen(claims))
        object.__setattr__(self, "exposure", _frozen(exposure))
        object.__setattr__(self, "features", feats)

    @property
    def n(self) -> int:
        return int(self.claims.shape[0])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.features[name]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.schema,
            self.claims[rows],
            self.exposure[rows],
            {k: v[rows] for k, v in self.features.items()},
        )

    def with_feature(self, column: Column, values) -> "Dataset":
        feats = dict(self.features)
        feats[column.name] = values
        return Dataset(self.schema.with_column(column), self.claims, self.exposure, feats)

    def with_exposure(self, exposure) -> "Dataset":
        return Dataset(self.schema, self.claims, exposure, self.features)

    def labels(self, name: str) -> np.ndarray:
        """Category labels (as strings) of a categorical feature."""
        cats = np.asarray(self.schema[name].categories, dtype=object)
        return cats[self.features[name]]


def concat(parts: Sequence[Dataset]) -> Dataset:
    schema = parts[0].schema
    for p in parts[1:]:
        if p.schema != schema:
            raise DataError("cannot concatenate datasets with different schemas")
    return Dataset(
        schema,
        np.concatenate([p.claims for p in parts]),
        np.concatenate([p.exposure for p in parts]),
        {name: np.concatenate([p.features[name] for p in parts]) for name in schema.names},
    )


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    validation: Dataset
    test: Dataset
    seed: int
    indices: tuple = field(default=(), compare=False, repr=False)

    @property
    def fitting(self) -> Dataset:
        """Training plus validation rows, the data a benchmark GLM is fitted on."""
        return concat([self.train, self.validation])


# --------------------------------------------------------------------------
# synthetic data with planted interactions

SYNTHETIC_CORRELATION = 0.5
_X10_EFFECTS = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
_X9_EFFECTS = np.array([0.0, -0.1, -0.2])


def synthetic_schema() -> FeatureSchema:
    cols = [Column(f"x{j}", NUMERIC) for j in range(1, 9)]
    cols.append(Column("x9", CATEGORICAL, ("0", "1", "2")))
    cols.append(Column("x10", CATEGORICAL, ("0", "1", "2", "3", "4", "5")))
    return FeatureSchema(tuple(cols), "claims", "exposure")


def synthetic_rate(numeric: np.ndarray, x9: np.ndarray, x10: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Expected annual claim count of the synthetic generator.

    ``numeric`` is ``(n, 8)`` holding x1..x8; ``x9`` and ``x10`` are integer
    levels. Rates above 1 are set to 1 when ``clamp`` is on.
    """
    x = np.atleast_2d(np.asarray(numeric, dtype=np.float64))
    x1, x2, x3, x4, x5, x6 = (x[:, j] for j in range(6))
    eta = (
        -3.0
        + 0.5 * x1
        - 0.25 * x2**2
        + 0.5 * np.abs(x3) * np.sin(2.0 * x3)
        + 0.5 * x4 * x5
        + 0.125 * x5**2 * x6
        + _X9_EFFECTS[np.asarray(x9)]
        + _X10_EFFECTS[np.asarray(x10)]
    )
    mu = np.exp(eta)
    if clamp:
        mu = np.minimum(mu, 1.0)
    return mu


def generate_synthetic(n: int, seed: int, clamp: bool = True) -> Dataset:
    """Draw ``n`` rows of the ten-feature synthetic portfolio.

    x1..x8 are standard normal with corr(x2, x8) = 0.5, x9 ~ Bin(2, 0.3) and
    x10 ~ Bin(5, 0.2) are factors, exposure is 1 and claims are Poisson with
    the (optionally clamped) rate from :func:`synthetic_rate`.
    """
    if int(n) != n or n < 1:
        raise DataError("n must be a positive integer")
    n = int(n)
    rng = np.random.default_rng(seed)
    cov = np.eye(8)
    cov[1, 7] = cov[7, 1] = SYNTHETIC_CORRELATION
    chol = np.linalg.cholesky(cov)
    numeric = rng.standard_normal((n, 8)) @ chol.T
    x9 = rng.binomial(2, 0.3, size=n)
    x10 = rng.binomial(5, 0.2, size=n)
    mu = synthetic_rate(numeric, x9, x10, clamp=clamp)
    claims = rng.poisson(mu)
    feats = {f"x{j + 1}": numeric[:, j] for j in range(8)}
    feats["x9"] = x9.astype(np.int64)
    feats["x10"] = x10.astype(np.int64)
    return Dataset(synthetic_schema(), claims, np.ones(n), feats)


# --------------------------------------------------------------------------
# CSV ingestion


def fremtpl2_schema(vehbrand, region, area=("A", "B", "C", "D", "E", "F"), vehgas=("Diesel", "Regular")) -> FeatureSchema:
    """Schema for the freMTPL2freq column layout.

    Brand and region level lists vary between releases of the data, so they
    are passed in (or use :func:`infer_schema`).
    """
    cols = [
        Column("VehPower", NUMERIC),
        Column("VehAge", NUMERIC),
        Column("DrivAge", NUMERIC),
        Column("BonusMalus", NUMERIC),
        Column("VehBrand", CATEGORICAL, tuple(vehbrand)),
        Column("VehGas", CATEGORICAL, tuple(vehgas)),
        Column("Area", CATEGORICAL, tuple(area)),
        Column("Density", NUMERIC),
        Column("Region", CATEGORICAL, tuple(region)),
    ]
    return FeatureSchema(tuple(cols), "ClaimNb", "Exposure")


def infer_schema(path, response: str, exposure: str, categorical: Iterable[str], ignore: Iterable[str] = ()) -> FeatureSchema:
    """Build a schema from a CSV header; categorical levels are sorted labels."""
    categorical = list(categorical)
    ignore = set(ignore)
    levels: dict[str, set] = {c: set() for c in categorical}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        pos = {name: i for i, name in enumerate(header)}
        for name in categorical:
            if name not in pos:
                raise CsvParseError("categorical column not in header", column=name)
        for row in reader:
            for name in categorical:
                levels[name].add(row[pos[name]].strip())
    cols = []
    for name in header:
        if name in (response, exposure) or name in ignore:
            continue
        if name in levels:
            cols.append(Column(name, CATEGORICAL, tuple(sorted(levels[name]))))
        else:
            cols.append(Column(name, NUMERIC))
    return FeatureSchema(tuple(cols), response, exposure)


def _parse_float(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN", "NULL"):
        raise MissingValueError("missing value", row, column)
    try:
        value = float(text)
    except ValueError:
        raise CsvParseError(f"cannot parse {text!r} as a number", row, column) from None
    if not math.isfinite(value):
        raise MissingValueError("non-finite value", row, column)
    return value


def load_csv(path, schema: FeatureSchema) -> Dataset:
    """Read a comma-separated file with a header row.

    Columns not in the schema (e.g. a policy id) are ignored. Missing values
    are rejected; categorical labels must belong to the schema. Row numbers in
    errors count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    wanted = [schema.response_column, schema.exposure_column] + schema.names
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError("empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        for name in wanted:
            if name not in pos:
                raise CsvParseError("column missing from header", row=1, column=name)
        lookup = {c.name: {lab: k for k, lab in enumerate(c.categories)} for c in schema.columns if c.is_categorical}
        claims, exposure = [], []
        values: dict[str, list] = {name: [] for name in schema.names}
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(f"expected {len(header)} fields, got {len(row)}", row=rowno)
            n_claims = _parse_float(row[pos[schema.response_column]], rowno, schema.response_column)
            if n_claims < 0 or n_claims != int(n_claims):
                raise CsvParseError("claim count must be a non-negative integer", rowno, schema.response_column)
            v = _parse_float(row[pos[schema.exposure_column]], rowno, schema.exposure_column)
            if v <= 0:
                raise CsvParseError("exposure must be positive", rowno, schema.exposure_column)
            claims.append(int(n_claims))
            exposure.append(v)
            for col in schema.columns:
                text = row[pos[col.name]]
                if col.is_categorical:
                    label = text.strip()
                    if label == "":
                        raise MissingValueError("missing value", rowno, col.name)
                    try:
                        values[col.name].append(lookup[col.name][label])
                    except KeyError:
                        raise UnknownCategoryError(f"unknown category {label!r}", rowno, col.name) from None
                else:
                    values[col.name].append(_parse_float(text, rowno, col.name))
    feats = {}
    for col in schema.columns:
        dtype = np.int64 if col.is_categorical else np.float64
        feats[col.name] = np.asarray(values[col.name], dtype=dtype)
    return Dataset(schema, np.asarray(claims, dtype=np.int64), np.asarray(exposure), feats)


def write_csv(data: Dataset, path) -> None:
    """Write a dataset so that :func:`load_csv` reads it back exactly.

    Floats use the shortest repr that round-trips, so output is byte-stable.
    """
    schema = data.schema
    cols = [np.asarray(data.claims).astype(str), np.array([repr(float(v)) for v in data.exposure], dtype=object)]
    for col in schema.columns:
        values = data.features[col.name]
        if col.is_categorical:
            cols.append(np.asarray(col.categories, dtype=object)[values])
        else:
            cols.append(np.array([repr(float(v)) for v in values], dtype=object))
    header = [schema.response_column, schema.exposure_column] + schema.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(zip(*cols))


# --------------------------------------------------------------------------
# splitting


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_test = n - n_train - n_val
    if n > 0 and min(n_train, n_val, n_test) <= 0:
        raise DataError(f"split of {n} rows by {tuple(fractions)} leaves a part empty")
    return n_train, n_val, n_test


def split(data: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    """Uniform random partition of the rows into train/validation/test."""
    n_train, n_val, _ = split_sizes(data.n, fractions)
    perm = np.random.default_rng(seed).permutation(data.n)
    idx = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]))
    return SplitDataset(data.subset(idx[0]), data.subset(idx[1]), data.subset(idx[2]), seed, idx)


# --------------------------------------------------------------------------
# network encoding

SCALED = "scaled-numeric"
ONEHOT = "one-hot"
EMBEDDING = "embedding-input"


@dataclass(frozen=True)
class EncodedColumn:
    source: str
    encoding: str
    level: int | None = None

    @property
    def label(self) -> str:
        if self.encoding == ONEHOT:
            return f"{self.source}[{self.level}]"
        if self.encoding == EMBEDDING:
            return f"{self.source}[index]"
        return self.source


@dataclass(frozen=True)
class EncodedMatrix:
    """Network input matrix.

    Columns follow ``column_map``: scaled numerics and one-hot levels in schema
    order, then one integer-valued index column per embedded feature.
    """

    values: np.ndarray
    column_map: tuple[EncodedColumn, ...]
    scaling_params: dict

    @property
    def dense_columns(self) -> list[int]:
        return [i for i, c in enumerate(self.column_map) if c.encoding != EMBEDDING]

    @property
    def embedding_columns(self) -> dict[str, int]:
        return {c.source: i for i, c in enumerate(self.column_map) if c.encoding == EMBEDDING}


def minmax_params(data: Dataset) -> dict[str, tuple[float, float]]:
    params = {}
    for col in data.schema.columns:
        if col.is_categorical:
            continue
        x = data.features[col.name]
        if x.size == 0:
            raise DataError("scaling source is empty")
        lo, hi = float(x.min()), float(x.max())
        if hi == lo:
            raise DataError(f"numeric feature {col.name!r} is constant in the scaling source")
        params[col.name] = (lo, hi)
    return params


def encode_for_nn(data: Dataset, schema: FeatureSchema | None = None, onehot_threshold: int = 5,
                  scaling_source: Dataset | None = None, scaling_params: dict | None = None) -> EncodedMatrix:
    """Encode features for the network.

    Numerics are min-max scaled to [-1, 1] with ``2 (x - min) / (max - min) - 1``
    using the extremes of ``scaling_source`` (or precomputed ``scaling_params``).
    Factors with at most ``onehot_threshold`` levels are one-hot encoded; larger
    ones become an index column feeding an embedding layer.
    """
    schema = schema or data.schema
    if scaling_params is None:
        scaling_params = minmax_params(scaling_source if scaling_source is not None else data)
    n = data.n
    dense, dense_map, emb, emb_map = [], [], [], []
    for col in schema.columns:
        x = data.features[col.name]
        if col.is_categorical:
            k = len(col.categories)
            if k < 2:
                raise DataError(f"feature {col.name!r} has a single category")
            if k <= onehot_threshold:
                block = np.zeros((n, k))
                block[np.arange(n), x] = 1.0
                dense.append(block)
                dense_map.extend(EncodedColumn(col.name, ONEHOT, j) for j in range(k))
            else:
                emb.append(x.astype(np.float64)[:, None])
                emb_map.append(EncodedColumn(col.name, EMBEDDING))
        else:
            lo, hi = scaling_params[col.name]
            if hi == lo:
                raise DataError(f"numeric feature {col.name!r} is constant in the scaling source")
            dense.append((2.0 * (x - lo) / (hi - lo) - 1.0)[:, None])
            dense_map.append(EncodedColumn(col.name, SCALED))
    values = np.hstack(dense + emb) if dense or emb else np.zeros((n, 0))
    return EncodedMatrix(_frozen(values), tuple(dense_map + emb_map), dict(scaling_params))
