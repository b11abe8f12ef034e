"""Combined actuarial neural network: a feed-forward net with embeddings that
boosts a fixed benchmark GLM through the log-offset.

The benchmark enters as modified exposure ``v * lambda_GLM``; the network head
``lambda_NN`` is added on the log scale through fixed unit connections, so the
expected count is ``v * lambda_GLM * exp(lambda_NN)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import glm
from .data import EMBEDDING, Dataset, EncodedColumn, SplitDataset, encode_for_nn, minmax_params

ACTIVATIONS = ("lrelu", "sigmoid", "tanh")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, log):
        super().__init__(message)
        self.log = list(log)


class LayoutError(ValueError):
    pass


def _scalar(x) -> float:
    return float(np.asarray(x).reshape(-1)[0])


@dataclass(frozen=True)
class EmbeddingSpec:
    feature: str
    n_categories: int
    dim: int
    categories: tuple = ()


@dataclass(frozen=True)
class NnArchitecture:
    hidden_sizes: tuple = (20, 15, 10)
    activations: tuple = ("lrelu", "lrelu", "lrelu")
    alpha: float = 0.3
    embedding_dim: int = 2
    onehot_threshold: int = 5
    dropout_rate: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * len(self.hidden_sizes)
        object.__setattr__(self, "activations", tuple(acts))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if len(self.activations) != len(self.hidden_sizes):
            raise ValueError("one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("LReLU slope must lie in [0, 1] to stay 1-Lipschitz")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.embedding_dim < 1:
            raise ValueError("embedding dimension must be >= 1")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["activations"] = list(self.activations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NnArchitecture":
        return cls(**d)


@dataclass
class NnWeights:
    """``W[l]`` has shape ``(q_l, q_{l-1})``; embeddings are ``(k, g)``."""

    embeddings: list
    W: list
    b: list
    w_y: np.ndarray
    b_y: float

    def params(self) -> list[np.ndarray]:
        out = list(self.embeddings)
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out + [self.w_y, np.atleast_1d(np.asarray(self.b_y, dtype=self.w_y.dtype))]

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray], n_embeddings: int) -> "NnWeights":
        params = list(params)
        emb = params[:n_embeddings]
        rest = params[n_embeddings:]
        W = rest[0:-2:2]
        b = rest[1:-2:2]
        return cls(emb, W, b, rest[-2], _scalar(rest[-1]))

    def copy(self) -> "NnWeights":
        return NnWeights([e.copy() for e in self.embeddings], [w.copy() for w in self.W],
                         [x.copy() for x in self.b], self.w_y.copy(), _scalar(self.b_y))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    max_epochs: int = 100
    patience: int = 5
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class CannModel:
    architecture: NnArchitecture
    weights: NnWeights
    layout: tuple
    scaling_params: dict
    embedding_specs: tuple
    benchmark: glm.GlmModel
    training_log: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def n_dense(self) -> int:
        return sum(1 for c in self.layout if c.encoding != EMBEDDING)

    def input_neurons(self) -> list[EncodedColumn]:
        """Source of every neuron in the network's input layer (dense inputs,
        then embedding outputs)."""
        out = [c for c in self.layout if c.encoding != EMBEDDING]
        for spec in self.embedding_specs:
            out.extend(EncodedColumn(spec.feature, EMBEDDING, j) for j in range(spec.dim))
        return out

    def input_labels(self) -> list[str]:
        labels = []
        for c in self.input_neurons():
            labels.append(f"{c.source}[e{c.level}]" if c.encoding == EMBEDDING else c.label)
        return labels


# --------------------------------------------------------------------------
# activations


def _act(name: str, h: np.ndarray, alpha: float) -> np.ndarray:
    if name == "lrelu":
        return np.where(h > 0, h, alpha * h)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * h))
    return np.tanh(h)


def _act_grad(name: str, h: np.ndarray, a: np.ndarray, alpha: float) -> np.ndarray:
    if name == "lrelu":
        return np.where(h > 0, 1.0, alpha).astype(h.dtype, copy=False)
    if name == "sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


# --------------------------------------------------------------------------
# construction


def embedding_specs_for(data: Dataset, arch: NnArchitecture) -> tuple[EmbeddingSpec, ...]:
    return tuple(
        EmbeddingSpec(c.name, len(c.categories), arch.embedding_dim, c.categories)
        for c in data.schema.columns
        if c.is_categorical and len(c.categories) > arch.onehot_threshold
    )


def init_weights(n_dense: int, specs: Sequence[EmbeddingSpec], arch: NnArchitecture,
                 rng: np.random.Generator, dtype=np.float64) -> NnWeights:
    """Glorot-uniform hidden weights, U(-0.05, 0.05) embeddings, zero biases and
    a zero output layer so the untrained net contributes nothing."""
    embeddings = [rng.uniform(-0.05, 0.05, size=(s.n_categories, s.dim)).astype(dtype) for s in specs]
    q_prev = n_dense + sum(s.dim for s in specs)
    W, b = [], []
    for q in arch.hidden_sizes:
        limit = np.sqrt(6.0 / (q + q_prev))
        W.append(rng.uniform(-limit, limit, size=(q, q_prev)).astype(dtype))
        b.append(np.zeros(q, dtype=dtype))
        q_prev = q
    return NnWeights(embeddings, W, b, np.zeros(q_prev, dtype=dtype), 0.0)


def init_cann(benchmark: glm.GlmModel, scaling_source: Dataset, arch: NnArchitecture | None = None,
              seed: int = 0, dtype=np.float64) -> CannModel:
    arch = arch or NnArchitecture()
    params = minmax_params(scaling_source)
    enc = encode_for_nn(scaling_source.subset(np.arange(min(1, scaling_source.n))),
                        onehot_threshold=arch.onehot_threshold, scaling_params=params)
    specs = embedding_specs_for(scaling_source, arch)
    n_dense = len(enc.dense_columns)
    weights = init_weights(n_dense, specs, arch, np.random.default_rng(seed), dtype)
    return CannModel(arch, weights, enc.column_map, params, specs, benchmark)


# --------------------------------------------------------------------------
# forward pass


def encode(model: CannModel, data: Dataset) -> np.ndarray:
    enc = encode_for_nn(data, onehot_threshold=model.architecture.onehot_threshold,
                        scaling_params=model.scaling_params)
    if enc.column_map != tuple(model.layout):
        raise LayoutError("encoded columns do not match the model's input layout")
    return enc.values


def modified_exposure(model: CannModel, data: Dataset) -> np.ndarray:
    """``v * lambda_GLM`` from the benchmark."""
    return glm.predict(model.benchmark, data)


def split_inputs(model: CannModel, X: np.ndarray):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != len(model.layout):
        raise LayoutError(f"expected {len(model.layout)} encoded columns, got {X.shape}")
    dense_idx = [i for i, c in enumerate(model.layout) if c.encoding != EMBEDDING]
    emb_pos = {c.source: i for i, c in enumerate(model.layout) if c.encoding == EMBEDDING}
    dense = X[:, dense_idx]
    codes = [X[:, emb_pos[s.feature]].astype(np.int64) for s in model.embedding_specs]
    return dense, codes


def _input_layer(weights: NnWeights, dense: np.ndarray, codes) -> np.ndarray:
    if not codes:
        return dense
    return np.hstack([dense] + [E[c] for E, c in zip(weights.embeddings, codes)])


def _hidden_forward(weights: NnWeights, arch: NnArchitecture, z0, masks=None):
    hs, acts = [], [z0]
    a = z0
    for l, (W, b) in enumerate(zip(weights.W, weights.b)):
        h = a @ W.T + b
        a = _act(arch.activations[l], h, arch.alpha)
        hs.append(h)
        if masks is not None:
            a_out = a * masks[l]
            acts.append((a, a_out))
            a = a_out
        else:
            acts.append((a, a))
    return hs, acts, a


def nn_output(model: CannModel, X: np.ndarray) -> np.ndarray:
    """Network head ``lambda_NN`` (identity output activation)."""
    dense, codes = split_inputs(model, X)
    dense = dense.astype(model.weights.w_y.dtype, copy=False)
    z0 = _input_layer(model.weights, dense, codes)
    _, _, a = _hidden_forward(model.weights, model.architecture, z0)
    return a @ model.weights.w_y + model.weights.b_y


def forward(model: CannModel, X: np.ndarray, v_glm: np.ndarray) -> np.ndarray:
    """Expected counts ``exp(ln v_GLM + lambda_NN)``; dropout is never applied."""
    f = nn_output(model, X).astype(np.float64)
    return np.exp(np.log(np.asarray(v_glm, dtype=np.float64)) + f)


def predict(model: CannModel, data: Dataset) -> np.ndarray:
    return forward(model, encode(model, data), modified_exposure(model, data))


def predict_rate(model: CannModel, data: Dataset) -> np.ndarray:
    return predict(model, data) / data.exposure


# --------------------------------------------------------------------------
# loss and gradients


def loss_and_grads(model: CannModel, dense: np.ndarray, codes, y: np.ndarray, v_glm: np.ndarray,
                   masks=None, weights: NnWeights | None = None):
    """Mean Poisson deviance of a batch and its gradient for every trainable
    parameter, ordered as :meth:`NnWeights.params`."""
    w = weights or model.weights
    arch = model.architecture
    n = y.shape[0]
    z0 = _input_layer(w, dense, codes)
    hs, acts, a_last = _hidden_forward(w, arch, z0, masks)
    f = a_last @ w.w_y + w.b_y
    mu = v_glm * np.exp(f)
    dev = 2.0 * (mu - y + np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0))
    loss = float(np.mean(dev))

    delta = (2.0 / n) * (mu - y)
    g_wy = a_last.T @ delta
    g_by = np.array([delta.sum()], dtype=w.w_y.dtype)
    g = delta[:, None] * w.w_y[None, :]
    gW = [None] * len(w.W)
    gb = [None] * len(w.W)
    for l in range(len(w.W) - 1, -1, -1):
        a_pre, _ = acts[l + 1]
        if masks is not None:
            g = g * masks[l]
        g = g * _act_grad(arch.activations[l], hs[l], a_pre, arch.alpha)
        a_in = acts[l][1] if l > 0 else z0
        gW[l] = g.T @ a_in
        gb[l] = g.sum(axis=0)
        if l > 0 or codes:
            g = g @ w.W[l]
    g_emb = []
    offset = dense.shape[1]
    for spec, E, c in zip(model.embedding_specs, w.embeddings, codes):
        block = g[:, offset:offset + spec.dim]
        ge = np.empty_like(E)
        for j in range(spec.dim):
            ge[:, j] = np.bincount(c, weights=block[:, j], minlength=spec.n_categories)
        g_emb.append(ge)
        offset += spec.dim
    grads = list(g_emb)
    for a, b in zip(gW, gb):
        grads += [a, b]
    grads += [g_wy, g_by]
    return loss, grads


class RMSProp:
    """``v <- rho v + (1 - rho) g^2``; ``w <- w - lr g / (sqrt(v) + eps)``."""

    def __init__(self, params, learning_rate=1e-3, rho=0.9, epsilon=1e-7):
        self.lr = learning_rate
        self.rho = rho
        self.eps = epsilon
        self.cache = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, c in zip(params, grads, self.cache):
            c *= self.rho
            c += (1.0 - self.rho) * g * g
            p -= self.lr * g / (np.sqrt(c) + self.eps)


# --------------------------------------------------------------------------
# training


def _mean_dev(model, dense, codes, y, v_glm):
    z0 = _input_layer(model.weights, dense, codes)
    _, _, a = _hidden_forward(model.weights, model.architecture, z0)
    f = (a @ model.weights.w_y + model.weights.b_y).astype(np.float64)
    return glm.mean_poisson_deviance(y, v_glm * np.exp(f))


def train(data: SplitDataset, benchmark: glm.GlmModel, arch: NnArchitecture | None = None,
          cfg: TrainConfig | None = None, verbose: bool = False) -> CannModel:
    """Fit the network part of a CANN on ``data.train`` by mini-batch RMSProp on
    the Poisson deviance, with inverted dropout on hidden neurons and early
    stopping on ``data.validation``. The weights of the best validation epoch
    are returned; epoch 0 is the untrained model."""
    arch = arch or NnArchitecture()
    cfg = cfg or TrainConfig()
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    model = init_cann(benchmark, data.train, arch, seed=int(rng.integers(2**31)), dtype=dtype)

    dense_tr, codes_tr = split_inputs(model, encode(model, data.train))
    dense_tr = dense_tr.astype(dtype)
    y_tr = data.train.claims.astype(dtype)
    v_tr = modified_exposure(model, data.train).astype(dtype)
    dense_va, codes_va = split_inputs(model, encode(model, data.validation))
    dense_va = dense_va.astype(dtype)
    y_va = data.validation.claims.astype(np.float64)
    v_va = modified_exposure(model, data.validation)

    params = model.weights.params()
    # b_y is held as a 1-element array during training
    model.weights.b_y = params[-1]
    opt = RMSProp(params, cfg.learning_rate, cfg.rho, cfg.epsilon)
    keep = 1.0 - arch.dropout_rate

    def val_dev():
        return _mean_dev(model, dense_va, codes_va, y_va, v_va)

    best_val = val_dev()
    best = model.weights.copy()
    log = [(0, _mean_dev(model, dense_tr, codes_tr, y_tr.astype(np.float64), v_tr.astype(np.float64)), best_val)]
    best_epoch, epoch, since = 0, 0, 0
    n = data.train.n
    # divergence is detected from the validation deviance, so overflow is not warned about
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            perm = rng.permutation(n)
            total, count = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                rows = perm[start:start + cfg.batch_size]
                masks = None
                if arch.dropout_rate > 0:
                    masks = [(rng.random((rows.size, q)) < keep).astype(dtype) / dtype.type(keep)
                             for q in arch.hidden_sizes]
                loss, grads = loss_and_grads(model, dense_tr[rows], [c[rows] for c in codes_tr],
                                             y_tr[rows], v_tr[rows], masks)
                opt.step(params, grads)
                total += loss * rows.size
                count += rows.size
            vd = val_dev()
            log.append((epoch, total / count, vd))
            if verbose:
                print(f"epoch {epoch:3d}  train {total / count:.6f}  val {vd:.6f}")
            if not np.isfinite(vd):
                raise TrainingDivergedError(f"validation deviance is {vd} at epoch {epoch}", log)
            if vd < best_val:
                best_val, best, best_epoch, since = vd, model.weights.copy(), epoch, 0
            else:
                since += 1
                if since >= cfg.patience:
                    break
    best.b_y = _scalar(best.b_y)
    model.weights = best
    model.training_log = log
    model.stopped_epoch = epoch
    model.best_epoch = best_epoch
    return model


def balance_violation(model: CannModel, data: Dataset) -> float:
    """``WAPF - WAOF`` of the CANN on ``data``."""
    mu = predict(model, data)
    return glm.wapf(mu, data.exposure) - glm.waof(data.claims, data.exposure)


# --------------------------------------------------------------------------
# export / persistence


def export_weights(model: CannModel) -> list[np.ndarray]:
    """Embeddings, then ``W[l], b[l]`` per hidden layer, then ``w_y`` (as a
    column), ``b_y``, and the three fixed entries of the skip path (unit weight
    from the network head, unit weight from the modified exposure, zero output
    bias). Weight matrices use the ``(q_l, q_{l-1})`` orientation."""
    w = model.weights
    out = [e.copy() for e in w.embeddings]
    for W, b in zip(w.W, w.b):
        out += [W.copy(), b.copy()]
    out += [w.w_y.reshape(-1, 1).copy(), np.array([_scalar(w.b_y)])]
    out += [np.ones((1, 1)), np.ones((1, 1)), np.zeros(1)]
    return out


def import_weights(model: CannModel, arrays: Sequence[np.ndarray]) -> CannModel:
    """Inverse of :func:`export_weights`."""
    arrays = list(arrays)
    k = len(model.embedding_specs)
    d = len(model.architecture.hidden_sizes)
    if len(arrays) != k + 2 * (d + 1) + 3:
        raise LayoutError("weight list length does not match the architecture")
    fixed = arrays[-3:]
    if not (fixed[0].item() == 1.0 and fixed[1].item() == 1.0 and fixed[2].item() == 0.0):
        raise LayoutError("skip-connection entries must be 1, 1 and 0")
    core = arrays[:-3]
    emb = [np.array(a) for a in core[:k]]
    W = [np.array(a) for a in core[k:k + 2 * d:2]]
    b = [np.array(a).reshape(-1) for a in core[k + 1:k + 2 * d:2]]
    w_y = np.array(core[-2]).reshape(-1)
    b_y = _scalar(core[-1])
    return replace(model, weights=NnWeights(emb, W, b, w_y, b_y))


def weight_names(model: CannModel) -> list[str]:
    names = [f"embedding:{s.feature}" for s in model.embedding_specs]
    for l in range(1, len(model.architecture.hidden_sizes) + 1):
        names += [f"W{l}", f"b{l}"]
    return names + ["w_y", "b_y", "skip:nn_head", "skip:modified_exposure", "output_bias"]


def to_dict(model: CannModel) -> dict:
    arrays = export_weights(model)
    return {
        "architecture": model.architecture.to_dict(),
        "layout": [[c.source, c.encoding, c.level] for c in model.layout],
        "scaling_params": {k: list(v) for k, v in sorted(model.scaling_params.items())},
        "embedding_specs": [[s.feature, s.n_categories, s.dim, list(s.categories)] for s in model.embedding_specs],
        "benchmark": model.benchmark.to_dict(),
        "stopped_epoch": model.stopped_epoch,
        "best_epoch": model.best_epoch,
        "weights": [
            {"name": name, "shape": list(a.shape), "values": [float(x) for x in a.ravel()]}
            for name, a in zip(weight_names(model), arrays)
        ],
    }


def from_dict(d: dict) -> CannModel:
    arch = NnArchitecture.from_dict(d["architecture"])
    layout = tuple(EncodedColumn(s, e, lvl) for s, e, lvl in d["layout"])
    specs = tuple(EmbeddingSpec(f, int(k), int(g), tuple(c)) for f, k, g, c in d["embedding_specs"])
    arrays = [np.asarray(w["values"], dtype=np.float64).reshape(w["shape"]) for w in d["weights"]]
    shell = CannModel(arch, NnWeights([], [], [], np.zeros(0), 0.0), layout,
                      {k: tuple(v) for k, v in d["scaling_params"].items()}, specs,
                      glm.GlmModel.from_dict(d["benchmark"]), [], d.get("stopped_epoch", 0), d.get("best_epoch", 0))
    return import_weights(shell, arrays)


def save(model: CannModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)) + "\n")


def load(path) -> CannModel:
    return from_dict(json.loads(Path(path).read_text()))


def write_epoch_log(model: CannModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_dev", "val_dev"])
        for epoch, tr, va in model.training_log:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
