"""Dense networks on top of :mod:`saga.autodiff`: the victim MLP autoencoder,
the clean/adversarial MLP detector and a PointNet-style classifier."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, affine_norm, batch_norm, cross_entropy
from .serialize import dumps17

log = logging.getLogger(__name__)

AE_HIDDEN = (300, 200, 30, 200)
DETECTOR_HIDDEN = (300, 200)
POINT_DIMS = (32, 128, 256, 512)
HEAD_DIMS = (256, 128, 64)
BN_MOMENTUM = 0.9


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay_factor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay_factor < 0:
            raise ValueError(f"invalid training config {self}")


class Adam:
    """Adam over a list of numpy arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class MlpModel:
    kind: str
    dims: list
    activations: list
    weights: list
    biases: list
    normalization: dict = field(default_factory=dict)
    seed: int = 0
    training_meta: dict = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def create(cls, kind: str, dims: Sequence[int], activations: Sequence[str], seed: int = 0) -> "MlpModel":
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        weights = [xavier_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(kind, list(dims), list(activations), weights, biases, seed=seed)

    def parameters(self) -> list:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def checksum(self) -> str:
        return _checksum(self.parameters())

    def forward(self, x: Tensor, params: Optional[list] = None) -> Tensor:
        if params is None:
            params = [Tensor(p) for p in self.parameters()]
        h = x
        for i, act in enumerate(self.activations):
            h = (h @ params[2 * i] + params[2 * i + 1]).activation(act)
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ W + b
            if act == "tanh":
                x = np.tanh(x)
            elif act == "relu":
                x = np.maximum(x, 0.0)
        return x


def autoencoder(n_vertices: int, seed: int = 0) -> MlpModel:
    d = 3 * n_vertices
    return MlpModel.create("autoencoder", (d, *AE_HIDDEN, d), ("tanh",) * 4 + ("none",), seed)


def detector(n_vertices: int, seed: int = 0) -> MlpModel:
    d = 3 * n_vertices
    return MlpModel.create("detector", (d, *DETECTOR_HIDDEN, 2), ("relu", "relu", "none"), seed)


@dataclass
class PointClassifier:
    """Shared per-point dense layers with batch norm and relu, a max-pool over
    points, then a dense head with relu between layers."""

    n_classes: int
    point_weights: list
    point_biases: list
    bn_gamma: list
    bn_beta: list
    running_mean: list
    running_var: list
    head_weights: list
    head_biases: list
    normalization: dict = field(default_factory=dict)
    seed: int = 0
    training_meta: dict = field(default_factory=dict)
    kind: str = "classifier"

    @classmethod
    def create(cls, n_classes: int, seed: int = 0) -> "PointClassifier":
        rng = np.random.default_rng(seed)
        pd = (3, *POINT_DIMS)
        hd = (POINT_DIMS[-1], *HEAD_DIMS, n_classes)
        return cls(
            n_classes,
            [xavier_uniform(rng, a, b) for a, b in zip(pd[:-1], pd[1:])],
            [np.zeros(b) for b in pd[1:]],
            [np.ones(b) for b in pd[1:]],
            [np.zeros(b) for b in pd[1:]],
            [np.zeros(b) for b in pd[1:]],
            [np.ones(b) for b in pd[1:]],
            [xavier_uniform(rng, a, b) for a, b in zip(hd[:-1], hd[1:])],
            [np.zeros(b) for b in hd[1:]],
            seed=seed,
        )

    @property
    def point_dims(self):
        return [3] + [w.shape[1] for w in self.point_weights]

    @property
    def head_dims(self):
        return [self.head_weights[0].shape[0]] + [w.shape[1] for w in self.head_weights]

    def parameters(self) -> list:
        out = []
        for W, b, g, be in zip(self.point_weights, self.point_biases, self.bn_gamma, self.bn_beta):
            out += [W, b, g, be]
        for W, b in zip(self.head_weights, self.head_biases):
            out += [W, b]
        return out

    def checksum(self) -> str:
        return _checksum(self.parameters() + self.running_mean + self.running_var)

    def forward(self, x: Tensor, params: Optional[list] = None, train: bool = False) -> Tensor:
        """x has shape (B, N, 3); returns (B, C) logits."""
        if params is None:
            params = [Tensor(p) for p in self.parameters()]
        h = x
        for i in range(len(self.point_weights)):
            W, b, g, be = params[4 * i: 4 * i + 4]
            z = h @ W + b
            if train:
                z, mu, var = batch_norm(z, g, be)
                self.running_mean[i][:] = BN_MOMENTUM * self.running_mean[i] + (1 - BN_MOMENTUM) * mu
                self.running_var[i][:] = BN_MOMENTUM * self.running_var[i] + (1 - BN_MOMENTUM) * var
            else:
                z = affine_norm(z, self.running_mean[i], self.running_var[i], g, be)
            h = z.relu()
        h = h.max(axis=1)
        off = 4 * len(self.point_weights)
        nh = len(self.head_weights)
        for i in range(nh):
            h = h @ params[off + 2 * i] + params[off + 2 * i + 1]
            if i < nh - 1:
                h = h.relu()
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        return self.forward(Tensor(x)).data

    def predict(self, x: np.ndarray, batch: int = 32) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([np.argmax(self(x[i:i + batch]), axis=1) for i in range(0, len(x), batch)])


# ---------------------------------------------------------------------------
# training

def _batches(rng: np.random.Generator, count: int, batch_size: int):
    order = rng.permutation(count)
    for i in range(0, count, batch_size):
        yield order[i:i + batch_size]


def _as_flat(data) -> np.ndarray:
    arrs = [getattr(d, "vertices", d) for d in data]
    return np.stack([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrs])


def _as_points(data) -> np.ndarray:
    arrs = [getattr(d, "vertices", d) for d in data]
    return np.stack([np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in arrs])


def weight_penalty(model: MlpModel, params: Optional[list] = None, factor: float = 0.01):
    """factor * sum of Frobenius norms of every weight matrix except the last."""
    if params is None:
        return factor * sum(float(np.linalg.norm(W)) for W in model.weights[:-1])
    total = None
    for i in range(len(model.weights) - 1):
        term = params[2 * i].norm()
        total = term if total is None else total + term
    return total * factor


def reconstruction_error(model: MlpModel, X: np.ndarray) -> float:
    """Mean over samples of the mean squared per-vertex distance."""
    R = model(X) - X
    return float(np.mean(np.sum(R.reshape(len(X), -1, 3) ** 2, axis=2)))


def train_autoencoder(train, config: TrainConfig, val=None) -> MlpModel:
    """Fit the autoencoder on flattened vertex coordinates.

    Loss per batch: mean squared vertex distance plus
    ``weight_decay_factor`` times the summed Frobenius norms of all weight
    matrices but the last.
    """
    X = _as_flat(train)
    n = X.shape[1] // 3
    if X.shape[1] % 3:
        raise ValueError("inputs must be n x 3 vertex arrays")
    Xv = _as_flat(val) if val is not None and len(val) else None
    model = autoencoder(n, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.parameters(), config.lr)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(rng, len(X), config.batch_size):
            ps = [Tensor(p, requires_grad=True) for p in model.parameters()]
            xb = Tensor(X[idx])
            out = model.forward(xb, ps)
            loss = (out - xb).square().sum() * (1.0 / (len(idx) * n))
            if config.weight_decay_factor > 0:
                loss = loss + weight_penalty(model, ps, config.weight_decay_factor)
            loss.backward()
            opt.step([p.grad for p in ps])
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if Xv is not None:
            rec["val_recon"] = reconstruction_error(model, Xv)
        history.append(rec)
        if epoch % max(1, config.epochs // 10) == 0:
            log.info("ae epoch %d %s", epoch, rec)
    model.training_meta = {"config": vars(config), "history": history,
                           "train_recon": reconstruction_error(model, X)}
    model.frozen = True
    return model


def _fit_classifier_like(model, forward, X, y, config, Xv, yv, select_best):
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.parameters(), config.lr)
    history = []
    best = (-1.0, None, None)
    for epoch in range(config.epochs):
        losses, correct = [], 0
        for idx in _batches(rng, len(X), config.batch_size):
            ps = [Tensor(p, requires_grad=True) for p in model.parameters()]
            logits = forward(Tensor(X[idx]), ps, True)
            loss = cross_entropy(logits, y[idx])
            loss.backward()
            opt.step([p.grad for p in ps])
            losses.append(float(loss.data))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_acc": correct / len(X)}
        if Xv is not None:
            rec["val_acc"] = float(np.mean(predict(model, Xv) == yv))
            if select_best and rec["val_acc"] > best[0]:
                best = (rec["val_acc"], epoch, [p.copy() for p in _state(model)])
        history.append(rec)
    if select_best and best[2] is not None:
        for dst, src in zip(_state(model), best[2]):
            dst[...] = src
    return history, best[1]


def _state(model) -> list:
    if isinstance(model, PointClassifier):
        return model.parameters() + model.running_mean + model.running_var
    return model.parameters()


def predict(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, PointClassifier):
        return model.predict(X)
    return np.argmax(model(X), axis=1)


def train_classifier(train, labels, config: TrainConfig, val=None, val_labels=None,
                     select_best: bool = False) -> PointClassifier:
    X = _as_points(train)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("classifier needs at least two classes")
    if not np.array_equal(classes, np.arange(classes.size)):
        raise ValueError("labels must be dense 0..C-1")
    model = PointClassifier.create(int(classes.size), config.seed)
    Xv = _as_points(val) if val is not None and len(val) else None
    yv = np.asarray(val_labels, dtype=np.int64) if Xv is not None else None
    history, best = _fit_classifier_like(
        model, lambda x, ps, tr: model.forward(x, ps, train=tr), X, y, config, Xv, yv, select_best)
    model.training_meta = {"config": vars(config), "history": history, "best_epoch": best}
    return model


def train_detector(samples, labels, config: TrainConfig, val=None, val_labels=None,
                   select_best: bool = True) -> MlpModel:
    """Binary clean (0) / adversarial (1) MLP on flattened coordinates.

    With validation data and ``select_best`` the parameters of the epoch with
    the highest validation accuracy are kept.
    """
    X = _as_flat(samples)
    y = np.asarray(labels, dtype=np.int64)
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("detector labels must be 0/1")
    frac = float(np.mean(y))
    meta = {"config": vars(config)}
    if not 0.4 <= frac <= 0.6:
        msg = f"detector training labels unbalanced: {frac:.2f} adversarial"
        warnings.warn(msg)
        meta["warning"] = msg
    model = detector(X.shape[1] // 3, config.seed)
    Xv = _as_flat(val) if val is not None and len(val) else None
    yv = np.asarray(val_labels, dtype=np.int64) if Xv is not None else None
    history, best = _fit_classifier_like(
        model, lambda x, ps, tr: model.forward(x, ps), X, y, config, Xv, yv, select_best)
    meta.update(history=history, best_epoch=best)
    model.training_meta = meta
    model.frozen = True
    return model


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model) -> bytes:
    if isinstance(model, PointClassifier):
        doc = {
            "kind": "classifier",
            "dims": {"point": model.point_dims, "head": model.head_dims},
            "activations": {"point": ["relu"] * len(model.point_weights),
                            "head": ["relu"] * (len(model.head_weights) - 1) + ["none"]},
            "weights": [p.reshape(-1) for p in model.parameters()],
            "bn_running_stats": [{"mean": m, "var": v} for m, v in zip(model.running_mean, model.running_var)],
        }
    else:
        doc = {
            "kind": model.kind,
            "dims": model.dims,
            "activations": model.activations,
            "weights": [p.reshape(-1) for p in model.parameters()],
            "bn_running_stats": [],
        }
    doc.update(normalization=model.normalization, seed=model.seed, training_meta=model.training_meta)
    return dumps17(doc).encode("utf-8")


def _take(flat: list, shapes: list) -> list:
    if len(flat) != len(shapes):
        raise CheckpointError(f"checkpoint has {len(flat)} parameter arrays, expected {len(shapes)}")
    out = []
    for arr, shape in zip(flat, shapes):
        a = np.array(arr, dtype=np.float64)
        if a.size != int(np.prod(shape)):
            raise CheckpointError(f"parameter of shape {shape} has {a.size} entries")
        out.append(a.reshape(shape))
    return out


def load_model(data):
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    try:
        kind = doc["kind"]
        dims = doc["dims"]
        weights = doc["weights"]
        norm = doc.get("normalization", {})
        seed = int(doc.get("seed", 0))
        meta = doc.get("training_meta", {})
        if kind == "classifier":
            pd, hd = dims["point"], dims["head"]
            shapes = []
            for a, b in zip(pd[:-1], pd[1:]):
                shapes += [(a, b), (b,), (b,), (b,)]
            for a, b in zip(hd[:-1], hd[1:]):
                shapes += [(a, b), (b,)]
            ps = _take(weights, shapes)
            npl = len(pd) - 1
            stats = doc["bn_running_stats"]
            if len(stats) != npl:
                raise CheckpointError("batch-norm statistics do not match point layers")
            return PointClassifier(
                int(hd[-1]), ps[0:4 * npl:4], ps[1:4 * npl:4], ps[2:4 * npl:4], ps[3:4 * npl:4],
                [np.array(s["mean"], dtype=np.float64) for s in stats],
                [np.array(s["var"], dtype=np.float64) for s in stats],
                ps[4 * npl::2], ps[4 * npl + 1::2], norm, seed, meta)
        acts = doc["activations"]
        if len(acts) != len(dims) - 1:
            raise CheckpointError("activation count does not match dims")
        shapes = []
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        ps = _take(weights, shapes)
        return MlpModel(kind, list(dims), list(acts), ps[0::2], ps[1::2], norm, seed, meta, frozen=True)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint schema mismatch: {exc}") from exc
