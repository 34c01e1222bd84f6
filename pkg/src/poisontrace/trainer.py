"""Checkpointed mini-batch SGD with cached, randomly projected gradients.

Two model families are supported: multinomial logistic regression and a
one-hidden-layer tanh perceptron. Both have closed-form gradients, so no
autodiff is needed. At every checkpoint iteration ``t`` the trainer samples a
fresh Gaussian projection ``G_t`` and stores ``G_t @ grad`` of the final-layer
loss gradient for every training sample, evaluated at the parameters *before*
the step of iteration ``t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from poisontrace._io import atomic_directory
from poisontrace.core import LabeledDataset, Sample

RECORD_FORMAT = "poisontrace-record"
RECORD_VERSION = 1
# Coordinate order of flattened final-layer gradients; bump on change.
FLATTEN_ORDER = "v1:outer-first;W-row-major;then-b"


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(eq=False)
class ModelParams:
    """Parameters of a (possibly zero-hidden-layer) tanh network.

    ``classifier`` has shape ``(C, h + 1)`` with the bias in the last column;
    ``hidden`` is ``None`` for logistic regression or ``(h, d + 1)``.
    """

    classifier: np.ndarray
    hidden: Optional[np.ndarray] = None

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]

    @property
    def input_dim(self) -> int:
        if self.hidden is None:
            return self.classifier.shape[1] - 1
        return self.hidden.shape[1] - 1

    @property
    def num_layers(self) -> int:
        return 1 if self.hidden is None else 2

    def copy(self) -> "ModelParams":
        return ModelParams(self.classifier.copy(),
                           None if self.hidden is None else self.hidden.copy())

    def layers(self) -> list:
        """Weight matrices, outermost first."""
        return [self.classifier] if self.hidden is None else [self.classifier, self.hidden]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.layers())

    def features(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} features, got {X.shape[1]}")
        if self.hidden is None:
            return X
        return np.tanh(X @ self.hidden[:, :-1].T + self.hidden[:, -1])

    def logits(self, X: np.ndarray) -> np.ndarray:
        a = self.features(X)
        return a @ self.classifier[:, :-1].T + self.classifier[:, -1]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, data: LabeledDataset) -> float:
        return float(np.mean(self.predict(data.X) == data.y))

    def loss(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample cross-entropy."""
        return cross_entropy(self.logits(X), one_hot(y, self.num_classes))

    def flatten(self) -> np.ndarray:
        return np.concatenate([_flatten_layer(w) for w in self.layers()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, shapes: Sequence[Sequence[int]]) -> "ModelParams":
        mats, pos = [], 0
        for rows, cols in shapes:
            n = rows * cols
            mats.append(_unflatten_layer(flat[pos:pos + n], rows, cols))
            pos += n
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")
        return cls(mats[0], mats[1] if len(mats) > 1 else None)

    def shapes(self) -> list:
        return [list(w.shape) for w in self.layers()]


def _flatten_layer(w: np.ndarray) -> np.ndarray:
    return np.concatenate([w[:, :-1].ravel(), w[:, -1]])


def _unflatten_layer(flat: np.ndarray, rows: int, cols: int) -> np.ndarray:
    w = np.empty((rows, cols))
    w[:, :-1] = flat[: rows * (cols - 1)].reshape(rows, cols - 1)
    w[:, -1] = flat[rows * (cols - 1):]
    return w


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Cross-entropy against (possibly soft) target distributions."""
    return -(targets * log_softmax(logits)).sum(axis=-1)


def init_params(input_dim: int, num_classes: int, hidden: int, rng: np.random.Generator,
                init_scale: float = 1.0) -> ModelParams:
    if hidden <= 0:
        w = rng.standard_normal((num_classes, input_dim + 1)) * init_scale / math.sqrt(input_dim)
        w[:, -1] = 0.0
        return ModelParams(w)
    w1 = rng.standard_normal((hidden, input_dim + 1)) / math.sqrt(input_dim)
    w1[:, -1] = 0.0
    w2 = rng.standard_normal((num_classes, hidden + 1)) * init_scale / math.sqrt(hidden)
    w2[:, -1] = 0.0
    return ModelParams(w2, w1)


def full_gradient(params: ModelParams, X: np.ndarray, targets: np.ndarray) -> tuple:
    """Mean loss and its gradient w.r.t. every layer (outermost first)."""
    a = params.features(X)
    logits = a @ params.classifier[:, :-1].T + params.classifier[:, -1]
    loss = float(cross_entropy(logits, targets).mean())
    delta = (softmax(logits) - targets) / X.shape[0]
    grads = [np.hstack([delta.T @ a, delta.sum(axis=0)[:, None]])]
    if params.hidden is not None:
        dh = (delta @ params.classifier[:, :-1]) * (1.0 - a ** 2)
        grads.append(np.hstack([dh.T @ X, dh.sum(axis=0)[:, None]]))
    return loss, grads


def final_layer_gradient_dim(params: ModelParams, layers: int = 1) -> int:
    _check_layers(params, layers)
    return sum(w.size for w in params.layers()[:layers])


def _check_layers(params: ModelParams, layers: int) -> None:
    if layers not in (1, 2):
        raise ValueError("gradient layer count must be 1 or 2")
    if layers > params.num_layers:
        raise ValueError(f"model has only {params.num_layers} layer(s)")


def final_layer_gradients(params: ModelParams, X: np.ndarray, y: np.ndarray,
                          layers: int = 1) -> np.ndarray:
    """Per-sample cross-entropy gradients w.r.t. the last ``layers`` layers.

    Returns an ``(N, p)`` array. Each row lists, outermost layer first, the
    layer's weights in row-major order followed by its bias.
    """
    _check_layers(params, layers)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[0] != y.shape[0]:
        raise ValueError("feature and label counts differ")
    a = params.features(X)
    delta = softmax(a @ params.classifier[:, :-1].T + params.classifier[:, -1])
    delta[np.arange(y.size), y] -= 1.0
    n = X.shape[0]
    parts = [(delta[:, :, None] * a[:, None, :]).reshape(n, -1), delta]
    if layers == 2:
        dh = (delta @ params.classifier[:, :-1]) * (1.0 - a ** 2)
        parts += [(dh[:, :, None] * X[:, None, :]).reshape(n, -1), dh]
    return np.hstack(parts)


def final_layer_gradient(params: ModelParams, sample: Sample, layers: int = 1) -> np.ndarray:
    """Gradient vector of one sample's loss; see :func:`final_layer_gradients`."""
    x = np.asarray(sample.x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("sample features must be a vector")
    return final_layer_gradients(params, x[None, :], np.array([sample.y]), layers)[0]


def sample_projection(r: int, p: int, seed) -> np.ndarray:
    """``r x p`` matrix with i.i.d. N(0, 1/r) entries, so ``E[G^T G] = I_p``."""
    if r < 1 or p < 1:
        raise ValueError("projection shape must be positive")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((r, p)) / math.sqrt(r)


def project(G: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Sketch a gradient vector (or an ``(N, p)`` stack of them) with ``G``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape[-1] != G.shape[1]:
        raise ValueError(f"gradient dim {grad.shape[-1]} does not match projection {G.shape}")
    if grad.ndim == 1:
        return G @ grad
    return grad @ G.T


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule and checkpointing parameters.

    ``checkpoints`` lists 1-based iteration numbers explicitly; otherwise
    ``num_checkpoints`` iterations are spaced uniformly over the run, ending
    at the last one. ``projection_dim = None`` stores unprojected gradients
    (identity projection).
    """

    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    lr_drops: tuple = ()
    lr_drop_factor: float = 0.1
    weight_decay: float = 2e-4
    momentum: float = 0.9
    hidden: int = 32
    init_scale: float = 1.0
    num_checkpoints: int = 10
    checkpoints: Optional[tuple] = None
    projection_dim: Optional[int] = 64
    gradient_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ValueError("projection dimension must be >= 1")
        if self.gradient_layers not in (1, 2):
            raise ValueError("gradient_layers must be 1 or 2")
        if self.gradient_layers == 2 and self.hidden <= 0:
            raise ValueError("two gradient layers need a hidden layer")
        if self.checkpoints is not None:
            object.__setattr__(self, "checkpoints", tuple(int(t) for t in self.checkpoints))
        object.__setattr__(self, "lr_drops", tuple(int(e) for e in self.lr_drops))

    def iterations(self, n: int) -> int:
        return self.epochs * math.ceil(n / self.batch_size)

    def checkpoint_set(self, n: int) -> tuple:
        T = self.iterations(n)
        if self.checkpoints is not None:
            ts = tuple(sorted(set(self.checkpoints)))
        else:
            if self.num_checkpoints < 1:
                raise ValueError("need at least one checkpoint")
            ts = tuple(sorted(set(
                int(round(v)) for v in np.linspace(T / self.num_checkpoints, T, self.num_checkpoints))))
        if not ts or ts[0] < 1 or ts[-1] > T:
            raise ValueError(f"checkpoints must lie in [1, {T}]")
        return ts

    def lr_at_epoch(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drops if epoch >= e)
        return self.lr * self.lr_drop_factor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        d["checkpoints"] = None if self.checkpoints is None else list(self.checkpoints)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_drops"] = tuple(d.get("lr_drops", ()))
        if d.get("checkpoints") is not None:
            d["checkpoints"] = tuple(d["checkpoints"])
        return cls(**d)


@dataclass(eq=False)
class Checkpoint:
    iteration: int
    lr: float
    params: ModelParams
    projection: np.ndarray
    grads: np.ndarray


@dataclass(eq=False)
class TrainingRecord:
    checkpoints: list
    final_params: ModelParams
    config: TrainConfig
    epoch_losses: list = field(default_factory=list)
    flatten_order: str = FLATTEN_ORDER

    @property
    def iterations(self) -> list:
        return [c.iteration for c in self.checkpoints]

    @property
    def rates(self) -> np.ndarray:
        return np.array([c.lr for c in self.checkpoints])

    @property
    def sketches(self) -> np.ndarray:
        """``(|T|, N, r)`` stack of projected training gradients."""
        return np.stack([c.grads for c in self.checkpoints])

    @property
    def num_samples(self) -> int:
        return self.checkpoints[0].grads.shape[0]

    def event_sketches(self, sample: Sample) -> np.ndarray:
        """``(|T|, r)`` projected gradients of one sample at every checkpoint."""
        layers = self.config.gradient_layers
        return np.stack([project(c.projection, final_layer_gradient(c.params, sample, layers))
                         for c in self.checkpoints])

    def sample_sketches(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sketch arbitrary samples under this record's checkpoints and projections."""
        layers = self.config.gradient_layers
        return np.stack([project(c.projection, final_layer_gradients(c.params, X, y, layers))
                         for c in self.checkpoints])


def _stage_seed(seed: int, stage: int, t: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stage, int(t)])


def sgd_step(params: ModelParams, velocity: list, X: np.ndarray, targets: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> float:
    """One SGD-with-momentum update in place; returns the batch loss."""
    loss, grads = full_gradient(params, X, targets)
    for w, v, g in zip(params.layers(), velocity, grads):
        g = g + weight_decay * w
        v *= momentum
        v += g
        w -= lr * v
    return loss


def train_with_checkpoints(dataset: LabeledDataset, config: TrainConfig):
    """Train on ``dataset``; returns ``(final_params, record)``.

    Identical inputs give bitwise-identical outputs.
    """
    n = len(dataset)
    T = config.iterations(n)
    ckpts = set(config.checkpoint_set(n))
    params = init_params(dataset.dim, dataset.num_classes, config.hidden,
                         np.random.default_rng(_stage_seed(config.seed, 0)), config.init_scale)
    velocity = [np.zeros_like(w) for w in params.layers()]
    order_rng = np.random.default_rng(_stage_seed(config.seed, 1))
    Y = one_hot(dataset.y, dataset.num_classes)
    batches_per_epoch = math.ceil(n / config.batch_size)

    record = []
    epoch_losses = []
    t = 0
    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        perm = order_rng.permutation(n)
        for b in range(batches_per_epoch):
            t += 1
            if t in ckpts:
                record.append(_checkpoint(params, dataset, config, t, lr))
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            loss = sgd_step(params, velocity, dataset.X[idx], Y[idx], lr,
                            config.momentum, config.weight_decay)
            if not math.isfinite(loss) or not params.is_finite():
                raise DivergenceError(
                    f"non-finite loss at iteration {t}/{T} (epoch {epoch}, lr={lr:g}); "
                    "lower the learning rate")
        epoch_losses.append(float(params.loss(dataset.X, dataset.y).mean()))
    return params, TrainingRecord(record, params.copy(), config, epoch_losses)


def _checkpoint(params: ModelParams, dataset: LabeledDataset, config: TrainConfig,
                t: int, lr: float) -> Checkpoint:
    grads = final_layer_gradients(params, dataset.X, dataset.y, config.gradient_layers)
    p = grads.shape[1]
    if config.projection_dim is None:
        G = np.eye(p)
    else:
        G = sample_projection(config.projection_dim, p, _stage_seed(config.seed, 2, t))
    return Checkpoint(t, lr, params.copy(), G, project(G, grads))


# -- persistence ----------------------------------------------------------

def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    return arr.reshape(shape)


def save_record(record: TrainingRecord, directory) -> None:
    """Write the record as a manifest plus little-endian float32 blobs."""
    with atomic_directory(directory) as tmp:
        first = record.checkpoints[0]
        manifest = {
            "format": RECORD_FORMAT,
            "version": RECORD_VERSION,
            "model": {"family": "logistic" if first.params.hidden is None else "mlp-tanh",
                      "shapes": first.params.shapes()},
            "flatten_order": record.flatten_order,
            "checkpoints": record.iterations,
            "rates": [float(c.lr) for c in record.checkpoints],
            "projection_dim": int(first.projection.shape[0]),
            "gradient_dim": int(first.projection.shape[1]),
            "gradient_layers": record.config.gradient_layers,
            "num_samples": record.num_samples,
            "seed": record.config.seed,
            "config": record.config.to_dict(),
            "epoch_losses": record.epoch_losses,
        }
        for c in record.checkpoints:
            _write_f32(tmp / f"params_{c.iteration}.bin", c.params.flatten())
            _write_f32(tmp / f"proj_{c.iteration}.bin", c.projection)
            _write_f32(tmp / f"grads_{c.iteration}.bin", c.grads)
        _write_f32(tmp / "final_params.bin", record.final_params.flatten())
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_record(directory) -> TrainingRecord:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != RECORD_FORMAT or manifest.get("version") != RECORD_VERSION:
        raise ValueError(f"{directory} is not a version-{RECORD_VERSION} training record")
    if manifest["flatten_order"] != FLATTEN_ORDER:
        raise ValueError(f"unsupported gradient flattening order {manifest['flatten_order']!r}")
    shapes = manifest["model"]["shapes"]
    n_params = sum(r * c for r, c in shapes)
    r, p, n = manifest["projection_dim"], manifest["gradient_dim"], manifest["num_samples"]
    ckpts = []
    for t, lr in zip(manifest["checkpoints"], manifest["rates"]):
        params = ModelParams.unflatten(_read_f32(directory / f"params_{t}.bin", n_params), shapes)
        ckpts.append(Checkpoint(t, lr, params,
                                _read_f32(directory / f"proj_{t}.bin", (r, p)),
                                _read_f32(directory / f"grads_{t}.bin", (n, r))))
    final = ModelParams.unflatten(_read_f32(directory / "final_params.bin", n_params), shapes)
    return TrainingRecord(ckpts, final, TrainConfig.from_dict(manifest["config"]),
                          manifest["epoch_losses"], manifest["flatten_order"])
