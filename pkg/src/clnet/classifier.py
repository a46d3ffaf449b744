"""Two-layer tanh classifier trained with minibatch SGD on log-likelihood."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from .errors import FormatError
from .tensor import read_exact

MLP_MAGIC = b"CLM1"


@dataclass(eq=False)
class Mlp:
    w1: np.ndarray  # (hidden, in)
    b1: np.ndarray
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0) -> "Mlp":
        """Uniform weights in +-fan_in**-0.5, zero biases."""
        rng = np.random.default_rng(seed)
        a1, a2 = in_dim ** -0.5, hidden_dim ** -0.5
        return cls(rng.uniform(-a1, a1, (hidden_dim, in_dim)), np.zeros(hidden_dim),
                   rng.uniform(-a2, a2, (out_dim, hidden_dim)), np.zeros(out_dim))

    @classmethod
    def zeros(cls, in_dim: int, hidden_dim: int, out_dim: int) -> "Mlp":
        return cls(np.zeros((hidden_dim, in_dim)), np.zeros(hidden_dim),
                   np.zeros((out_dim, hidden_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "Mlp":
        return Mlp(*(p.copy() for p in self.params()))

    def same_as(self, other: "Mlp") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    early_stop_accuracy: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_in(m: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.in_dim:
        raise ValueError(f"feature length {x.shape[-1]} does not match classifier input {m.in_dim}")
    return x


def mlp_forward(m: Mlp, x: np.ndarray) -> np.ndarray:
    """Log-probabilities for one feature vector or a (n, in_dim) matrix."""
    x = _check_in(m, x)
    h = np.tanh(x @ m.w1.T + m.b1)
    return log_softmax(h @ m.w2.T + m.b2)


def predict_classes(m: Mlp, x: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(mlp_forward(m, np.atleast_2d(x)), axis=1)


def loss_and_grads(m: Mlp, x: np.ndarray, y: np.ndarray):
    """Mean negative log-likelihood, parameter gradients and input gradient."""
    x = _check_in(m, np.atleast_2d(x))
    y = np.asarray(y)
    n = x.shape[0]
    h = np.tanh(x @ m.w1.T + m.b1)
    logp = log_softmax(h @ m.w2.T + m.b2)
    loss = -logp[np.arange(n), y].mean()
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gw2 = dz.T @ h
    gb2 = dz.sum(axis=0)
    dh = (dz @ m.w2) * (1.0 - h * h)
    gw1 = dh.T @ x
    gb1 = dh.sum(axis=0)
    dx = dh @ m.w1
    return float(loss), [gw1, gb1, gw2, gb2], dx


def evaluate_accuracy(m: Mlp, features: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_classes(m, features) == labels))


class Sgd:
    """Momentum SGD over a list of arrays updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= self.lr * g
            p += v


def check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ValueError(f"label {bad} outside 0..{classes - 1}")
    return labels


def mlp_train_sgd(m: Mlp, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                  on_epoch: Callable[[int, Mlp, float], None] | None = None) -> tuple[Mlp, TrainHistory]:
    """Train a copy of ``m``; returns it with per-epoch mean loss and train accuracy.

    Stops early once train accuracy reaches ``cfg.early_stop_accuracy``.
    """
    x = _check_in(m, np.atleast_2d(features))
    y = check_labels(labels, m.out_dim)
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("need a non-empty feature matrix with one label per row")
    m = m.copy()
    opt = Sgd(m.params(), cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, _ = loss_and_grads(m, x[idx], y[idx])
            opt.step(grads)
            losses.append(loss * len(idx))
        hist.loss.append(sum(losses) / n)
        acc = evaluate_accuracy(m, x, y)
        hist.train_accuracy.append(acc)
        if on_epoch is not None:
            on_epoch(epoch, m, hist.loss[-1])
        if cfg.early_stop_accuracy is not None and acc >= cfg.early_stop_accuracy:
            break
    return m, hist


def write_mlp(fh: BinaryIO, m: Mlp) -> None:
    fh.write(MLP_MAGIC)
    fh.write(struct.pack("<III", m.in_dim, m.hidden_dim, m.out_dim))
    for p in m.params():
        fh.write(p.astype("<f8").tobytes())


def read_mlp(fh: BinaryIO) -> Mlp:
    magic = read_exact(fh, 4, "classifier magic")
    if magic != MLP_MAGIC:
        raise FormatError(f"bad classifier magic {magic!r}, expected {MLP_MAGIC!r}")
    i, h, o = struct.unpack("<III", read_exact(fh, 12, "classifier dims"))
    shapes = [(h, i), (h,), (o, h), (o,)]
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(read_exact(fh, 8 * count, "classifier weights"), dtype="<f8")
                      .astype(np.float64).reshape(shape))
    return Mlp(*arrays)
