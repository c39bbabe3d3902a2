"""Linear models trained by minibatch SGD/ADAM with stochastic feature grouping.

The grouping regularizer follows the usual projected-gradient recipe: at each
step a grouping matrix ``Phi`` is drawn, the minibatch is reduced to
``X @ Phi.T``, the gradient is taken with respect to the reduced weights
``W @ Phi.T`` and mapped back with ``g @ Phi``. Feature dropout is the same
loop with ``Phi`` replaced by a random diagonal mask.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from featgroup.bank import BankPolicy, ProjectionBank, draw
from featgroup.numkit import (
    SparseGrouping,
    as_dense,
    backproject_rows,
    derive_rng,
    project_rows,
)

log = logging.getLogger(__name__)

__all__ = [
    "GlmFamily",
    "GAUSSIAN",
    "LOGISTIC",
    "get_family",
    "GlmModel",
    "TrainConfig",
    "Metrics",
    "DivergenceError",
    "forward",
    "loss_grad",
    "dropout_mask",
    "train",
    "evaluate",
    "predict",
    "save_model",
    "load_model",
]


class DivergenceError(FloatingPointError):
    """Raised when training produces non-finite parameters."""


@dataclass(frozen=True)
class GlmFamily:
    """Log-partition function ``A`` of a one-parameter exponential family and its derivatives.

    The per-sample loss is ``A(z) - y*z`` with ``z = x.beta``; the base
    measure ``h(y)`` is dropped because it does not depend on the parameters.
    """

    kind: str
    A: Callable[[np.ndarray], np.ndarray]
    A1: Callable[[np.ndarray], np.ndarray]
    A2: Callable[[np.ndarray], np.ndarray]

    def nll(self, z, y):
        return self.A(z) - y * z


def _softplus(z):
    return -log_expit(-np.asarray(z, dtype=np.float64))


def _sigmoid_var(z):
    s = expit(z)
    return s * (1.0 - s)


GAUSSIAN = GlmFamily(
    "gaussian",
    A=lambda z: 0.5 * np.square(z),
    A1=lambda z: np.asarray(z, dtype=np.float64),
    A2=lambda z: np.ones_like(np.asarray(z, dtype=np.float64)),
)
LOGISTIC = GlmFamily("logistic", A=_softplus, A1=expit, A2=_sigmoid_var)

_FAMILIES = {f.kind: f for f in (GAUSSIAN, LOGISTIC)}


def get_family(kind) -> GlmFamily:
    if isinstance(kind, GlmFamily):
        return kind
    try:
        return _FAMILIES[kind]
    except KeyError:
        raise ValueError(f"unknown family {kind!r}; expected one of {sorted(_FAMILIES)}") from None


@dataclass
class GlmModel:
    """Weights ``W`` (l x p), bias ``b`` (l,).

    Logistic models with ``l >= 2`` are softmax classifiers; ``l == 1`` is the
    binary sigmoid model. Gaussian models are single-output (``l == 1``).
    """

    W: np.ndarray
    b: np.ndarray
    family: GlmFamily = LOGISTIC

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.family = get_family(self.family)
        if self.W.shape[0] != self.b.shape[0]:
            raise ValueError("W and b disagree on the number of outputs")
        if self.family is GAUSSIAN and self.l != 1:
            raise ValueError("gaussian models have a single output")

    @classmethod
    def zeros(cls, l: int, p: int, family=LOGISTIC) -> "GlmModel":
        return cls(np.zeros((l, p)), np.zeros(l), family)

    @property
    def l(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    @property
    def n_classes(self) -> int:
        return 2 if self.l == 1 else self.l

    def copy(self) -> "GlmModel":
        return GlmModel(self.W.copy(), self.b.copy(), self.family)


def _check_inputs(model: GlmModel, X) -> np.ndarray:
    X = as_dense(X, 2, "X")
    if X.shape[1] != model.p:
        raise ValueError(f"dimension mismatch: X has {X.shape[1]} features, model has {model.p}")
    return X


def _check_targets(model: GlmModel, y, m: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValueError(f"expected {m} targets, got shape {y.shape}")
    if model.family is GAUSSIAN:
        return y.astype(np.float64)
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("class labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    return y


def _link(model: GlmModel, logits: np.ndarray) -> np.ndarray:
    if model.family is GAUSSIAN:
        return logits
    if model.l == 1:
        return expit(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: GlmModel, X) -> np.ndarray:
    """Class probabilities (m x l), or the mean response for the gaussian family."""
    X = _check_inputs(model, X)
    return _link(model, X @ model.W.T + model.b)


def _loss_dlogits(model: GlmModel, logits: np.ndarray, y: np.ndarray):
    """Mean loss over rows and its gradient with respect to the logits."""
    m = logits.shape[0]
    if model.l == 1:
        z = logits[:, 0]
        fam = model.family
        loss = float(np.mean(fam.nll(z, y)))
        d = (fam.A1(z) - y) / m
        return loss, d[:, None]
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(m), y]))
    d = np.exp(logits - lse[:, None])
    d[np.arange(m), y] -= 1.0
    return loss, d / m


def loss_grad(model: GlmModel, X, y):
    """Mean negative log-likelihood over the batch and its gradients.

    Returns
    -------
    loss : float
    g_W : array (l, p)
    g_b : array (l,)
    """
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    loss, d = _loss_dlogits(model, X @ model.W.T + model.b, y)
    return loss, d.T @ X, d.sum(axis=0)


def predict(model: GlmModel, X) -> np.ndarray:
    """Argmax class (ties go to the lowest index)."""
    X = _check_inputs(model, X)
    logits = X @ model.W.T + model.b
    if model.l == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return np.argmax(logits, axis=1)


def evaluate(model: GlmModel, X, y) -> float:
    """Fraction of correctly classified rows."""
    X = _check_inputs(model, X)
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = _check_targets(model, y, X.shape[0])
    return float(np.mean(predict(model, X) == y))


def dropout_mask(p: int, delta: float, rng: np.random.Generator) -> SparseGrouping:
    """Diagonal mask keeping each feature with probability ``1 - delta``.

    Kept entries are ``1/sqrt(1 - delta)`` so that ``E[Phi^T Phi] = I``.
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {delta}")
    keep = rng.random(p) >= delta
    vals = np.where(keep, 1.0 / np.sqrt(1.0 - delta), 0.0)
    return SparseGrouping(p, p, np.arange(p), vals, mask=True)


_REGULARIZERS = ("none", "l2", "dropout", "grouping", "grouping+l2")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    optimizer: str = "adam"
    regularizer: str = "none"
    lam: float = 0.0
    delta: float = 0.0
    bank: ProjectionBank | None = None
    policy: BankPolicy = BankPolicy.PER_MINIBATCH
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.policy = BankPolicy(self.policy)
        if self.regularizer not in _REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; expected one of {_REGULARIZERS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        if self.lam < 0:
            raise ValueError("l2 penalty must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.regularizer.startswith("grouping") and self.bank is None:
            raise ValueError("grouping needs a projection bank")

    @property
    def uses_l2(self) -> bool:
        return self.regularizer in ("l2", "grouping+l2")


@dataclass
class Metrics:
    """Per-epoch learning curve. ``seconds`` is cumulative training time."""

    train_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def rows(self):
        for i, row in enumerate(zip(self.train_loss, self.test_acc, self.seconds), start=1):
            yield (i, *row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_acc", "seconds"])
            for epoch, loss, acc, sec in self.rows():
                w.writerow([epoch, repr(loss), repr(acc), repr(sec)])


class _Adam:
    def __init__(self, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update ``params`` in place; the gradient arrays are used as scratch."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            g *= g
            g *= 1.0 - self.beta2
            v += g
            denom = np.sqrt(v / c2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / c1
            params[name] -= denom


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            g *= self.lr
            params[name] -= g


def _grouped_step(model, Xb, yb, phi):
    """Loss and full-space gradients when the model sees ``Phi^T Phi x``."""
    if phi is None:
        loss, d = _loss_dlogits(model, Xb @ model.W.T + model.b, yb)
        return loss, d.T @ Xb, d.sum(axis=0)
    Z = project_rows(phi, Xb)
    W_hat = project_rows(phi, model.W)
    loss, d = _loss_dlogits(model, Z @ W_hat.T + model.b, yb)
    return loss, backproject_rows(phi, d.T @ Z), d.sum(axis=0)


def train(model: GlmModel, X, y, cfg: TrainConfig, X_test=None, y_test=None, callback=None):
    """Fit ``model`` in place and return ``(model, metrics)``.

    Minibatches come from a fresh permutation each epoch. Shuffling and
    regularizer sampling use separate random streams derived from
    ``cfg.seed``, so switching regularizers never changes the batch order.
    Test accuracy is computed with the plain weights ``W``.
    """
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    n, p = X.shape
    has_test = X_test is not None
    if has_test:
        X_test = _check_inputs(model, X_test)
        y_test = _check_targets(model, y_test, X_test.shape[0])
    bank = cfg.bank if cfg.regularizer.startswith("grouping") else None
    if bank is not None and bank.p != p:
        raise ValueError(f"bank matrices have p={bank.p}, data has p={p}")

    shuffle_rng = derive_rng(cfg.seed, 0)
    reg_rng = derive_rng(cfg.seed, 1)
    opt = (
        _Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if cfg.optimizer == "adam"
        else _Sgd(cfg.lr)
    )
    params = {"W": model.W, "b": model.b}
    metrics = Metrics()
    elapsed = 0.0
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        phi = None
        if bank is not None and cfg.policy is BankPolicy.PER_EPOCH:
            phi = draw(bank, reg_rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if bank is not None and cfg.policy is BankPolicy.PER_MINIBATCH:
                phi = draw(bank, reg_rng)
            elif cfg.regularizer == "dropout":
                phi = dropout_mask(p, cfg.delta, reg_rng)
            loss, gW, gb = _grouped_step(model, X[idx], y[idx], phi)
            if cfg.uses_l2:
                gW = gW + cfg.lam * model.W
            opt.step(params, {"W": gW, "b": gb})
            step += 1
            # a sum is non-finite iff some entry is (or the weights are astronomically large)
            if not (math.isfinite(model.W.sum()) and math.isfinite(model.b.sum())):
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch + 1}, step {step} "
                    f"(lr={cfg.lr}, optimizer={cfg.optimizer}, regularizer={cfg.regularizer})"
                )
            total += loss * len(idx)
        elapsed += time.perf_counter() - t0
        metrics.train_loss.append(total / n)
        metrics.test_acc.append(evaluate(model, X_test, y_test) if has_test else float("nan"))
        metrics.seconds.append(elapsed)
        if callback is not None:
            callback(epoch, model, metrics)
    return model, metrics


_MODEL_MAGIC = b"FGW1"


def save_model(model: GlmModel, path) -> None:
    """Binary layout: ``FGW1``, u32 l, u64 p, l*p f64 weights (row-major), l f64 biases."""
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IQ", model.l, model.p))
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.b, dtype="<f8").tobytes())


def load_model(path, family=LOGISTIC) -> GlmModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {raw[:4]!r})")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    l, p = struct.unpack_from("<IQ", raw, 4)
    expected = 16 + 8 * (l * p + l)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for l={l}, p={p}, found {len(raw)}")
    W = np.frombuffer(raw, dtype="<f8", count=l * p, offset=16).reshape(l, p)
    b = np.frombuffer(raw, dtype="<f8", count=l, offset=16 + 8 * l * p)
    return GlmModel(W.astype(np.float64), b.astype(np.float64), family)
