"""One-hidden-layer MLP written directly in numpy.

Architecture: input -> dense(h) -> ReLU -> inverted dropout -> dense(c) -> softmax.
All training math runs in float64. Parameters live in one flat vector so the
federation layer can average them without reshaping; the named layer tensors
are views into that vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_DIMS = (76, 50, 11)


def _check_dims(dims) -> tuple[int, int, int]:
    if len(dims) != 3:
        raise ValueError(f"dims must be (d_in, hidden, classes), got {dims!r}")
    d_in, h, c = (int(x) for x in dims)
    if min(d_in, h, c) <= 0:
        raise ValueError(f"all dims must be >= 1, got {dims!r}")
    return d_in, h, c


def param_count(dims) -> int:
    d_in, h, c = _check_dims(dims)
    return d_in * h + h + h * c + c


class ParamSet:
    """MLP weights and biases backed by one contiguous float64 vector.

    Canonical flat order is ``w1`` (row-major, d_in x h), ``b1``, ``w2``
    (row-major, h x c), ``b2``.
    """

    __slots__ = ("dims", "flat")

    def __init__(self, flat: np.ndarray, dims):
        self.dims = _check_dims(dims)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != param_count(self.dims):
            raise ValueError(
                f"flat vector of length {flat.size} does not match dims {self.dims} "
                f"(expected {param_count(self.dims)})"
            )
        self.flat = flat

    @classmethod
    def zeros(cls, dims) -> "ParamSet":
        return cls(np.zeros(param_count(dims)), dims)

    @classmethod
    def unflatten(cls, vector, dims) -> "ParamSet":
        return cls(np.array(vector, dtype=np.float64, copy=True), dims)

    @classmethod
    def from_layers(cls, w1, b1, w2, b2) -> "ParamSet":
        w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
        dims = (w1.shape[0], w1.shape[1], w2.shape[1])
        flat = np.concatenate([w1.ravel(), np.ravel(b1), w2.ravel(), np.ravel(b2)])
        return cls(flat, dims)

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def copy(self) -> "ParamSet":
        return ParamSet(self.flat.copy(), self.dims)

    def _slices(self):
        d_in, h, c = self.dims
        a = d_in * h
        b = a + h
        e = b + h * c
        return a, b, e

    @property
    def w1(self) -> np.ndarray:
        d_in, h, _ = self.dims
        a, _, _ = self._slices()
        return self.flat[:a].reshape(d_in, h)

    @property
    def b1(self) -> np.ndarray:
        a, b, _ = self._slices()
        return self.flat[a:b]

    @property
    def w2(self) -> np.ndarray:
        _, h, c = self.dims
        _, b, e = self._slices()
        return self.flat[b:e].reshape(h, c)

    @property
    def b2(self) -> np.ndarray:
        _, _, e = self._slices()
        return self.flat[e:]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ParamSet(dims={self.dims})"


def init_params(dims=DEFAULT_DIMS, seed: int = 0) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    d_in, h, c = _check_dims(dims)
    rng = np.random.default_rng(seed)
    params = ParamSet.zeros((d_in, h, c))
    lim1 = math.sqrt(6.0 / (d_in + h))
    lim2 = math.sqrt(6.0 / (h + c))
    params.w1[...] = rng.uniform(-lim1, lim1, size=(d_in, h))
    params.w2[...] = rng.uniform(-lim2, lim2, size=(h, c))
    return params


def _check_input(params: ParamSet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise ValueError(f"X has shape {X.shape}, expected (n, {params.dims[0]})")
    return X


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(params, X, train, dropout_rate, rng):
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    pre = X @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    mask = None
    if train and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        keep = 1.0 - dropout_rate
        mask = (rng.random(hidden.shape) < keep) / keep
        hidden = hidden * mask
    logits = hidden @ params.w2 + params.b2
    return pre, hidden, mask, logits


def forward(params: ParamSet, X, train: bool = False, dropout_rate: float = 0.0, rng=None) -> np.ndarray:
    """Class probabilities for each row of ``X``.

    In train mode with ``dropout_rate > 0`` hidden units are zeroed with
    probability ``dropout_rate`` and survivors scaled by ``1/(1-rate)``.
    Eval mode applies neither.
    """
    X = _check_input(params, X)
    _, _, _, logits = _forward(params, X, train, dropout_rate, rng)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    params: ParamSet, X, y, train: bool = False, dropout_rate: float = 0.0, rng=None
) -> tuple[float, ParamSet]:
    """Mean cross-entropy and its gradient with respect to every parameter."""
    X = _check_input(params, X)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} rows")
    c = params.dims[2]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")

    pre, hidden, mask, logits = _forward(params, X, train, dropout_rate, rng)
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, y]))

    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    grads = ParamSet.zeros(params.dims)
    grads.w2[...] = hidden.T @ dz
    grads.b2[...] = dz.sum(axis=0)
    dh = dz @ params.w2.T
    if mask is not None:
        dh *= mask
    dh *= pre > 0.0
    grads.w1[...] = X.T @ dh
    grads.b1[...] = dh.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[AdamState, ParamSet]:
    g = grads.flat
    if not (state.m.size == state.v.size == params.flat.size == g.size):
        raise ValueError("Adam state, params and grads must have equal flat length")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_flat = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), ParamSet(new_flat, params.dims)


@dataclass(frozen=True)
class Schedule:
    max_epochs: int = 20
    batch_size: int = 32
    patience: int = 10
    dropout_rate: float = 0.2


@dataclass
class TrainReport:
    epochs_run: int
    eval_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0
    # optimizer state after the last epoch run; clients carry it into the next round
    optimizer: AdamState | None = None


def evaluate(params: ParamSet, dataset) -> tuple[float, float, np.ndarray]:
    """Eval-mode loss, accuracy and argmax predictions (ties -> lowest class)."""
    X, y = dataset.X, dataset.y
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    X = _check_input(params, X)
    _, _, _, logits = _forward(params, X, False, 0.0, None)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(len(y)), y]))
    preds = np.argmax(logp, axis=1)
    return loss, float(np.mean(preds == y)), preds


def train_local(
    params: ParamSet,
    train_set,
    eval_set,
    schedule: Schedule = Schedule(),
    seed: int = 0,
    optimizer: AdamState | None = None,
) -> tuple[ParamSet, TrainReport]:
    """Mini-batch Adam training with early stopping on eval loss.

    Returns the parameters of the epoch with the lowest eval loss (the
    starting parameters are not a candidate), plus a report whose
    ``optimizer`` holds the Adam state after the final epoch.
    """
    if len(train_set.y) == 0 or len(eval_set.y) == 0:
        raise ValueError("train_set and eval_set must be nonempty")
    if schedule.batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if schedule.patience < 1:
        raise ValueError("patience must be >= 1")
    if schedule.max_epochs < 0:
        raise ValueError("max_epochs must be >= 0")

    state = optimizer.copy() if optimizer is not None else AdamState.fresh(params.flat.size)
    current = params.copy()
    report = TrainReport(epochs_run=0, optimizer=state)
    if schedule.max_epochs == 0:
        return current, report

    rng = np.random.default_rng(seed)
    X, y = np.asarray(train_set.X, dtype=np.float64), np.asarray(train_set.y)
    n = len(y)
    best_loss = math.inf
    best = current
    wait = 0
    for epoch in range(1, schedule.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            _, grads = loss_and_grads(current, X[idx], y[idx], True, schedule.dropout_rate, rng)
            state, current = adam_step(state, current, grads)
        loss, acc, _ = evaluate(current, eval_set)
        report.eval_loss.append(loss)
        report.eval_accuracy.append(acc)
        report.epochs_run = epoch
        if loss < best_loss:
            best_loss, best, wait = loss, current, 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= schedule.patience:
                report.stopped_early = True
                break
    report.optimizer = state
    return best.copy(), report
