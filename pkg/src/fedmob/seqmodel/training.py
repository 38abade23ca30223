"""Batches, the Adam optimiser, local training and evaluation."""
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..errors import ConfigError, EvaluationError, NumericError, TrainingError
from .encoding import N_CHANNELS


@dataclass
class SampleBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.ndim != 3 or self.inputs.shape[-1] != N_CHANNELS:
            raise ConfigError(f"inputs must have shape (batch, L, {N_CHANNELS})")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ConfigError("batch_size mismatch between inputs and targets")

    @property
    def batch_size(self):
        return int(self.targets.shape[0])


def as_arrays(data):
    """Accept a SampleBatch, a list of them, or an ``(X, y)`` pair."""
    if isinstance(data, SampleBatch):
        return data.inputs, data.targets
    if isinstance(data, tuple) and len(data) == 2:
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.int64)
    batches = list(data)
    if not batches:
        return np.zeros((0, 1, N_CHANNELS)), np.zeros(0, dtype=np.int64)
    return (np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]))


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # minibatch size = max(batch_floor, ceil(n / batch_divisor)), capped at n
    batch_floor: int = 64
    batch_divisor: int = 8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.batch_floor < 1 or self.batch_divisor < 1:
            raise ConfigError("batch_floor and batch_divisor must be >= 1")

    def batch_size(self, n):
        return max(1, min(n, max(self.batch_floor, math.ceil(n / self.batch_divisor))))


class Adam:
    def __init__(self, n_params, cfg):
        self.cfg = cfg
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, values, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return values - c.lr * mhat / (np.sqrt(vhat) + c.eps)


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    steps: int = 0


def train_local(net, weights, data, epochs, opt=OptimizerConfig(), seed=0):
    """Adam on mean cross-entropy for ``epochs`` passes over ``data``.

    Each epoch reshuffles with a generator seeded from ``seed``. Returns the
    new bundle (version + 1) and a :class:`TrainHistory` with the mean loss
    per epoch and the final accuracy on ``data``.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    net.check(weights)
    X, y = as_arrays(data)
    history = TrainHistory()
    if y.size == 0:
        return weights.copy(), history
    rng = np.random.default_rng(seed)
    adam = Adam(weights.n_params, opt)
    values = weights.values.copy()
    bs = opt.batch_size(y.size)
    for epoch in range(epochs):
        order = rng.permutation(y.size)
        total = 0.0
        for start in range(0, y.size, bs):
            idx = order[start:start + bs]
            current = weights.with_values(values)
            try:
                loss, grad = net.loss_and_grad(current, X[idx], y[idx], training=True, rng=rng)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch=epoch) from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch=epoch)
            values = adam.step(values, grad.values)
            total += loss * idx.size
            history.steps += 1
        history.losses.append(total / y.size)
    out = weights.with_values(values, version=weights.version + 1)
    history.final_accuracy = evaluate(net, out, (X, y))
    return out, history


def predict(net, weights, X, chunk=2048):
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], chunk):
        out[s:s + chunk] = net.forward(weights, X[s:s + chunk]).argmax(1) + 1
    return out


def evaluate(net, weights, data):
    """Fraction of samples whose arg-max community equals the target."""
    X, y = as_arrays(data)
    if y.size == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, weights, X) == y))
