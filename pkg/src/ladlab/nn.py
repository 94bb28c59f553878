"""Multi-layer perceptrons, classification losses, and SGD on top of the
tensor engine. Hidden layers are relu, the output layer is identity; the
losses are written against the raw logits so softmax saturation cannot
produce non-finite values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericalError, UsageError

Array = np.ndarray


@dataclass
class DenseLayer:
    weight: T.Tensor
    bias: T.Tensor


@dataclass
class MlpParams:
    """Stack of dense layers; relu between them, identity on the last."""

    layers: list[DenseLayer]

    def tensors(self) -> list[T.Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def sizes(self) -> list[int]:
        dims = [self.layers[0].weight.shape[0]]
        dims.extend(layer.weight.shape[1] for layer in self.layers)
        return dims

    def validate(self) -> None:
        for i, layer in enumerate(self.layers):
            if layer.weight.data.ndim != 2 or layer.bias.data.ndim != 1:
                raise UsageError(f"mlp: layer {i} has malformed parameter shapes")
            if layer.weight.shape[1] != layer.bias.shape[0]:
                raise UsageError(f"mlp: layer {i} weight/bias width mismatch")
            if i > 0 and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise UsageError(f"mlp: layer {i - 1} output does not chain into layer {i}")
            for arr in (layer.weight.data, layer.bias.data):
                if not np.all(np.isfinite(arr)):
                    raise NumericalError(f"mlp: layer {i} contains non-finite parameters")


@dataclass
class OptimConfig:
    kind: str = "sgd_momentum"  # "sgd" | "sgd_momentum"
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def validate(self, path: str = "optim") -> None:
        if self.kind not in ("sgd", "sgd_momentum"):
            raise UsageError(f"{path}.kind: unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise UsageError(f"{path}.learning_rate: must be positive")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"{path}.momentum: must be in [0, 1)")
        if self.batch_size < 1:
            raise UsageError(f"{path}.batch_size: must be a positive integer")
        if self.epochs < 0:
            raise UsageError(f"{path}.epochs: must be non-negative")


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(sizes) < 2:
        raise UsageError("init_mlp: need at least input and output sizes")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(
            DenseLayer(
                weight=T.Tensor(w, requires_grad=True),
                bias=T.Tensor(np.zeros(fan_out), requires_grad=True),
            )
        )
    return MlpParams(layers=layers)


def mlp_forward(params: MlpParams, x: T.Tensor) -> T.Tensor:
    if x.data.ndim != 2:
        raise UsageError(f"mlp_forward: expected a batch matrix, got shape {x.shape}")
    if x.shape[1] != params.layers[0].weight.shape[0]:
        raise UsageError(
            f"mlp_forward: input width {x.shape[1]} does not match "
            f"first layer input {params.layers[0].weight.shape[0]}"
        )
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = T.add(T.matmul(h, layer.weight), layer.bias)
        if i != last:
            h = T.relu(h)
    return h


def _log_sum_exp_rows(logits: T.Tensor) -> T.Tensor:
    """Row logsumexp with the row max folded in as a detached constant;
    the identity is exact for any constant, so gradients are unaffected."""
    m = T.Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = T.exp(T.sub(logits, m))
    return T.add(T.reshape(m, (logits.shape[0],)), T.log(T.sum(shifted, axis=1)))


def cross_entropy(logits: T.Tensor, labels: Array) -> T.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise UsageError(f"cross_entropy: logits must be batch x classes, got {logits.shape}")
    batch, classes = logits.shape
    if batch == 0:
        raise UsageError("cross_entropy: empty batch")
    if labels.shape != (batch,):
        raise UsageError(f"cross_entropy: labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise UsageError(f"cross_entropy: labels must lie in [0, {classes})")
    onehot = np.zeros((batch, classes))
    onehot[np.arange(batch), labels] = 1.0
    lse = _log_sum_exp_rows(logits)
    picked = T.sum(T.mul(logits, T.Tensor(onehot)), axis=1)
    return T.mean(T.sub(lse, picked))


def predictive_entropy(logits: T.Tensor) -> T.Tensor:
    """Per-row entropy of softmax(logits), in nats; differentiable.

    Uses H = logsumexp(z) - sum(softmax(z) * z), which stays finite even for
    saturated logits.
    """
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise UsageError(f"predictive_entropy: need batch x C with C >= 2, got {logits.shape}")
    p = T.softmax(logits)
    lse = _log_sum_exp_rows(logits)
    return T.sub(lse, T.sum(T.mul(p, logits), axis=1))


def predict(params: MlpParams, x: Array) -> Array:
    """Argmax class per row; ties resolve to the lowest class index."""
    logits = mlp_forward(params, T.Tensor(x))
    return np.argmax(logits.data, axis=1)


def accuracy(params: MlpParams, x: Array, labels: Array) -> float:
    return float(np.mean(predict(params, x) == np.asarray(labels)))


class SgdOptimizer:
    """Plain or momentum SGD. Velocity buffers persist across steps and are
    keyed by parameter identity; grads are cleared after each step."""

    def __init__(self, config: OptimConfig):
        config.validate()
        self.config = config
        self._velocity: dict[int, Array] = {}

    def step(self, params: Sequence[T.Tensor]) -> None:
        lr = self.config.learning_rate
        mu = self.config.momentum if self.config.kind == "sgd_momentum" else 0.0
        for p in params:
            if p.grad is None:
                raise UsageError("optimizer step: parameter has no gradient")
            g = p.grad
            if mu > 0.0:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else mu * v + g
                self._velocity[id(p)] = v
                update = v
            else:
                update = g
            p.data = p.data - lr * update
            p.grad = None


def optimizer_step(params: MlpParams, optimizer: SgdOptimizer) -> MlpParams:
    optimizer.step(params.tensors())
    return params


@dataclass
class TrainRecord:
    iteration: int
    epoch: int
    loss: float
    batch_accuracy: float


BatchTransform = Callable[[Array, np.random.Generator], Array]


def train_classifier(
    x: Array,
    labels: Array,
    num_classes: int,
    hidden_sizes: Sequence[int],
    config: OptimConfig,
    batch_transform: Optional[BatchTransform] = None,
    init_rng: Optional[np.random.Generator] = None,
) -> tuple[MlpParams, list[TrainRecord]]:
    """SGD training over shuffled minibatches.

    `x` is (N, D) flat features, `labels` (N,) ints. Shuffling and the
    optional batch transform draw from a generator seeded by config.seed, so
    identical configs give identical runs. Returns the trained params and a
    per-iteration loss/accuracy series.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"train_classifier: features must be a nonempty (N, D) matrix, got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise UsageError("train_classifier: labels do not match feature count")
    if num_classes < 2 or labels.min() < 0 or labels.max() >= num_classes:
        raise UsageError(f"train_classifier: labels must lie in [0, {num_classes})")
    config.validate()

    rng = np.random.default_rng(config.seed)
    if init_rng is None:
        init_rng = rng
    params = init_mlp([x.shape[1], *hidden_sizes, num_classes], init_rng)
    optimizer = SgdOptimizer(config)
    records: list[TrainRecord] = []

    iteration = 0
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x[idx]
            if batch_transform is not None:
                xb = batch_transform(xb, rng)
            yb = labels[idx]
            xt = T.Tensor(xb)
            try:
                with T.Graph() as g:
                    logits = mlp_forward(params, xt)
                    loss = cross_entropy(logits, yb)
                T.backward(g, loss)
            except NumericalError as err:
                raise NumericalError(f"training diverged at iteration {iteration}: {err}") from err
            batch_acc = float(np.mean(np.argmax(logits.data, axis=1) == yb))
            records.append(TrainRecord(iteration, epoch, loss.item(), batch_acc))
            optimizer.step(params.tensors())
            iteration += 1
    return params, records
