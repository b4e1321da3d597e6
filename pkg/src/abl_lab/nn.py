"""Dense ReLU network with exact, per-example-weighted backpropagation.

Every optimiser in the lab (plain descent, local ascent, global ascent,
flooding) is expressed as a weight vector over the per-example losses of a
mini-batch: the batch objective is ``sum_i w_i * loss_i / n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, TrainingDiverged
from .prng import Rng


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ConfigError(
                    f"layer {k} outputs {self.layers[k].out_dim} but layer {k + 1} "
                    f"expects {self.layers[k + 1].in_dim}"
                )
        if self.class_count < 2:
            raise ConfigError("class count must be at least 2")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Network":
        it = iter(params)
        return Network(tuple(DenseLayer(next(it), next(it)) for _ in self.layers))

    def copy(self) -> "Network":
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass(frozen=True)
class BatchLoss:
    per_example: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.per_example.mean()) if self.per_example.size else 0.0


# one (dW, db) pair per layer; None marks a frozen layer
Gradients = list


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")

    def with_lr(self, lr: float) -> "OptimizerState":
        return OptimizerState(lr, self.momentum, self.weight_decay, self.velocity)


def init_network(dims: Sequence[int], seed: int) -> Network:
    """He-scaled Gaussian weights, zero biases.

    Weights are drawn layer by layer in row-major ``(out, in)`` order from
    ``Rng(seed).normal()`` and multiplied by ``sqrt(2 / fan_in)``.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError("dims needs an input size and at least one layer size")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"all dims must be positive, got {dims}")
    rng = Rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normals(fan_in * fan_out).reshape(fan_out, fan_in) * np.sqrt(2.0 / fan_in)
        layers.append(DenseLayer(w, np.zeros(fan_out)))
    return Network(tuple(layers))


def _as_matrix(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim != 2 else x
    if x.shape[1] != net.input_dim:
        raise ConfigError(f"input length {x.shape[1]} does not match network input {net.input_dim}")
    return x


def _forward_cached(net: Network, x: np.ndarray):
    acts = [x]
    h = x
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        z = h @ layer.weights.T + layer.bias
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(net: Network, batch) -> np.ndarray:
    """Logits, shape ``(batch, C)``."""
    return _forward_cached(net, _as_matrix(net, batch))[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"labels must lie in [0, {classes})")
    return labels


def cross_entropy_per_example(logits, labels, targets=None) -> BatchLoss:
    """Cross-entropy per row. ``targets`` (rows of class distributions)
    replaces the one-hot labels when given."""
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits)
    if targets is not None:
        losses = -(np.asarray(targets, dtype=np.float64) * logp).sum(axis=1)
    else:
        labels = _check_labels(labels, logits.shape[0], logits.shape[1])
        losses = -logp[np.arange(logits.shape[0]), labels]
    # -log p can come out as -0.0 or a rounding hair below zero
    return BatchLoss(np.maximum(losses, 0.0))


def weighted_loss_and_grads(
    net: Network,
    batch,
    labels,
    weight_fn: Callable[[np.ndarray], np.ndarray],
    targets=None,
) -> tuple[BatchLoss, Gradients, np.ndarray]:
    """One forward/backward pass where the example weights may depend on
    the losses of that same pass. Returns ``(loss, grads, weights)``."""
    x = _as_matrix(net, batch)
    n = x.shape[0]
    acts = _forward_cached(net, x)
    logits = acts[-1]
    if targets is None:
        labels = _check_labels(labels, n, net.class_count)
        q = np.zeros_like(logits)
        q[np.arange(n), labels] = 1.0
    else:
        q = np.asarray(targets, dtype=np.float64)
    loss = cross_entropy_per_example(logits, labels, targets=q)
    w = np.asarray(weight_fn(loss.per_example), dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"expected {n} weights, got shape {w.shape}")

    delta = (softmax(logits) - q) * (w / n)[:, None]
    grads: Gradients = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        a_prev = acts[k]
        grads[k] = (delta.T @ a_prev, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ net.layers[k].weights) * (acts[k] > 0)
    return loss, grads, w


def input_gradient(net: Network, batch, labels) -> np.ndarray:
    """d loss_i / d x_i for every row (the per-example loss, not the mean)."""
    x = _as_matrix(net, batch)
    n = x.shape[0]
    acts = _forward_cached(net, x)
    labels = _check_labels(labels, n, net.class_count)
    delta = softmax(acts[-1])
    delta[np.arange(n), labels] -= 1.0
    for k in range(len(net.layers) - 1, -1, -1):
        delta = delta @ net.layers[k].weights
        if k > 0:
            delta = delta * (acts[k] > 0)
    return delta


def backward_weighted(net: Network, batch, labels, weights, targets=None) -> Gradients:
    """Gradient of ``sum_i w_i * loss_i / n`` with respect to every parameter."""
    weights = np.asarray(weights, dtype=np.float64)
    _, grads, _ = weighted_loss_and_grads(net, batch, labels, lambda _: weights, targets)
    return grads


def sgd_step(net: Network, grads: Gradients, state: OptimizerState) -> tuple[Network, OptimizerState]:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. Layers whose gradient entry is ``None``
    are left untouched (velocity included).
    """
    if len(grads) != len(net.layers):
        raise ConfigError("gradient list does not match network depth")
    velocity = state.velocity or [None] * len(net.layers)
    new_layers, new_velocity = [], []
    for k, (layer, g) in enumerate(zip(net.layers, grads)):
        if g is None:
            new_layers.append(layer)
            new_velocity.append(velocity[k])
            continue
        gw, gb = g
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ConfigError(f"gradient shape mismatch at layer {k}")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise TrainingDiverged("non-finite gradient")
        vw, vb = velocity[k] if velocity[k] is not None else (np.zeros_like(gw), np.zeros_like(gb))
        vw = state.momentum * vw + gw + state.weight_decay * layer.weights
        vb = state.momentum * vb + gb + state.weight_decay * layer.bias
        new_layers.append(
            DenseLayer(layer.weights - state.learning_rate * vw, layer.bias - state.learning_rate * vb)
        )
        new_velocity.append((vw, vb))
    return Network(tuple(new_layers)), OptimizerState(
        state.learning_rate, state.momentum, state.weight_decay, new_velocity
    )


def predict(net: Network, batch, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    x = _as_matrix(net, batch)
    return np.concatenate(
        [forward(net, x[i : i + chunk]).argmax(axis=1) for i in range(0, max(len(x), 1), chunk)]
    )[: len(x)] if len(x) else np.zeros(0, dtype=np.int64)


def save_network(net: Network, path) -> None:
    arrays = {}
    for k, layer in enumerate(net.layers):
        arrays[f"w{k}"] = layer.weights
        arrays[f"b{k}"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path) -> Network:
    with np.load(path) as data:
        depth = len([k for k in data.files if k.startswith("w")])
        return Network(tuple(DenseLayer(data[f"w{k}"].copy(), data[f"b{k}"].copy()) for k in range(depth)))
