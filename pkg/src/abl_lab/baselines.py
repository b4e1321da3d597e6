"""Comparison arms: alternative isolation shapers and alternative unlearning methods.

Isolation methods train for the turning-epoch budget and then pick the
suspected backdoor set. Unlearning methods take a trained network plus the
split ``(remaining, isolated)`` and return a new network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Union

import numpy as np

from . import nn
from .abl import (
    GRANULARITIES,
    AblConfig,
    IsolationResult,
    LossTrace,
    Schedule,
    fit,
    isolate,
    isolation_count,
    network_dims,
    trap_weights,
    train_gga,
    train_lga,
)
from .data import Dataset
from .errors import ConfigError
from .nn import Network
from .prng import Rng


# ---------------------------------------------------------------- isolation

@dataclass(frozen=True)
class LGA:
    gamma: float = 0.5


@dataclass(frozen=True)
class Flooding:
    level: float = 0.5


@dataclass(frozen=True)
class LabelSmoothingConfidence:
    smoothing: float = 0.2


IsolationMethod = Union[LGA, Flooding, LabelSmoothingConfidence]
ISOLATION_METHODS = {"lga": LGA, "flooding": Flooding, "label_smoothing": LabelSmoothingConfidence}


def flooding_loss_value(per_example_losses, level: float, granularity: str = "example") -> float:
    """``|loss - b| + b``, averaged per example or applied to the batch mean."""
    if level < 0:
        raise ConfigError("flooding level must be non-negative")
    losses = np.asarray(per_example_losses, dtype=np.float64)
    if losses.size == 0:
        return 0.0
    if granularity == "example":
        return float(np.mean(np.abs(losses - level) + level))
    if granularity == "batch":
        return float(abs(losses.mean() - level) + level)
    raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")


def flooding_weights(losses: np.ndarray, level: float, granularity: str = "example") -> np.ndarray:
    """Gradient weights of the flooding objective: the derivative of
    ``|l - b|`` is ``sign(l - b)`` with the boundary counted as +1."""
    return trap_weights(losses, level, granularity)


def flooding_gradient(net: Network, x, labels, level: float, granularity: str = "example") -> nn.Gradients:
    """Parameter gradient of :func:`flooding_loss_value` on one batch."""
    losses = nn.cross_entropy_per_example(nn.forward(net, x), labels).per_example
    return nn.backward_weighted(net, x, labels, flooding_weights(losses, level, granularity))


def train_flooding(net: Network, train: Dataset, level: float, epochs: int, lr: float, *,
                   batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 1e-4,
                   seed: int = 0, granularity: str = "batch") -> tuple[Network, LossTrace]:
    if level < 0:
        raise ConfigError("flooding level must be non-negative")
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    schedule = Schedule.constant(epochs, lr, batch_size=batch_size, momentum=momentum,
                                 weight_decay=weight_decay, seed=seed)
    return fit(net, train.flat, train.labels, schedule,
               lambda losses: flooding_weights(losses, level, granularity), trace_ids=train.ids)


def smoothed_targets(labels: np.ndarray, class_count: int, epsilon: float) -> np.ndarray:
    """``(1 - eps) * onehot + eps / C``."""
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError("smoothing must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((len(labels), class_count), epsilon / class_count)
    q[np.arange(len(labels)), labels] += 1.0 - epsilon
    return q


def train_label_smoothing(net: Network, train: Dataset, epsilon: float, epochs: int, lr: float, *,
                          batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 1e-4,
                          seed: int = 0) -> tuple[Network, LossTrace]:
    schedule = Schedule.constant(epochs, lr, batch_size=batch_size, momentum=momentum,
                                 weight_decay=weight_decay, seed=seed)
    targets = smoothed_targets(train.labels, train.class_count, epsilon)
    return fit(net, train.flat, train.labels, schedule, targets=targets, trace_ids=train.ids)


def label_confidence(net: Network, data: Dataset) -> np.ndarray:
    probs = nn.softmax(nn.forward(net, data.flat))
    return probs[np.arange(len(data)), data.labels]


def isolate_by_confidence(net: Network, train: Dataset, p: float) -> IsolationResult:
    """Isolate the ``ceil(p * n)`` examples whose assigned label gets the
    highest softmax probability; ties go to the lower id."""
    k = isolation_count(p, len(train))
    conf = label_confidence(net, train)
    ids = train.ids
    order = np.lexsort((ids, -conf))
    ranked = ids[order]
    return IsolationResult(
        tuple(int(i) for i in ranked[:k]),
        tuple(sorted(int(i) for i in ranked[k:])),
        conf[order],
        ranked,
    )


def run_isolation(method: IsolationMethod, train: Dataset, config: AblConfig,
                  net: Network | None = None) -> tuple[Network, IsolationResult, LossTrace]:
    """Train for ``config.turning_epoch`` epochs with the chosen shaper, then isolate.

    Uses the same initialisation and batch-order seeds as the ABL pipeline so
    that methods are compared on identical trajectories up to the loss.
    """
    config.validate()
    if net is None:
        net = nn.init_network(network_dims(train, config.hidden), config.seed)
    kw = dict(batch_size=config.batch_size, momentum=config.momentum,
              weight_decay=config.weight_decay, seed=config.seed + 1)
    epochs, lr = config.turning_epoch, config.isolation_lr
    if isinstance(method, LGA):
        net, trace = train_lga(net, train, method.gamma, epochs, lr, granularity=config.lga_granularity, **kw)
        return net, isolate(trace, config.isolation_rate), trace
    if isinstance(method, Flooding):
        net, trace = train_flooding(net, train, method.level, epochs, lr, granularity=config.lga_granularity, **kw)
        return net, isolate(trace, config.isolation_rate), trace
    if isinstance(method, LabelSmoothingConfidence):
        net, trace = train_label_smoothing(net, train, method.smoothing, epochs, lr, **kw)
        return net, isolate_by_confidence(net, train, config.isolation_rate), trace
    raise ConfigError(f"unknown isolation method {method!r}")


# ---------------------------------------------------------------- unlearning

@dataclass(frozen=True)
class PixelNoise:
    sigma: float = 0.1


@dataclass(frozen=True)
class GradNoise:
    sigma: float = 0.1
    fraction: float = 0.25


@dataclass(frozen=True)
class LabelShuffling:
    pass


@dataclass(frozen=True)
class LabelUniform:
    pass


@dataclass(frozen=True)
class LabelSmoothingRelabel:
    epsilon: float = 0.2


@dataclass(frozen=True)
class SelfLearning:
    pass


@dataclass(frozen=True)
class FinetuneAll:
    pass


@dataclass(frozen=True)
class FinetuneLast:
    pass


@dataclass(frozen=True)
class RetrainScratch:
    pass


@dataclass(frozen=True)
class AblGGA:
    pass


UnlearnMethod = Union[PixelNoise, GradNoise, LabelShuffling, LabelUniform, LabelSmoothingRelabel,
                      SelfLearning, FinetuneAll, FinetuneLast, RetrainScratch, AblGGA]

UNLEARN_METHODS = {
    "pixel_noise": PixelNoise,
    "grad_noise": GradNoise,
    "label_shuffling": LabelShuffling,
    "label_uniform": LabelUniform,
    "label_smoothing": LabelSmoothingRelabel,
    "self_learning": SelfLearning,
    "finetune_all": FinetuneAll,
    "finetune_last": FinetuneLast,
    "retrain_scratch": RetrainScratch,
    "abl_gga": AblGGA,
}

DISCARDS_ISOLATED = (FinetuneAll, FinetuneLast, RetrainScratch)


def method_name(method) -> str:
    for table in (UNLEARN_METHODS, ISOLATION_METHODS):
        for name, cls in table.items():
            if type(method) is cls:
                return name
    raise ConfigError(f"unknown method {method!r}")


def make_method(name: str, table: dict, **params):
    """Build a method from its config name; unknown names or parameters raise."""
    try:
        cls = table[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(table)}") from None
    allowed = {f.name for f in fields(cls)}
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"method {name!r} takes no parameter(s) {sorted(extra)}")
    return cls(**params)


@dataclass(frozen=True)
class UnlearnOptions:
    """Budgets shared by all unlearning arms.

    ``epochs``/``lr`` drive finetuning (and global ascent); ``scratch_*``
    drive the from-scratch models of RetrainScratch and SelfLearning.
    """

    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    scratch_epochs: int = 20
    scratch_lr: float = 0.01
    ascent_ceiling: bool = True
    seed: int = 0

    def schedule(self, seed_offset: int = 0) -> Schedule:
        return Schedule.constant(self.epochs, self.lr, batch_size=self.batch_size, momentum=self.momentum,
                                 weight_decay=self.weight_decay, seed=self.seed + seed_offset)

    def scratch_schedule(self, seed_offset: int = 0) -> Schedule:
        return Schedule.constant(self.scratch_epochs, self.scratch_lr, batch_size=self.batch_size,
                                 momentum=self.momentum, weight_decay=self.weight_decay,
                                 seed=self.seed + seed_offset)


def _noisy(images: np.ndarray, sigma: float, mask: np.ndarray | None, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    noise = rng.normals(images.size).reshape(images.shape) * sigma
    if mask is not None:
        noise = noise * mask
    return np.clip(images + noise, 0.0, 1.0)


def top_gradient_mask(net: Network, x: np.ndarray, labels: np.ndarray, fraction: float) -> np.ndarray:
    """Per row, 1 on the ``ceil(fraction * d)`` pixels with the largest
    input-gradient magnitude (ties: lower pixel index), 0 elsewhere."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("gradient fraction must lie in [0, 1]")
    g = np.abs(nn.input_gradient(net, x, labels))
    k = math.ceil(round(fraction * x.shape[1], 9))
    mask = np.zeros_like(g)
    if k:
        top = np.argsort(-g, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, top, 1.0, axis=1)
    return mask


def _retrain_on_union(net: Network, clean: Dataset, xb: np.ndarray, yb: np.ndarray,
                      opts: UnlearnOptions, targets_b: np.ndarray | None = None) -> Network:
    x = np.concatenate([clean.flat, xb])
    y = np.concatenate([clean.labels, yb])
    targets = None
    if targets_b is not None:
        targets = np.concatenate([smoothed_targets(clean.labels, clean.class_count, 0.0), targets_b])
    out, _ = fit(net, x, y, opts.schedule(1), targets=targets)
    return out


def unlearn(method: UnlearnMethod, net: Network, clean: Dataset, isolated: Dataset,
            opts: UnlearnOptions = UnlearnOptions()) -> Network:
    """Apply one unlearning arm and return the resulting network.

    Finetune-all, finetune-last and retrain-from-scratch never touch
    ``isolated``; every other arm rewrites the isolated examples (pixels or
    labels) and finetunes on their union with ``clean``.
    """
    if isinstance(method, FinetuneAll):
        out, _ = fit(net, clean.flat, clean.labels, opts.schedule(1))
        return out
    if isinstance(method, FinetuneLast):
        if len(net.layers) < 2:
            raise ConfigError("finetuning the last layer needs at least one hidden layer")
        out, _ = fit(net, clean.flat, clean.labels, opts.schedule(1), trainable={len(net.layers) - 1})
        return out
    if isinstance(method, RetrainScratch):
        fresh = nn.init_network(net.dims, opts.seed + 7)
        out, _ = fit(fresh, clean.flat, clean.labels, opts.scratch_schedule(2))
        return out
    if isinstance(method, AblGGA):
        return train_gga(net, clean, isolated, opts.epochs, opts.lr,
                         ceiling="auto" if opts.ascent_ceiling else None, batch_size=opts.batch_size,
                         momentum=opts.momentum, weight_decay=opts.weight_decay, seed=opts.seed + 3)

    xb, yb = isolated.flat, isolated.labels
    rng = Rng(opts.seed + 11)
    if isinstance(method, PixelNoise):
        return _retrain_on_union(net, clean, _noisy(xb, method.sigma, None, rng), yb, opts)
    if isinstance(method, GradNoise):
        mask = top_gradient_mask(net, xb, yb, method.fraction)
        return _retrain_on_union(net, clean, _noisy(xb, method.sigma, mask, rng), yb, opts)
    if isinstance(method, LabelShuffling):
        return _retrain_on_union(net, clean, xb, shuffle_labels(yb, rng), opts)
    if isinstance(method, LabelUniform):
        return _retrain_on_union(net, clean, xb, uniform_labels(len(yb), isolated.class_count, rng), opts)
    if isinstance(method, LabelSmoothingRelabel):
        return _retrain_on_union(net, clean, xb, yb, opts,
                                 targets_b=smoothed_targets(yb, isolated.class_count, method.epsilon))
    if isinstance(method, SelfLearning):
        scratch = nn.init_network(net.dims, opts.seed + 7)
        scratch, _ = fit(scratch, clean.flat, clean.labels, opts.scratch_schedule(2))
        return _retrain_on_union(net, clean, xb, nn.predict(scratch, xb), opts)
    raise ConfigError(f"unknown unlearning method {method!r}")


def shuffle_labels(labels: np.ndarray, rng: Rng) -> np.ndarray:
    """``labels[perm]`` with ``perm`` a Fisher-Yates permutation from ``rng``."""
    labels = np.asarray(labels)
    return labels[rng.permutation(len(labels))]


def uniform_labels(n: int, class_count: int, rng: Rng) -> np.ndarray:
    return np.array([rng.below(class_count) for _ in range(n)], dtype=np.int64)
