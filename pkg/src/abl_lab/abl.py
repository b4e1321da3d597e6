"""Anti-backdoor learning: local ascent isolation, then global ascent unlearning.

Phase layout of :func:`run_abl` with ``T = turning + mid + unlearn`` epochs:

1. ``train_lga`` for ``turning_epoch`` epochs (losses trapped around gamma);
2. isolate the ``ceil(p * n)`` lowest-loss examples;
3. plain training on the full set for ``mid_stage_epochs``;
4. ``train_gga``: descend on the remaining set, ascend on the isolated one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError, InputError, TrainingDiverged
from .nn import Network, OptimizerState
from .prng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Explicit per-epoch learning-rate table plus the SGD constants."""

    lrs: tuple[float, ...]
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    @property
    def epochs(self) -> int:
        return len(self.lrs)

    @classmethod
    def constant(cls, epochs: int, lr: float, **kw) -> "Schedule":
        return cls(tuple([float(lr)] * int(epochs)), **kw)

    @classmethod
    def step_decay(cls, epochs: int, base_lr: float, milestones=(0.2, 0.7), factor: float = 0.1, **kw) -> "Schedule":
        """Divide the rate by ``1/factor`` at each fractional milestone of the budget."""
        marks = [int(round(m * epochs)) for m in milestones]
        lrs = [base_lr * factor ** sum(e >= m for m in marks) for e in range(int(epochs))]
        return cls(tuple(lrs), **kw)

    def slice(self, start: int, stop: int, seed: int | None = None) -> "Schedule":
        return Schedule(self.lrs[start:stop], self.batch_size, self.momentum, self.weight_decay,
                        self.seed if seed is None else seed)


@dataclass
class LossTrace:
    """Per-epoch, per-example losses from frozen full passes.

    ``losses[r, j]`` is the loss of example ``ids[j]`` after epoch ``epochs[r]``.
    """

    ids: np.ndarray
    epochs: list[int] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, len(self.ids)))
        return np.vstack(self.rows)

    def record(self, epoch: int, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != self.ids.shape:
            raise InputError("trace row must cover every example exactly once")
        self.epochs.append(int(epoch))
        self.rows.append(losses)

    def last(self) -> np.ndarray:
        if not self.rows:
            raise InputError("empty loss trace")
        return self.rows[-1]

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "LossTrace") -> "LossTrace":
        if not np.array_equal(self.ids, other.ids):
            raise InputError("cannot join traces over different ids")
        return LossTrace(self.ids, self.epochs + other.epochs, self.rows + other.rows)


def sign_weights(losses: np.ndarray, threshold: float) -> np.ndarray:
    """``sign(loss - threshold)`` with the boundary counted as +1."""
    return np.where(np.asarray(losses) >= threshold, 1.0, -1.0)


GRANULARITIES = ("batch", "example")


def trap_weights(losses: np.ndarray, threshold: float, granularity: str = "batch") -> np.ndarray:
    """Signed weights that hold losses around ``threshold``.

    ``"example"`` signs each loss on its own. ``"batch"`` signs the batch mean
    and applies that one sign to every row, so only the average is trapped
    and the spread inside the batch is left free.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if granularity == "example":
        return sign_weights(losses, threshold)
    if granularity == "batch":
        if losses.size == 0:
            return np.ones(0)
        return np.full(losses.shape, 1.0 if losses.mean() >= threshold else -1.0)
    raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")


def lga_loss_value(per_example_losses, gamma: float, granularity: str = "example") -> float:
    losses = np.asarray(per_example_losses, dtype=np.float64)
    if losses.size == 0:
        return 0.0
    return float(np.mean(trap_weights(losses, gamma, granularity) * losses))


def evaluate_losses(net: Network, x: np.ndarray, labels: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = [nn.cross_entropy_per_example(nn.forward(net, x[i : i + chunk]), labels[i : i + chunk]).per_example
           for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


WeightFn = Callable[[np.ndarray], np.ndarray]


def fit(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    schedule: Schedule,
    weight_fn: WeightFn | None = None,
    *,
    targets: np.ndarray | None = None,
    trace_ids: np.ndarray | None = None,
    trainable: set[int] | None = None,
    epoch_offset: int = 0,
) -> tuple[Network, LossTrace]:
    """Mini-batch momentum SGD on ``sum_i w_i * loss_i / n`` per batch.

    Batch order is a fresh Fisher-Yates permutation per epoch from
    ``Rng(schedule.seed)``. After each epoch every example's loss is
    re-evaluated with the frozen network and appended to the trace.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x)
    if weight_fn is None:
        weight_fn = np.ones_like
    trace = LossTrace(np.arange(n) if trace_ids is None else np.asarray(trace_ids))
    if schedule.epochs == 0 or n == 0:
        return net, trace
    rng = Rng(schedule.seed)
    state = OptimizerState(schedule.lrs[0], schedule.momentum, schedule.weight_decay)
    for e, lr in enumerate(schedule.lrs):
        epoch = epoch_offset + e + 1
        state = state.with_lr(lr)
        perm = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = perm[start : start + schedule.batch_size]
            batch_targets = None if targets is None else targets[idx]
            loss, grads, _ = nn.weighted_loss_and_grads(net, x[idx], labels[idx], weight_fn, batch_targets)
            if not np.isfinite(loss.per_example).all():
                raise TrainingDiverged("non-finite loss", epoch)
            if trainable is not None:
                grads = [g if k in trainable else None for k, g in enumerate(grads)]
            try:
                net, state = nn.sgd_step(net, grads, state)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), epoch) from None
        row = evaluate_losses(net, x, labels) if targets is None else _soft_losses(net, x, targets)
        if not np.isfinite(row).all():
            raise TrainingDiverged("non-finite loss", epoch)
        trace.record(epoch, row)
    return net, trace


def _soft_losses(net: Network, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return nn.cross_entropy_per_example(nn.forward(net, x), None, targets=targets).per_example


def train_standard(net: Network, train: Dataset, schedule: Schedule, epoch_offset: int = 0) -> tuple[Network, LossTrace]:
    """Plain empirical-risk minimisation over the whole (possibly poisoned) set."""
    return fit(net, train.flat, train.labels, schedule, trace_ids=train.ids, epoch_offset=epoch_offset)


def train_lga(
    net: Network,
    train: Dataset,
    gamma: float,
    epochs: int,
    lr: float,
    *,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    seed: int = 0,
    granularity: str = "batch",
) -> tuple[Network, LossTrace]:
    """Local gradient ascent: losses that dip below gamma are ascended.

    See :func:`trap_weights` for the two granularities.
    """
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    schedule = Schedule.constant(epochs, lr, batch_size=batch_size, momentum=momentum,
                                 weight_decay=weight_decay, seed=seed)
    return fit(net, train.flat, train.labels, schedule, lambda losses: trap_weights(losses, gamma, granularity),
               trace_ids=train.ids)


@dataclass(frozen=True)
class IsolationResult:
    isolated_ids: tuple[int, ...]
    remaining_ids: tuple[int, ...]
    losses: np.ndarray = field(repr=False, compare=False)  # ranking key per id, in ``ranked_ids`` order
    ranked_ids: np.ndarray = field(repr=False, compare=False)


def isolation_count(p: float, n: int) -> int:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"isolation rate must lie in (0, 1), got {p}")
    k = int(math.ceil(round(p * n, 9)))
    if k < 1:
        raise ConfigError(f"isolation rate {p} isolates nothing out of {n} examples")
    return k


def _partition(ids: np.ndarray, keys: np.ndarray, p: float) -> IsolationResult:
    ids = np.asarray(ids, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.float64)
    k = isolation_count(p, len(ids))
    order = np.lexsort((ids, keys))  # primary: key ascending, then id ascending
    ranked = ids[order]
    return IsolationResult(
        tuple(int(i) for i in ranked[:k]),
        tuple(sorted(int(i) for i in ranked[k:])),
        keys[order],
        ranked,
    )


def isolate(trace_or_losses, p: float, ids=None) -> IsolationResult:
    """Isolate the ``ceil(p * n)`` lowest-loss examples (ties: lower id first).

    Accepts a :class:`LossTrace` (its final row is used), a ``{id: loss}``
    mapping, or a loss vector with matching ``ids``.
    """
    if isinstance(trace_or_losses, LossTrace):
        return _partition(trace_or_losses.ids, trace_or_losses.last(), p)
    if isinstance(trace_or_losses, dict):
        keys = list(trace_or_losses)
        return _partition(np.array(keys), np.array([trace_or_losses[k] for k in keys]), p)
    losses = np.asarray(trace_or_losses, dtype=np.float64)
    return _partition(np.arange(len(losses)) if ids is None else ids, losses, p)


def _gga_batches(n_clean: int, n_iso: int, batch_size: int, rng: Rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Clean examples in shuffled batches, each joined by a chunk of
    ``min(n_iso, batch_size)`` isolated examples dealt cyclically from a
    shuffled order (so a small isolated set rides along in full every step)."""
    clean = rng.permutation(n_clean)
    iso = rng.permutation(n_iso)
    n_batches = max(1, math.ceil(n_clean / batch_size))
    m = min(n_iso, batch_size)
    out = []
    for b in range(n_batches):
        c = clean[b * batch_size : (b + 1) * batch_size]
        i = iso[[(b * m + j) % n_iso for j in range(m)]]
        out.append((c, i))
    return out


def gga_weight_fn(n_clean: int, n_iso: int, ceiling: float | None) -> WeightFn:
    """Weights turning ``sum w_i l_i / n`` into ``mean(clean) - mean(isolated)``.

    Rows are ordered clean first. An isolated example whose loss is above
    ``ceiling`` gets weight 0 for that step.
    """
    n = n_clean + n_iso

    def weights(losses: np.ndarray) -> np.ndarray:
        w = np.empty(n)
        w[:n_clean] = n / n_clean if n_clean else 0.0
        iso = -n / n_iso * np.ones(n_iso)
        if ceiling is not None:
            iso[losses[n_clean:] > ceiling] = 0.0
        w[n_clean:] = iso
        return w

    return weights


def train_gga(
    net: Network,
    clean: Dataset,
    isolated: Dataset,
    epochs: int,
    lr: float,
    *,
    ceiling: float | None | str = "auto",
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    seed: int = 0,
    history: list | None = None,
) -> Network:
    """Global gradient ascent: minimise ``E_clean[l] - E_isolated[l]``.

    ``ceiling="auto"`` freezes ascent on an isolated example while its loss
    exceeds ``2 ln C``; ``None`` disables freezing. When ``history`` is a
    list, ``(epoch, mean clean loss, mean isolated loss)`` is appended after
    every epoch.
    """
    if len(isolated) == 0:
        raise InputError("global ascent needs a non-empty isolated set")
    if ceiling == "auto":
        ceiling = 2.0 * math.log(isolated.class_count)
    xc, yc = clean.flat, clean.labels
    xb, yb = isolated.flat, isolated.labels
    rng = Rng(seed)
    state = OptimizerState(lr, momentum, weight_decay)
    for epoch in range(1, int(epochs) + 1):
        for ci, bi in _gga_batches(len(xc), len(xb), batch_size, rng):
            x = np.concatenate([xc[ci], xb[bi]])
            y = np.concatenate([yc[ci], yb[bi]])
            loss, grads, _ = nn.weighted_loss_and_grads(net, x, y, gga_weight_fn(len(ci), len(bi), ceiling))
            if not np.isfinite(loss.per_example).all():
                raise TrainingDiverged("non-finite loss", epoch)
            try:
                net, state = nn.sgd_step(net, grads, state)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), epoch) from None
        if history is not None:
            history.append((epoch, float(evaluate_losses(net, xc, yc).mean()) if len(xc) else 0.0,
                            float(evaluate_losses(net, xb, yb).mean())))
    return net


@dataclass(frozen=True)
class AblConfig:
    gamma: float = 0.5
    lga_granularity: str = "batch"
    turning_epoch: int = 10
    isolation_rate: float = 0.01
    mid_stage_epochs: int = 30
    unlearn_epochs: int = 10
    isolation_lr: float = 0.01
    mid_lr: float = 3e-4
    mid_decay_epoch: int | None = None  # mid-stage epoch (0-based) where the rate drops tenfold
    unlearn_lr: float = 1e-3
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: tuple[int, ...] = (256,)
    ascent_ceiling: bool = True
    include_isolated_in_mid: bool = True
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.turning_epoch + self.mid_stage_epochs + self.unlearn_epochs

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.lga_granularity not in GRANULARITIES:
            raise ConfigError(f"lga_granularity must be one of {GRANULARITIES}")
        if self.turning_epoch <= 0:
            raise ConfigError("turning_epoch must be positive")
        if self.turning_epoch >= self.total_epochs:
            raise ConfigError("turning_epoch must come before the end of training")
        if self.mid_stage_epochs < 0 or self.unlearn_epochs < 0:
            raise ConfigError("stage lengths must be non-negative")
        if not 0.0 < self.isolation_rate < 1.0:
            raise ConfigError("isolation_rate must lie in (0, 1)")
        for name in ("isolation_lr", "mid_lr", "unlearn_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive")

    def mid_schedule(self, seed: int) -> Schedule:
        decay = self.mid_stage_epochs if self.mid_decay_epoch is None else self.mid_decay_epoch
        lrs = tuple(self.mid_lr * (0.1 if e >= decay else 1.0) for e in range(self.mid_stage_epochs))
        return Schedule(lrs, self.batch_size, self.momentum, self.weight_decay, seed)

    def standard_schedule(self, seed: int) -> Schedule:
        """Same-budget plain training: isolation rate, then the mid-stage table,
        then the unlearning budget at the mid-stage's final rate."""
        mid = self.mid_schedule(seed).lrs
        tail = mid[-1] if mid else self.isolation_lr
        lrs = (self.isolation_lr,) * self.turning_epoch + mid + (tail,) * self.unlearn_epochs
        return Schedule(lrs, self.batch_size, self.momentum, self.weight_decay, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AblStages:
    """Intermediate products of :func:`run_abl`, kept for reports and exports."""

    isolation: IsolationResult
    lga_trace: LossTrace
    mid_trace: LossTrace
    gga_history: list
    before_unlearning: Network


def network_dims(train: Dataset, hidden) -> list[int]:
    return [int(np.prod(train.image_shape)), *[int(h) for h in hidden], train.class_count]


def abl_stages(train: Dataset, config: AblConfig, net: Network | None = None) -> tuple[Network, AblStages]:
    """Run the three training phases; no evaluation."""
    config.validate()
    isolation_count(config.isolation_rate, len(train))
    seed = config.seed
    if net is None:
        net = nn.init_network(network_dims(train, config.hidden), seed)
    net, lga_trace = train_lga(net, train, config.gamma, config.turning_epoch, config.isolation_lr,
                               batch_size=config.batch_size, momentum=config.momentum,
                               weight_decay=config.weight_decay, seed=seed + 1,
                               granularity=config.lga_granularity)
    iso = isolate(lga_trace, config.isolation_rate)
    log.info("isolated %d of %d examples at epoch %d", len(iso.isolated_ids), len(train), config.turning_epoch)

    isolated = train.select_ids(iso.isolated_ids)
    remaining = train.select_ids(iso.remaining_ids)
    mid_data = train if config.include_isolated_in_mid else remaining
    net, mid_trace = train_standard(net, mid_data, config.mid_schedule(seed + 2), epoch_offset=config.turning_epoch)
    before = net
    history: list = []
    net = train_gga(net, remaining, isolated, config.unlearn_epochs, config.unlearn_lr,
                    ceiling="auto" if config.ascent_ceiling else None, batch_size=config.batch_size,
                    momentum=config.momentum, weight_decay=config.weight_decay, seed=seed + 3,
                    history=history)
    return net, AblStages(iso, lga_trace, mid_trace, history, before)


def run_abl(train: Dataset, test: Dataset, poison_spec, config: AblConfig):
    """Full pipeline plus evaluation; returns ``(network, Report)``.

    ``train`` is the (possibly poisoned) training set; ``poison_spec`` is used
    only to build the triggered test set for the attack success rate.
    """
    from . import metrics

    net, stages = abl_stages(train, config)
    report = metrics.build_report(
        net, train, test, poison_spec,
        isolation=stages.isolation,
        trace=stages.lga_trace.extend(stages.mid_trace) if config.include_isolated_in_mid else stages.lga_trace,
        config=config.to_dict(),
        seed=config.seed,
    )
    report.stages = stages
    return net, report
