"""Attack success rate, clean accuracy, isolation precision and loss curves."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import nn
from .data import Dataset, ground_truth_poisoned
from .errors import InputError


def clean_accuracy(net: nn.Network, clean_test: Dataset) -> float:
    if len(clean_test) == 0:
        raise InputError("clean test set is empty")
    return float(np.mean(nn.predict(net, clean_test.flat) == clean_test.labels))


def attack_success_rate(net: nn.Network, backdoor_test: Dataset) -> float:
    """Fraction of triggered test inputs classified as the target label."""
    if len(backdoor_test) == 0:
        raise InputError("backdoor test set is empty")
    return float(np.mean(nn.predict(net, backdoor_test.flat) == backdoor_test.labels))


def isolation_precision(isolated_ids, ground_truth) -> float:
    """TP / (TP + FP) of an isolated id set.

    ``ground_truth`` is either a poisoned :class:`Dataset` or an iterable of
    truly poisoned ids.
    """
    isolated = getattr(isolated_ids, "isolated_ids", isolated_ids)
    isolated = [int(i) for i in isolated]
    if not isolated:
        raise InputError("isolated set is empty")
    truth = poisoned_ids(ground_truth) if isinstance(ground_truth, Dataset) else {int(i) for i in ground_truth}
    return sum(i in truth for i in isolated) / len(isolated)


def isolation_recall(isolated_ids, ground_truth) -> float:
    isolated = {int(i) for i in getattr(isolated_ids, "isolated_ids", isolated_ids)}
    truth = poisoned_ids(ground_truth) if isinstance(ground_truth, Dataset) else {int(i) for i in ground_truth}
    if not truth:
        raise InputError("no poisoned examples to recall")
    return len(isolated & truth) / len(truth)


def poisoned_ids(dataset: Dataset) -> set[int]:
    return {int(i) for i in dataset.ids[ground_truth_poisoned(dataset)]}


def _flags_for(trace_ids: np.ndarray, ground_truth) -> np.ndarray:
    if isinstance(ground_truth, Dataset):
        truth = poisoned_ids(ground_truth)
    else:
        truth = {int(i) for i in ground_truth}
    return np.array([int(i) in truth for i in trace_ids], dtype=bool)


def loss_curves(trace, ground_truth) -> tuple[list[float], list[float]]:
    """Per-epoch mean loss over clean and over backdoor examples.

    An epoch mean over an empty group is reported as NaN.
    """
    flags = _flags_for(trace.ids, ground_truth)
    clean, backdoor = [], []
    for row in trace.rows:
        clean.append(float(row[~flags].mean()) if (~flags).any() else float("nan"))
        backdoor.append(float(row[flags].mean()) if flags.any() else float("nan"))
    return clean, backdoor


def first_epoch_below(series, threshold: float, epochs=None) -> int | None:
    """Epoch label of the first entry strictly below ``threshold``."""
    epochs = list(range(1, len(series) + 1)) if epochs is None else list(epochs)
    for e, v in zip(epochs, series):
        if v < threshold:
            return int(e)
    return None


def curves_csv(trace, ground_truth) -> str:
    clean, backdoor = loss_curves(trace, ground_truth)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_clean_loss", "mean_backdoor_loss"])
    for e, c, b in zip(trace.epochs, clean, backdoor):
        w.writerow([e, repr(c), repr(b)])
    return buf.getvalue()


def trace_csv(trace, ground_truth) -> str:
    """Long-format export: epoch, example_id, loss, ground_truth_poisoned."""
    flags = _flags_for(trace.ids, ground_truth)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "example_id", "loss", "ground_truth_poisoned"])
    for e, row in zip(trace.epochs, trace.rows):
        for i, loss, flag in zip(trace.ids, row, flags):
            w.writerow([e, int(i), repr(float(loss)), int(flag)])
    return buf.getvalue()


@dataclass
class Report:
    asr: float | None
    clean_accuracy: float
    isolation_precision: float | None = None
    mean_clean_loss: list[float] = field(default_factory=list)
    mean_backdoor_loss: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    extra: dict[str, Any] = field(default_factory=dict)
    stages: Any = field(default=None, repr=False, compare=False)  # in-memory only

    def __post_init__(self):
        for name in ("asr", "clean_accuracy", "isolation_precision"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "asr": self.asr,
            "clean_accuracy": self.clean_accuracy,
            "isolation_precision": self.isolation_precision,
            "epochs": list(self.epochs),
            "mean_clean_loss": [_json_float(v) for v in self.mean_clean_loss],
            "mean_backdoor_loss": [_json_float(v) for v in self.mean_backdoor_loss],
            "config": self.config,
            "seed": self.seed,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _json_float(v: float):
    return None if v != v else v


def build_report(net, train: Dataset, test: Dataset, poison_spec=None, *, isolation=None, trace=None,
                 config=None, seed: int = 0, extra=None) -> Report:
    from .attacks import build_backdoor_testset

    asr = None
    if poison_spec is not None:
        asr = attack_success_rate(net, build_backdoor_testset(test, poison_spec))
    precision = None
    if isolation is not None and poisoned_ids(train):
        precision = isolation_precision(isolation, train)
    clean, backdoor, epochs = [], [], []
    if trace is not None and len(trace):
        clean, backdoor = loss_curves(trace, train)
        epochs = list(trace.epochs)
    return Report(asr, clean_accuracy(net, test), precision, clean, backdoor, epochs,
                  dict(config or {}), int(seed), dict(extra or {}))
