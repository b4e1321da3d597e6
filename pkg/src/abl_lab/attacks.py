"""Pixel-space triggers and the dataset poisoning engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .data import Dataset, ground_truth_poisoned
from .errors import ConfigError, InputError
from .prng import Rng


@dataclass(frozen=True)
class GridPatch:
    """k x k checkerboard stamped with its top-left corner at (row, col).

    Patch cell (i, j) is 1.0 when ``i + j`` is even and 0.0 otherwise.
    """

    row: int
    col: int
    size: int = 3

    def pattern(self, channels: int) -> np.ndarray:
        i, j = np.indices((self.size, self.size))
        cells = ((i + j) % 2 == 0).astype(np.float64)
        return np.repeat(cells[..., None], channels, axis=2)


@dataclass(frozen=True)
class BlendPattern:
    pattern: np.ndarray = field(repr=False)
    alpha: float = 0.15
    pattern_seed: int | None = None  # provenance only, for serialisation


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float = 20.0 / 255.0
    frequency: int = 6


TriggerSpec = Union[GridPatch, BlendPattern, Sinusoid]


def bottom_right_grid(shape: tuple[int, int, int], size: int = 3, margin: int = 0) -> GridPatch:
    h, w, _ = shape
    return GridPatch(h - size - margin, w - size - margin, size)


def blend_from_seed(shape: tuple[int, int, int], alpha: float = 0.15, seed: int = 0) -> BlendPattern:
    """Uniform-noise blend pattern drawn from the documented generator."""
    rng = Rng(seed)
    n = int(np.prod(shape))
    pattern = np.array([rng.uniform() for _ in range(n)]).reshape(shape)
    return BlendPattern(pattern, alpha, seed)


def validate_trigger(trigger: TriggerSpec, shape: tuple[int, int, int]) -> None:
    h, w, _ = shape
    if isinstance(trigger, GridPatch):
        if trigger.size <= 0:
            raise ConfigError("grid size must be positive")
        if trigger.row < 0 or trigger.col < 0 or trigger.row + trigger.size > h or trigger.col + trigger.size > w:
            raise ConfigError(
                f"grid patch at ({trigger.row}, {trigger.col}) size {trigger.size} does not fit {h}x{w} image"
            )
    elif isinstance(trigger, BlendPattern):
        if not 0.0 <= trigger.alpha <= 1.0:
            raise ConfigError("blend alpha must lie in [0, 1]")
        if tuple(np.shape(trigger.pattern)) != tuple(shape):
            raise ConfigError(f"blend pattern shape {np.shape(trigger.pattern)} != image shape {shape}")
    elif isinstance(trigger, Sinusoid):
        if not 0.0 <= trigger.amplitude <= 1.0:
            raise ConfigError("sinusoid amplitude must lie in [0, 1]")
        if trigger.frequency <= 0 or int(trigger.frequency) != trigger.frequency:
            raise ConfigError("sinusoid frequency must be a positive integer")
    else:
        raise ConfigError(f"unknown trigger type {type(trigger).__name__}")


def _apply_many(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Vectorised trigger over an (n, H, W, C) stack; returns a new array."""
    validate_trigger(trigger, images.shape[1:])
    out = np.array(images, dtype=np.float64, copy=True)
    if isinstance(trigger, GridPatch):
        r, c, k = trigger.row, trigger.col, trigger.size
        out[:, r : r + k, c : c + k, :] = trigger.pattern(out.shape[3])
    elif isinstance(trigger, BlendPattern):
        out = (1.0 - trigger.alpha) * out + trigger.alpha * np.asarray(trigger.pattern)
    else:
        width = out.shape[2]
        wave = trigger.amplitude * np.sin(2.0 * np.pi * trigger.frequency * np.arange(width) / width)
        out = out + wave[None, None, :, None]
    return np.clip(out, 0.0, 1.0)


def apply_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Triggered copy of a single (H, W, C) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    return _apply_many(image[None], trigger)[0]


@dataclass(frozen=True)
class PoisonSpec:
    trigger: TriggerSpec
    target_label: int = 0
    poisoning_rate: float = 0.1
    label_mode: str = "dirty"  # "dirty" | "clean_label"
    seed: int = 0

    def validate(self, class_count: int) -> None:
        if not 0.0 <= self.poisoning_rate <= 1.0:
            raise ConfigError("poisoning_rate must lie in [0, 1]")
        if not 0 <= self.target_label < class_count:
            raise ConfigError(f"target_label {self.target_label} outside [0, {class_count})")
        if self.label_mode not in ("dirty", "clean_label"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")


@dataclass(frozen=True)
class PoisonReport:
    poisoned_ids: tuple[int, ...]
    achieved_rate: float

    def to_dict(self) -> dict:
        return {"poisoned_ids": list(self.poisoned_ids), "achieved_rate": self.achieved_rate,
                "poisoned_count": len(self.poisoned_ids)}


def poison_count(rate: float, n: int) -> int:
    # guard against 0.1 * 5000 == 500.00000000000006
    return int(math.ceil(round(rate * n, 9)))


def poison_dataset(train: Dataset, spec: PoisonSpec) -> tuple[Dataset, PoisonReport]:
    """Return ``D = D_c + D_b`` with exactly ``ceil(rate * n)`` triggered examples."""
    spec.validate(train.class_count)
    n = len(train)
    k = poison_count(spec.poisoning_rate, n)
    if k == 0:
        return train, PoisonReport((), 0.0)
    if spec.label_mode == "dirty":
        eligible = np.nonzero(train.labels != spec.target_label)[0]
    else:
        eligible = np.nonzero(train.labels == spec.target_label)[0]
    if len(eligible) < k:
        raise InputError(
            f"{spec.label_mode} poisoning needs {k} eligible examples, only {len(eligible)} available"
        )
    chosen = eligible[np.sort(Rng(spec.seed).sample_without_replacement(len(eligible), k))]

    images = np.array(train.images, copy=True)
    images[chosen] = _apply_many(train.images[chosen], spec.trigger)
    labels = np.array(train.labels, copy=True)
    if spec.label_mode == "dirty":
        labels[chosen] = spec.target_label
    flags = np.array(ground_truth_poisoned(train), copy=True)
    flags[chosen] = True
    poisoned = Dataset(images, labels, train.class_count, train.ids, train.original_labels, flags)
    ids = tuple(sorted(int(i) for i in train.ids[chosen]))
    return poisoned, PoisonReport(ids, len(ids) / n)


def build_backdoor_testset(test: Dataset, spec: PoisonSpec) -> Dataset:
    """Trigger every test example whose original class is not the target."""
    if len(test) == 0:
        raise InputError("test set is empty")
    keep = np.nonzero(test.original_labels != spec.target_label)[0]
    if len(keep) == 0:
        raise InputError("backdoor test set is empty: every test example belongs to the target class")
    images = _apply_many(test.images[keep], spec.trigger)
    labels = np.full(len(keep), spec.target_label, dtype=np.int64)
    return Dataset(images, labels, test.class_count, test.ids[keep], test.original_labels[keep],
                   np.ones(len(keep), dtype=bool))
