"""Datasets: in-memory representation, synthetic generator, IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .prng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Example:
    id: int
    image: np.ndarray  # (H, W, C)
    label: int
    original_label: int


class Dataset:
    """Immutable batch of labelled images stored as parallel arrays.

    Ground-truth poison provenance is kept in ``_poisoned`` and is read
    through :func:`ground_truth_poisoned`, which only the metrics and
    reporting code use. Training code never sees it.
    """

    def __init__(self, images, labels, class_count: int, ids=None, original_labels=None, poisoned=None):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ConfigError(f"images must be (n, H, W, C), got shape {images.shape}")
        n = images.shape[0]
        labels = np.asarray(labels, dtype=np.int64).reshape(n)
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(n)
        original = labels.copy() if original_labels is None else np.asarray(original_labels, dtype=np.int64).reshape(n)
        poisoned = np.zeros(n, dtype=bool) if poisoned is None else np.asarray(poisoned, dtype=bool).reshape(n)
        class_count = int(class_count)
        if class_count < 2:
            raise ConfigError("class_count must be at least 2")
        if n:
            if images.min() < 0.0 or images.max() > 1.0:
                raise InputError("pixels must lie in [0, 1]")
            for name, arr in (("label", labels), ("original_label", original)):
                if arr.min() < 0 or arr.max() >= class_count:
                    raise InputError(f"{name} outside [0, {class_count})")
            if ids.min() < 0:
                raise InputError("ids must be non-negative")
        if len(np.unique(ids)) != n:
            raise InputError("example ids must be unique")
        if np.any(~poisoned & (labels != original)):
            raise InputError("unpoisoned examples must keep their original label")
        for arr in (images, labels, ids, original, poisoned):
            arr.setflags(write=False)
        self._images = images
        self._labels = labels
        self._ids = ids
        self._original = original
        self._poisoned = poisoned
        self._class_count = class_count

    @property
    def images(self) -> np.ndarray:
        return self._images

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def original_labels(self) -> np.ndarray:
        return self._original

    @property
    def class_count(self) -> int:
        return self._class_count

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self._images.shape[1:])

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def __len__(self) -> int:
        return self._images.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(int(self.ids[i]), self.images[i], int(self.labels[i]), int(self.original_labels[i]))

    def take(self, positions) -> "Dataset":
        """Rows at the given positions (not ids), in that order."""
        pos = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self._images[pos], self._labels[pos], self._class_count,
            self._ids[pos], self._original[pos], self._poisoned[pos],
        )

    def select_ids(self, ids) -> "Dataset":
        lookup = {int(i): p for p, i in enumerate(self._ids)}
        try:
            return self.take([lookup[int(i)] for i in ids])
        except KeyError as exc:
            raise InputError(f"id {exc.args[0]} not in dataset") from None

    def positions_of(self, ids) -> np.ndarray:
        wanted = np.asarray(list(ids), dtype=np.int64)
        return np.nonzero(np.isin(self._ids, wanted))[0]

    def equals(self, other: "Dataset") -> bool:
        return (
            self._class_count == other._class_count
            and np.array_equal(self._images, other._images)
            and np.array_equal(self._labels, other._labels)
            and np.array_equal(self._ids, other._ids)
            and np.array_equal(self._original, other._original)
            and np.array_equal(self._poisoned, other._poisoned)
        )


def ground_truth_poisoned(dataset: Dataset) -> np.ndarray:
    """Evaluation-only access to the poison flags."""
    return dataset._poisoned


def concat(parts: list[Dataset]) -> Dataset:
    parts = [p for p in parts if len(p)] or parts[:1]
    return Dataset(
        np.concatenate([p._images for p in parts]),
        np.concatenate([p._labels for p in parts]),
        parts[0].class_count,
        np.concatenate([p._ids for p in parts]),
        np.concatenate([p._original for p in parts]),
        np.concatenate([p._poisoned for p in parts]),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 10
    height: int = 16
    width: int = 16
    channels: int = 1
    contrast: float = 0.25
    noise: float = 0.15
    train_size: int = 5000
    test_size: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        if min(self.height, self.width, self.channels) <= 0:
            raise ConfigError("image shape must be positive")
        if not 0.0 < self.contrast <= 1.0:
            raise ConfigError("contrast must lie in (0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.train_size <= 0 or self.test_size <= 0:
            raise ConfigError("train and test sizes must be positive")


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Class prototypes plus clamped Gaussian pixel noise.

    Each class owns a uniform random prototype ``P_c``; a sample is
    ``clip(0.5 + contrast * (P_c - 0.5) + noise * N(0, 1), 0, 1)``.
    Labels are assigned round-robin (example ``i`` has class ``i mod C``).
    """
    spec.validate()
    shape = (spec.height, spec.width, spec.channels)
    rng = Rng(spec.seed)
    protos = np.array([rng.uniform() for _ in range(spec.class_count * int(np.prod(shape)))])
    protos = protos.reshape(spec.class_count, *shape)
    bulk = rng.numpy_generator()

    def draw(n: int) -> Dataset:
        labels = np.arange(n) % spec.class_count
        mean = 0.5 + spec.contrast * (protos[labels] - 0.5)
        images = np.clip(mean + spec.noise * bulk.standard_normal((n, *shape)), 0.0, 1.0)
        return Dataset(images, labels, spec.class_count)

    return draw(spec.train_size), draw(spec.test_size)


def _read_exact(fh, n: int, field: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {field}")
    return data


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an MNIST-style pair of big-endian IDX files (unsigned bytes)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"wrong magic in image file: 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "image dims"))
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, "image pixels"), dtype=np.uint8)
        if fh.read(1):
            raise FormatError("trailing bytes after image pixels")
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"wrong magic in label file: 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, "label count"))
        if n_labels != n:
            raise FormatError(f"count mismatch: label count {n_labels} != image count {n}")
        labels = np.frombuffer(_read_exact(fh, n, "labels"), dtype=np.uint8)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), class_count)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (quantised to bytes) and labels as IDX."""
    n, rows, cols, channels = (len(dataset), *dataset.image_shape)
    if channels != 1:
        raise ConfigError("IDX export supports single-channel images only")
    if dataset.class_count > 256:
        raise ConfigError("IDX labels are single bytes")
    pixels = np.rint(dataset.images[..., 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform sample without replacement; ids are kept."""
    if n < 0 or n > len(dataset):
        raise InputError(f"cannot sample {n} of {len(dataset)} examples")
    return dataset.take(Rng(seed).sample_without_replacement(len(dataset), n))
