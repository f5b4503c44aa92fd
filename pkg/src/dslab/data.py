"""CIFAR binary ingestion, flip augmentation, normalization and synthetic blobs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng

DATA_ENV = "DSLAB_DATA_DIR"
PIXELS = 3 * 32 * 32
CIFAR10_RECORD = 1 + PIXELS
CIFAR100_RECORD = 2 + PIXELS
CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_VAL = ("test_batch.bin",)
CIFAR100_TRAIN = ("train.bin",)
CIFAR100_VAL = ("test.bin",)


class DataFormatError(ValueError):
    pass


class CorruptRecordError(DataFormatError):
    def __init__(self, path, record: int, offset: int, label: int, limit: int):
        self.record, self.offset, self.label = record, offset, label
        super().__init__(f"{path}: record {record} at byte offset {offset} has label {label} > {limit}")


class DataDirError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, 3, 32, 32) in [0, 1] or (N, D) features
    labels: np.ndarray
    class_count: int
    split: str  # "train" | "val"
    coarse_labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels outside [0, {self.class_count})")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4


# ------------------------------------------------------------------- CIFAR


def _parse_records(raw: bytes, path, label_offset: int, record: int, limit: int):
    if len(raw) == 0 or len(raw) % record:
        raise DataFormatError(f"{path}: length {len(raw)} is not a positive multiple of {record}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_offset].astype(np.int64)
    bad = np.flatnonzero(labels > limit)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(path, i, i * record + label_offset, int(labels[i]), limit)
    pixels = arr[:, record - PIXELS :].reshape(-1, 3, 32, 32)
    coarse = arr[:, 0].astype(np.int64) if label_offset == 1 else None
    return pixels, labels, coarse


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 pixels (N, 3, 32, 32) and labels from one CIFAR-10 binary batch."""
    pixels, labels, _ = _parse_records(Path(path).read_bytes(), path, 0, CIFAR10_RECORD, 9)
    return pixels, labels


def read_cifar100_file(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw pixels, fine labels and coarse labels from one CIFAR-100 binary file."""
    raw = Path(path).read_bytes()
    pixels, fine, coarse = _parse_records(raw, path, 1, CIFAR100_RECORD, 99)
    if coarse.max(initial=0) > 19:
        i = int(np.flatnonzero(coarse > 19)[0])
        raise CorruptRecordError(path, i, i * CIFAR100_RECORD, int(coarse[i]), 19)
    return pixels, fine, coarse


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def _from_unit(images: np.ndarray) -> np.ndarray:
    return np.rint(images * 255.0).astype(np.uint8)


def write_cifar10(dataset: Dataset, path) -> None:
    pixels = _from_unit(dataset.inputs).reshape(len(dataset), PIXELS)
    rec = np.empty((len(dataset), CIFAR10_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = pixels
    Path(path).write_bytes(rec.tobytes())


def write_cifar100(dataset: Dataset, path) -> None:
    if dataset.coarse_labels is None:
        raise ValueError("CIFAR-100 output needs coarse labels")
    pixels = _from_unit(dataset.inputs).reshape(len(dataset), PIXELS)
    rec = np.empty((len(dataset), CIFAR100_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.coarse_labels
    rec[:, 1] = dataset.labels
    rec[:, 2:] = pixels
    Path(path).write_bytes(rec.tobytes())


def write_cifar10_tree(train: Dataset, val: Dataset, directory) -> Path:
    """Lay out ``train``/``val`` as the CIFAR-10 binary archive (five train batches, one test batch)."""
    root = Path(directory) / "cifar-10-batches-bin"
    root.mkdir(parents=True, exist_ok=True)
    for name, idx in zip(CIFAR10_TRAIN, np.array_split(np.arange(len(train)), len(CIFAR10_TRAIN))):
        part = Dataset(train.inputs[idx], train.labels[idx], train.class_count, "train")
        write_cifar10(part, root / name)
    write_cifar10(val, root / CIFAR10_VAL[0])
    return root


def resolve_data_dir(directory=None, subdir: str | None = None) -> Path:
    """``directory`` or $DSLAB_DATA_DIR, descending into the archive's folder when present."""
    if directory is None:
        directory = os.environ.get(DATA_ENV)
        if not directory:
            raise DataDirError(f"no data directory given and {DATA_ENV} is not set")
    root = Path(directory)
    if not root.is_dir():
        raise DataDirError(f"data directory {root} does not exist (set {DATA_ENV} or data.dir)")
    if subdir and (root / subdir).is_dir():
        root = root / subdir
    return root


def _require(root: Path, names) -> list[Path]:
    paths = [root / n for n in names]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise DataDirError(f"{root} is missing {', '.join(missing)} (set {DATA_ENV} or data.dir)")
    return paths


def load_cifar10(directory=None) -> tuple[Dataset, Dataset]:
    root = resolve_data_dir(directory, "cifar-10-batches-bin")
    out = []
    for split, names in (("train", CIFAR10_TRAIN), ("val", CIFAR10_VAL)):
        parts = [read_cifar10_file(p) for p in _require(root, names)]
        pixels = np.concatenate([p for p, _ in parts])
        labels = np.concatenate([lab for _, lab in parts])
        out.append(Dataset(_to_unit(pixels), labels, 10, split, name="cifar10"))
    return out[0], out[1]


def load_cifar100(directory=None) -> tuple[Dataset, Dataset]:
    root = resolve_data_dir(directory, "cifar-100-binary")
    out = []
    for split, names in (("train", CIFAR100_TRAIN), ("val", CIFAR100_VAL)):
        (path,) = _require(root, names)
        pixels, fine, coarse = read_cifar100_file(path)
        out.append(Dataset(_to_unit(pixels), fine, 100, split, coarse_labels=coarse, name="cifar100"))
    return out[0], out[1]


def subset_per_class(dataset: Dataset, per_class: int) -> Dataset:
    """The first ``per_class`` samples of every class, in original order."""
    keep = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.class_count):
        keep[np.flatnonzero(dataset.labels == c)[:per_class]] = True
    coarse = None if dataset.coarse_labels is None else dataset.coarse_labels[keep]
    return Dataset(dataset.inputs[keep], dataset.labels[keep], dataset.class_count,
                   dataset.split, coarse_labels=coarse, name=dataset.name)


# ------------------------------------------------------------ augmentation


@dataclass
class Normalizer:
    """Per-channel standardization with constants computed from a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: Dataset) -> "Normalizer":
        if train.split != "train":
            raise ValueError("normalization constants come from the training split")
        x = train.inputs
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        return cls(x.mean(axis=axes), x.std(axis=axes))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 4:
            return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return (x - self.mean) / self.std


def flip(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Horizontally flip the images selected by ``mask``."""
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def augment(batch: Batch, gen: np.random.Generator, normalizer: Normalizer | None) -> Batch:
    """Random horizontal flip with p=0.5 per image, then normalization."""
    mask = gen.random(len(batch)) < 0.5
    x = flip(batch.inputs, mask)
    return Batch(normalizer(x) if normalizer is not None else x, batch.labels)


@dataclass
class BatchStream:
    """Endless seeded minibatches over a dataset.

    Each epoch is a fresh permutation drawn from the ``shuffle`` stream;
    train image batches are flipped with draws from the ``flip`` stream.
    """

    dataset: Dataset
    batch_size: int
    seed: int
    normalizer: Normalizer | None = None
    shuffle: bool = True
    epoch: int = field(default=0, init=False)

    def __post_init__(self):
        if not 1 <= self.batch_size <= 128:
            raise ValueError(f"batch size must be in [1, 128], got {self.batch_size}")
        self._shuffle_gen = rng.stream(self.seed, "data.shuffle")
        self._flip_gen = rng.stream(self.seed, "data.flip")

    def epoch_order(self) -> np.ndarray:
        n = len(self.dataset)
        return self._shuffle_gen.permutation(n) if self.shuffle else np.arange(n)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            order = self.epoch_order()
            for start in range(0, len(order) - self.batch_size + 1, self.batch_size):
                idx = order[start : start + self.batch_size]
                yield self._make(idx)
            if len(order) < self.batch_size:
                yield self._make(order)
            self.epoch += 1

    def _make(self, idx: np.ndarray) -> Batch:
        batch = Batch(self.dataset.inputs[idx], self.dataset.labels[idx])
        if self.dataset.split == "train" and self.dataset.is_image:
            return augment(batch, self._flip_gen, self.normalizer)
        if self.normalizer is not None:
            batch.inputs = self.normalizer(batch.inputs)
        return batch


def eval_batches(dataset: Dataset, normalizer: Normalizer | None, batch_size: int = 128) -> Iterator[Batch]:
    """Fixed-order, unaugmented batches."""
    for start in range(0, len(dataset), batch_size):
        x = dataset.inputs[start : start + batch_size]
        if normalizer is not None:
            x = normalizer(x)
        yield Batch(x, dataset.labels[start : start + batch_size])


# --------------------------------------------------------------- synthetic


def make_synthetic(classes: int = 4, dim: int = 16, n: int = 400, seed: int = 0,
                   spread: float = 1.0, separation: float = 3.5, split: str = "train") -> Dataset:
    """Gaussian class blobs: unit-direction means scaled by ``separation``, isotropic noise ``spread``.

    Class means depend only on ``seed``; the ``split`` selects an independent
    noise stream so train and val draws never coincide.
    """
    if n % classes:
        raise ValueError(f"n={n} is not divisible by classes={classes}")
    means = rng.stream(seed, "synthetic.means").standard_normal((classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    per = n // classes
    labels = np.repeat(np.arange(classes), per)
    noise = rng.stream(seed, f"synthetic.noise.{split}").standard_normal((n, dim))
    x = means[labels] + spread * noise
    return Dataset(x, labels, classes, split, name="synthetic")


def make_synthetic_images(classes: int = 10, per_class: int = 50, seed: int = 0, noise: float = 0.3,
                          split: str = "train") -> Dataset:
    """CIFAR-shaped stand-in images: a smooth per-class color template plus pixel noise, in [0, 1].

    Templates depend only on ``seed``; ``split`` picks an independent noise stream.
    """
    coarse = rng.stream(seed, "synthetic_images.templates").uniform(0.2, 0.8, (classes, 3, 4, 4))
    templates = coarse.repeat(8, axis=2).repeat(8, axis=3)
    labels = np.repeat(np.arange(classes), per_class)
    gen = rng.stream(seed, f"synthetic_images.noise.{split}")
    x = templates[labels] + noise * gen.standard_normal((len(labels), 3, 32, 32))
    return Dataset(np.clip(x, 0.0, 1.0), labels, classes, split, name="synthetic_images")


def load_dataset(source: str, directory=None, subset: int | None = None, classes: int = 4,
                 dim: int = 16, n: int = 400, seed: int = 0, spread: float = 1.0) -> tuple[Dataset, Dataset]:
    if source == "cifar10":
        train, val = load_cifar10(directory)
    elif source == "cifar100":
        train, val = load_cifar100(directory)
    elif source == "synthetic":
        train = make_synthetic(classes, dim, n, seed, spread, split="train")
        val = make_synthetic(classes, dim, n, seed, spread, split="val")
    else:
        raise ValueError(f"unknown data source {source!r}")
    if subset:
        train = subset_per_class(train, subset)
    return train, val
