"""Dataset loaders (MNIST IDX, CIFAR-10 binary) and seeded synthetic sets."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ConfigError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
EASY, HARD = 0, 1


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # N, C, H, W
    labels: np.ndarray            # N, int64
    split: str = "train"
    difficulty: np.ndarray | None = None   # EASY / HARD per sample, synthetic only
    n_classes: int | None = None
    stats: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ConfigError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigError("labels outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        diff = None if self.difficulty is None else self.difficulty[idx]
        return Dataset(self.images[idx], self.labels[idx], self.split, diff,
                       self.n_classes, self.stats)

    def first_per_class(self, k):
        """First ``k`` samples of each class, original order kept."""
        keep = np.zeros(len(self), dtype=bool)
        for c in range(self.n_classes):
            keep[np.flatnonzero(self.labels == c)[:k]] = True
        return self.subset(np.flatnonzero(keep))


def standardize(train, *others):
    """Per-channel standardization with statistics from ``train`` only."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    out = []
    for ds in (train,) + others:
        imgs = (ds.images - mean) / std
        out.append(Dataset(imgs, ds.labels, ds.split, ds.difficulty, ds.n_classes,
                           (mean.ravel(), std.ravel())))
    return out if others else out[0]


# MNIST IDX -----------------------------------------------------------------------

def _read_idx(path, expected_magic):
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise ParseError(f"{path}: truncated header at offset {len(buf)}")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic at offset 0: expected 0x{expected_magic:08x}, "
                         f"found 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated dimension header at offset {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    off = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(buf) - off < count:
        raise ParseError(f"{path}: truncated payload at offset {len(buf)}, "
                         f"expected {count} bytes after offset {off}")
    if len(buf) - off > count:
        raise ParseError(f"{path}: {len(buf) - off - count} trailing bytes at offset {off + count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    imgs = images.astype(np.float64)[:, None] / 255.0
    return Dataset(imgs, labels.astype(np.int64), split, n_classes=10)


def write_idx(images_path, labels_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# CIFAR-10 binary ---------------------------------------------------------------------

def load_cifar10_bin(paths, split="train"):
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        buf = Path(path).read_bytes()
        if len(buf) % CIFAR_RECORD:
            raise ParseError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD} "
                             f"(partial record at offset {len(buf) - len(buf) % CIFAR_RECORD})")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise ParseError(f"{path}: label {rec[bad[0], 0]} > 9 at offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    imgs = np.concatenate(images).astype(np.float64) / 255.0
    return Dataset(imgs, np.concatenate(labels), split, n_classes=10)


def write_cifar10_bin(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


# synthetic ----------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Gaussian class clusters shaped as images, with a planted hard subpopulation.

    Each class has a fixed random prototype. Easy samples are the prototype
    plus ``sigma_easy`` noise. Hard samples are the prototype scaled by
    ``hard_contrast`` plus ``sigma_hard`` noise; the reduced contrast means
    their evidence builds up over several timesteps.
    """
    n_classes: int = 4
    n_per_class: int = 200
    dims: tuple = (1, 8, 8)
    sigma_easy: float = 0.3
    sigma_hard: float = 0.9
    hard_fraction: float = 0.5
    hard_contrast: float = 1.0
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not self.sigma_easy <= self.sigma_hard:
            raise ConfigError("sigma_easy must not exceed sigma_hard")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError("hard_fraction must lie in [0, 1]")
        if not 0.0 < self.hard_contrast <= 1.0:
            raise ConfigError("hard_contrast must lie in (0, 1]")
        if self.n_classes < 2 or self.n_per_class < 1:
            raise ConfigError("need >= 2 classes and >= 1 sample per class")


def _draw(spec, protos, n_per_class, gen):
    D = int(np.prod(spec.dims))
    labels = np.repeat(np.arange(spec.n_classes), n_per_class)
    hard = gen.random(labels.size) < spec.hard_fraction
    noise = gen.standard_normal((labels.size, D))
    sigma = np.where(hard, spec.sigma_hard, spec.sigma_easy)[:, None]
    contrast = np.where(hard, spec.hard_contrast, 1.0)[:, None]
    x = protos[labels] * contrast + sigma * noise
    order = gen.permutation(labels.size)
    return (x[order].reshape((-1,) + spec.dims), labels[order],
            hard[order].astype(np.int64))


def make_synthetic(spec):
    """Return ``(train, test)`` datasets; ``difficulty`` tags are kept on both."""
    gen = np.random.default_rng(spec.seed)
    D = int(np.prod(spec.dims))
    protos = gen.standard_normal((spec.n_classes, D))
    n_test = max(1, int(round(spec.n_per_class * spec.test_fraction)))
    xtr, ytr, dtr = _draw(spec, protos, spec.n_per_class, gen)
    xte, yte, dte = _draw(spec, protos, n_test, gen)
    train = Dataset(xtr, ytr, "train", dtr, spec.n_classes)
    test = Dataset(xte, yte, "test", dte, spec.n_classes)
    return train, test


def batches(n, batch_size, shuffle_rng=None):
    """Index batches over ``range(n)``; shuffled when a generator is given."""
    order = np.arange(n) if shuffle_rng is None else shuffle_rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
