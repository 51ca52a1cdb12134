"""Image datasets: synthetic two-colour classes, CIFAR-10 style binary records, splits.

Images are float64 arrays of shape ``(3, s, s)`` with values in ``[0, 1]``,
channel-major then row-major, which is also the byte order of a CIFAR-10 record.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError
from .numkit import Rng

UNLABELED = 255
CIFAR_SIDE = 32


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3 or x.shape[1] != x.shape[2]:
        raise InvalidInputError(f"image must have shape (3, s, s), got {x.shape}")
    if not (np.all(x >= 0.0) and np.all(x <= 1.0)):
        raise InvalidInputError("image values must lie in [0, 1]")
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` images of a common side, stored as an ``(n, 3, s, s)`` array."""

    images: np.ndarray

    def __post_init__(self):
        imgs = _frozen(self.images, np.float64)
        if imgs.ndim != 4 or imgs.shape[1] != 3 or imgs.shape[2] != imgs.shape[3]:
            raise InvalidInputError(f"images must have shape (n, 3, s, s), got {imgs.shape}")
        if imgs.shape[0] < 1:
            raise InvalidInputError("a dataset needs at least one image")
        if not (np.all(imgs >= 0.0) and np.all(imgs <= 1.0)):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", imgs)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def __len__(self):
        return self.n

    def flat(self) -> np.ndarray:
        """Images as rows of length ``3 s^2``."""
        return self.images.reshape(self.n, -1)

    @classmethod
    def from_flat(cls, rows, side: int) -> "Dataset":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows.reshape(rows.shape[0], 3, side, side))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[np.asarray(idx)])

    def concat(self, other: "Dataset") -> "Dataset":
        if other.side != self.side:
            raise InvalidInputError("cannot concatenate datasets of different sides")
        return Dataset(np.concatenate([self.images, other.images]))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    dataset: Dataset
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64)
        if labels.shape != (self.dataset.n,):
            raise InvalidInputError("labels must have one entry per image")
        if self.num_classes < 1 or labels.min() < 0 or labels.max() >= self.num_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def images(self) -> np.ndarray:
        return self.dataset.images

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.dataset.subset(idx), self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    images_per_class: int = 500
    side: int = 8
    pixel_noise_sigma: float = 0.05
    seed: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        if self.images_per_class < 1:
            raise InvalidInputError("images_per_class must be >= 1")
        if self.side < 4:
            raise InvalidInputError("side must be >= 4")
        if self.pixel_noise_sigma < 0:
            raise InvalidInputError("pixel_noise_sigma must be >= 0")


def synth_dataset(cfg: SynthConfig) -> LabeledDataset:
    """Two-colour vertical-split images; each class owns a pair of base colours.

    Images are ordered class by class.  Per-image split columns lie in
    ``[1, s-1]`` so both regions are non-empty.
    """
    rng = Rng(cfg.seed, 0)
    c, per, s = cfg.num_classes, cfg.images_per_class, cfg.side
    colors = rng.uniform(0.0, 1.0, size=(c, 2, 3))
    labels = np.repeat(np.arange(c), per)
    cuts = rng.integers(1, s, size=c * per)
    left = np.arange(s)[None, :] < cuts[:, None]                    # (n, s) column mask
    a = colors[labels, 0][:, :, None, None]                          # (n, 3, 1, 1)
    b = colors[labels, 1][:, :, None, None]
    images = np.where(left[:, None, None, :], a, b)
    images = np.broadcast_to(images, (c * per, 3, s, s)).copy()
    if cfg.pixel_noise_sigma > 0:
        images += rng.normal(0.0, cfg.pixel_noise_sigma, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(Dataset(images), labels, c)


def _quantize(images) -> np.ndarray:
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def write_records(path, data, labels=None) -> None:
    """Write images as CIFAR-10 style records: one label byte then ``3 s^2`` pixel bytes.

    ``labels=None`` marks every record unlabeled (byte 255).  Pixels are
    quantized with ``round(v * 255)``.
    """
    if isinstance(data, LabeledDataset):
        labels = data.labels if labels is None else labels
        data = data.dataset
    n = data.n
    if labels is None:
        lab = np.full(n, UNLABELED, dtype=np.uint8)
    else:
        labels = np.asarray(labels)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() > 254:
            raise InvalidInputError("labels must be one byte in [0, 254] per image")
        lab = labels.astype(np.uint8)
    body = _quantize(data.images).reshape(n, -1)
    records = np.concatenate([lab[:, None], body], axis=1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def read_records(path, side: int = CIFAR_SIDE, max_label: int = 254):
    """Read binary records of ``1 + 3 side^2`` bytes.

    Returns ``(dataset, labels)``; ``labels`` is ``None`` when every record
    carries the unlabeled marker 255.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    rec = 1 + 3 * side * side
    if raw.size == 0 or raw.size % rec:
        raise FormatError(f"{path}: length {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    lab = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, side, side).astype(np.float64) / 255.0
    dataset = Dataset(images)
    if np.all(lab == UNLABELED):
        return dataset, None
    if lab.max() > max_label:
        bad = int(np.flatnonzero(lab > max_label)[0])
        raise FormatError(f"{path}: record {bad} has label {lab[bad]} > {max_label}")
    return dataset, lab


def load_cifar10_batch(path) -> LabeledDataset:
    """Load an official CIFAR-10 binary batch (``N * 3073`` bytes, labels 0-9)."""
    dataset, labels = read_records(path, CIFAR_SIDE, max_label=9)
    if labels is None:
        raise FormatError(f"{path}: label byte 255 > 9")
    return LabeledDataset(dataset, labels, 10)


def split(d, train_frac: float, rng: Rng):
    """Uniformly shuffle then cut into ``round(train_frac * n)`` train items and the rest."""
    if not 0.0 < train_frac < 1.0:
        raise InvalidInputError("train_frac must be in (0, 1)")
    n = d.n
    n_train = int(round(train_frac * n))
    if n_train == 0 or n_train == n:
        raise InvalidInputError(f"split of n={n} at {train_frac} leaves one side empty")
    perm = rng.permutation(n)
    return d.subset(perm[:n_train]), d.subset(perm[n_train:])


def dataset_file_size(n: int, side: int) -> int:
    return n * (1 + 3 * side * side)


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"
