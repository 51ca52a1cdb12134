"""Per-channel colour histograms and class histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset, check_image
from .errors import InvalidInputError

DEFAULT_BINS = 32


@dataclass(frozen=True, eq=False)
class ColorHistogram:
    """Concatenated R, G, B histograms of ``bins`` bins; each segment sums to one."""

    bins: int
    values: np.ndarray

    def channel(self, c: int) -> np.ndarray:
        return self.values[c * self.bins:(c + 1) * self.bins]

    def channels(self) -> np.ndarray:
        return self.values.reshape(3, self.bins)


@dataclass(frozen=True, eq=False)
class ClassHistogram:
    num_classes: int
    frequencies: np.ndarray


def _check_bins(b):
    if int(b) != b or b < 2:
        raise InvalidInputError(f"bins must be an integer >= 2, got {b}")
    return int(b)


def histogram_rows(images, b: int = DEFAULT_BINS) -> np.ndarray:
    """Colour histograms of a stack of images, one ``3b`` row per image."""
    b = _check_bins(b)
    x = np.asarray(images, dtype=np.float64)
    n = x.shape[0]
    px = x.reshape(n, 3, -1)
    m = px.shape[2]
    idx = np.minimum((px * b).astype(np.int64), b - 1)
    # flat bin id = image*3b + channel*b + bin; bincount keeps the reduction exact
    offs = (np.arange(n)[:, None, None] * 3 + np.arange(3)[None, :, None]) * b
    counts = np.bincount((idx + offs).ravel(), minlength=n * 3 * b)
    return counts.reshape(n, 3 * b) / m


def color_histogram(x, b: int = DEFAULT_BINS) -> ColorHistogram:
    """Histogram of one image; value ``v`` falls in bin ``min(floor(v b), b - 1)``."""
    x = check_image(x)
    return ColorHistogram(_check_bins(b), histogram_rows(x[None], b)[0])


def mean_color_histogram(d, b: int = DEFAULT_BINS) -> ColorHistogram:
    images = d.images if isinstance(d, Dataset) or hasattr(d, "images") else np.asarray(d)
    if len(images) == 0:
        raise InvalidInputError("mean_color_histogram of an empty dataset")
    rows = histogram_rows(images, b)
    return ColorHistogram(int(b), rows.mean(axis=0))


def class_histogram(labels, num_classes: int) -> ClassHistogram:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("class_histogram needs at least one label")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes)
    return ClassHistogram(num_classes, counts / labels.size)


def write_histogram_csv(path, hists, labels=None) -> None:
    """One row per histogram: optional label, then ``b``, then the ``3b`` values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, h in enumerate(hists):
            row = [h.bins, *(repr(float(v)) for v in h.values)]
            if labels is not None:
                row.insert(0, labels[i])
            w.writerow(row)
