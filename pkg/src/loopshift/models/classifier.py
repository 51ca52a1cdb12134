"""Reference classifier: class labels for generated data and the feature space for FCD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import LabeledDataset
from ..errors import InvalidInputError
from ..numkit import Rng
from .mlp import AdamState, Mlp, adam_step, init_mlp, mlp_forward, mlp_grad

FEATURE_DIM = 64


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = FEATURE_DIM
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class Classifier:
    net: Mlp
    num_classes: int

    def _rows(self, images):
        x = np.asarray(images, dtype=np.float64)
        return x.reshape(1 if x.ndim == 3 else x.shape[0], -1)

    def logits(self, images) -> np.ndarray:
        return self.net(self._rows(images))

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def features(self, images) -> np.ndarray:
        """Penultimate (hidden-layer) activations, one row per image."""
        _, cache = mlp_forward(self.net, self._rows(images))
        return cache.post[-2]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(d: LabeledDataset, cfg: ClassifierConfig = ClassifierConfig(),
                     rng: Rng | None = None) -> Classifier:
    """Softmax cross-entropy MLP ``3m -> hidden -> C`` trained with Adam on minibatches."""
    if np.unique(d.labels).size < 2:
        raise InvalidInputError("classifier training needs at least 2 classes present")
    rng = rng if rng is not None else Rng(cfg.seed, 11)
    x = d.dataset.flat()
    y = d.labels
    c = d.num_classes
    net = init_mlp([x.shape[1], cfg.hidden, c], ["leaky_relu", "identity"], rng)
    opt = AdamState.zeros_like(net.params())
    eye = np.eye(c)
    for _ in range(cfg.steps):
        idx = rng.integers(0, x.shape[0], size=cfg.batch_size)
        logits, cache = mlp_forward(net, x[idx])
        up = (_softmax(logits) - eye[y[idx]]) / cfg.batch_size
        grads, _ = mlp_grad(net, x[idx], up, cache)
        adam_step(net.params(), grads, opt, cfg.lr)
    return Classifier(net, c)
