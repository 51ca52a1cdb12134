"""Generators with a common sampling contract: bootstrap resampler, diagonal GMM, GAN."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..errors import InvalidInputError
from ..numkit import Rng

GENERATOR_KINDS = ("bootstrap", "gmm", "gan")
VAR_FLOOR = 1e-6


@dataclass
class Gmm:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    variances: np.ndarray    # (K, D), >= VAR_FLOOR

    @property
    def k(self) -> int:
        return self.weights.size

    def log_joint(self, x) -> np.ndarray:
        """``log w_k + log N(x | mu_k, diag var_k)`` for every row and component."""
        inv = 1.0 / self.variances
        # expanded square keeps memory at (n, K)
        quad = (x * x) @ inv.T - 2.0 * x @ (self.means * inv).T + np.sum(self.means**2 * inv, axis=1)
        logdet = np.sum(np.log(2.0 * np.pi * self.variances), axis=1)
        return np.log(np.maximum(self.weights, 1e-300)) - 0.5 * (quad + logdet)

    def mean_log_likelihood(self, x) -> float:
        lj = self.log_joint(x)
        top = lj.max(axis=1, keepdims=True)
        return float(np.mean(top[:, 0] + np.log(np.exp(lj - top).sum(axis=1))))


@dataclass
class Generator:
    """A fitted generative model; ``payload`` depends on ``kind``."""

    kind: str
    payload: object
    side: int
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    latent_dim: int = 0
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise InvalidInputError(f"unknown generator kind {self.kind!r}")

    def sample(self, n: int, rng: Rng) -> Dataset:
        return gan_sample(self, n, rng)


def gan_sample(g: Generator, n: int, rng: Rng) -> Dataset:
    """Draw ``n`` images from any generator kind; values are clamped to ``[0, 1]``."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if g.kind == "bootstrap":
        # copy semantics: without replacement, one fresh permutation per pass over the pool
        pool = g.payload
        m = pool.shape[0]
        idx = np.concatenate([rng.permutation(m) for _ in range(-(-n // m))])[:n]
        rows = pool[idx].copy()
        if g.noise > 0:
            rows += rng.normal(0.0, g.noise, size=rows.shape)
    elif g.kind == "gmm":
        m: Gmm = g.payload
        comp = rng.choice(m.k, size=n, p=m.weights)
        rows = m.means[comp] + np.sqrt(m.variances[comp]) * rng.normal(size=(n, m.means.shape[1]))
    else:
        z = rng.normal(size=(n, g.latent_dim))
        rows = g.payload(z)
    return Dataset.from_flat(np.clip(rows, 0.0, 1.0), g.side)


def bootstrap_fit(d: Dataset, noise: float = 0.0) -> Generator:
    """Copying generator: resample the training images, plus optional pixel noise.

    Draws are without replacement until the pool is exhausted, so ``n`` equal to
    the training size returns a shuffled copy.
    """
    if noise < 0:
        raise InvalidInputError("noise must be >= 0")
    return Generator("bootstrap", d.flat().copy(), d.side, noise=noise)


def gmm_fit(d: Dataset, k: int, rng: Rng, max_iters: int = 100, tol: float = 1e-6) -> Generator:
    """Diagonal-covariance EM with k-means++ seeded means.

    Stops when the mean per-sample log-likelihood improves by less than ``tol``.
    The log-likelihood trace is stored as ``loss_trace``.
    """
    from ..detectors import kmeans_pp_seed

    x = d.flat()
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidInputError(f"need 1 <= K <= n, got K={k}, n={n}")
    centres = x[kmeans_pp_seed(x, k, rng)]
    var = np.maximum(x.var(axis=0), VAR_FLOOR)
    model = Gmm(np.full(k, 1.0 / k), centres.copy(), np.tile(var, (k, 1)))
    trace = em_iterate(model, x, rng, max_iters, tol)
    return Generator("gmm", model, d.side, loss_trace=np.asarray(trace))


def em_iterate(model: Gmm, x, rng: Rng, max_iters: int, tol: float) -> list:
    """Run EM in place on ``model``; returns the log-likelihood before each M-step and at the end."""
    trace = []
    prev = -np.inf
    for _ in range(max_iters):
        lj = model.log_joint(x)
        top = lj.max(axis=1, keepdims=True)
        resp = np.exp(lj - top)
        norm = resp.sum(axis=1, keepdims=True)
        ll = float(np.mean(top[:, 0] + np.log(norm[:, 0])))
        trace.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp /= norm
        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk < 1e-10):
            # dead component: restart on a random point
            model.means[j] = x[rng.integers(0, x.shape[0])]
            resp[:, j] = 0.0
        nk = np.maximum(nk, 1e-10)
        model.weights = nk / nk.sum()
        model.means = (resp.T @ x) / nk[:, None]
        model.variances = np.maximum((resp.T @ (x * x)) / nk[:, None] - model.means**2, VAR_FLOOR)
    else:
        trace.append(model.mean_log_likelihood(x))
    return trace
