"""Deterministic numerical kernel: seeded streams, symmetric eigensolver, PCA."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, NotPSDError


class Rng:
    """Seeded, splittable random stream backed by the counter-based Philox generator.

    A stream is identified by ``(seed, stream_id)``; ``stream_id`` is a tuple of
    non-negative ints so that streams can be split hierarchically without
    overlap.  Draw methods of :class:`numpy.random.Generator` are forwarded.
    """

    def __init__(self, seed: int, stream_id=()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *sub_id: int) -> "Rng":
        return Rng(self.seed, self.stream_id + tuple(sub_id))

    def __getattr__(self, name):
        # only reached for names not set in __init__
        return getattr(self.__dict__["gen"], name)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def as_sym(a) -> np.ndarray:
    """Validate a square matrix and return it symmetrized (``(A + A^T) / 2``)."""
    a = np.array(a, dtype=np.float64, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    return 0.5 * (a + a.T)


def sym_eigen(a, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending order
    and eigenvectors as the columns of an orthonormal matrix.
    """
    a = as_sym(a)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.abs(a).max()
    if scale == 0.0 or n == 1:
        return _sorted_eig(np.diag(a).copy(), v)
    tol = 1e-15 * scale
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * scale:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return _sorted_eig(np.diag(a).copy(), v)


def _sorted_eig(w, v):
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def sqrtm_psd(a, rel_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root of a (near) positive semi-definite matrix.

    Eigenvalues down to ``-rel_tol * max|lambda|`` are tolerated and clamped to
    zero; anything more negative raises :class:`NotPSDError`.
    """
    w, v = sym_eigen(a)
    top = np.abs(w).max() if w.size else 0.0
    if w.size and w[-1] < -rel_tol * top:
        raise NotPSDError(f"eigenvalue {w[-1]:.3e} below near-PSD tolerance")
    root = np.sqrt(np.clip(w, 0.0, None))
    b = (v * root) @ v.T
    return 0.5 * (b + b.T)


def pca_project(points, out_dim: int) -> np.ndarray:
    """Project points onto the top ``out_dim`` principal axes of the centred cloud.

    Axis signs are fixed so the first non-negligible component of every axis is
    positive, making the output independent of solver sign choices.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("pca_project needs at least 2 points")
    if not 1 <= out_dim <= x.shape[1]:
        raise InvalidInputError(f"out_dim must be in [1, {x.shape[1]}], got {out_dim}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    _, v = sym_eigen(cov)
    axes = v[:, :out_dim].copy()
    for j in range(out_dim):
        col = axes[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            axes[:, j] = -col
    return centred @ axes
