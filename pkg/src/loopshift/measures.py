"""Distribution-shift measures between generated and real data."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidInputError, NumericError
from .hist import ClassHistogram, ColorHistogram, histogram_rows
from .numkit import as_sym, sqrtm_psd

DEFAULT_EPS = 1e-6
ALPHA_MAX = 10.0


def kl(p, q, eps: float = DEFAULT_EPS) -> float:
    """``KL(p || q)`` in nats after adding ``eps`` to every entry and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"kl needs equal-length vectors, got {p.shape} and {q.shape}")
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInputError("kl inputs must be non-negative")
    ps = (p + eps) / np.sum(p + eps)
    qs = (q + eps) / np.sum(q + eps)
    return max(0.0, float(np.sum(ps * np.log(ps / qs))))


def color_kl(pg: ColorHistogram, pr: ColorHistogram, eps: float = DEFAULT_EPS) -> float:
    """Sum over R, G, B of the per-channel ``KL(pg || pr)``."""
    if pg.bins != pr.bins:
        raise InvalidInputError(f"bin mismatch: {pg.bins} vs {pr.bins}")
    return sum(kl(pg.channel(c), pr.channel(c), eps) for c in range(3))


# --- Gaussian fit of a single-channel histogram -------------------------------------


@dataclass(frozen=True)
class GaussianFit:
    amplitude: float
    mu: float
    sigma: float
    area_fraction: float
    alpha: float
    residual: float = float("nan")
    init_residual: float = float("nan")
    iterations: int = 0

    def density(self, bins: int) -> np.ndarray:
        """Fitted curve at the bin centres, renormalized to a distribution."""
        # normalize in the log domain so a far-off narrow fit cannot underflow to 0/0
        t = bin_centers(bins)
        logg = -((t - self.mu) ** 2) / (2.0 * self.sigma * self.sigma)
        g = np.exp(logg - logg.max())
        return g / g.sum()


def bin_centers(b: int) -> np.ndarray:
    return (np.arange(b) + 0.5) / b


def _gauss(t, mu, sigma):
    # a runaway trial step may square a huge offset; exp(-inf) = 0 is the right value
    with np.errstate(over="ignore"):
        return np.exp(-((t - mu) ** 2) / (2.0 * sigma * sigma))


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def gaussian_fit(channel_hist, max_iters: int = 200, step_tol: float = 1e-8) -> GaussianFit:
    """Least-squares fit of ``A exp(-(t - mu)^2 / (2 sigma^2))`` at the bin centres.

    Gauss-Newton from the moment-matched start; a step is accepted only if it
    lowers the residual (halving up to 40 times), so the result is never worse
    than the start.  ``sigma`` is kept in ``[1 / (4b), 1]``; wider curves are
    flat on the unit interval and would make any flat histogram look Gaussian.
    """
    h = np.asarray(channel_hist, dtype=np.float64)
    if h.ndim != 1 or h.size < 4:
        raise InvalidInputError("gaussian_fit needs a histogram with at least 4 bins")
    if np.any(h < 0) or abs(h.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"histogram must be non-negative and sum to 1 (sum={h.sum():.6g})")
    b = h.size
    t = bin_centers(b)
    sig_min, sig_max = 1.0 / (4 * b), 1.0

    mu = float(np.dot(h, t))
    sigma = min(max(math.sqrt(max(float(np.dot(h, (t - mu) ** 2)), 0.0)), sig_min), sig_max)
    amp = float(h.max())
    theta = np.array([amp, mu, sigma])

    def sse(th):
        r = th[0] * _gauss(t, th[1], th[2]) - h
        return float(r @ r), r

    cur, r = sse(theta)
    init = cur
    it = 0
    for it in range(1, max_iters + 1):
        a, m, s = theta
        g = _gauss(t, m, s)
        d = t - m
        jac = np.column_stack([g, a * g * d / s**2, a * g * d * d / s**3])
        delta, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        if not np.all(np.isfinite(delta)):
            break
        lam = 1.0
        accepted = False
        for _ in range(40):
            cand = theta + lam * delta
            cand[2] = min(max(cand[2], sig_min), sig_max)
            val, rc = sse(cand)
            if val < cur:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        step = np.max(np.abs(cand - theta))
        theta, cur, r = cand, val, rc
        if step < step_tol:
            break

    amp, mu, sigma = (float(v) for v in theta)
    area = _phi((1.0 - mu) / sigma) - _phi((0.0 - mu) / sigma)
    alpha = ALPHA_MAX if area <= 1.0 / ALPHA_MAX else min(1.0 / area, ALPHA_MAX)
    return GaussianFit(amp, mu, sigma, float(area), float(alpha), cur, init, it)


def gauss_alpha_kl(channel_hist, eps: float = DEFAULT_EPS) -> float:
    """``alpha * KL(hist || fitted Gaussian)``: distance to Gaussianity, penalizing tail fits."""
    fit = gaussian_fit(channel_hist)
    h = np.asarray(channel_hist, dtype=np.float64)
    return fit.alpha * kl(h, fit.density(h.size), eps)


def mean_gauss_alpha_kl(hist: ColorHistogram, eps: float = DEFAULT_EPS) -> float:
    return float(np.mean([gauss_alpha_kl(hist.channel(c), eps) for c in range(3)]))


# --- Frechet distance over feature statistics ---------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        cov = as_sym(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError("covariance shape does not match the mean")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def cov_sqrt(self) -> np.ndarray:
        return sqrtm_psd(self.cov)


def feature_stats(features) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("feature_stats needs at least 2 feature vectors")
    mean = x.mean(axis=0)
    c = x - mean
    return FeatureStats(mean, c.T @ c / (x.shape[0] - 1))


def frechet(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)``, clamped at 0."""
    if a.dim != b.dim:
        raise InvalidInputError(f"feature dims differ: {a.dim} vs {b.dim}")
    s = a.cov_sqrt
    cross = sqrtm_psd(s @ b.cov @ s)
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if not math.isfinite(d):
        raise NumericError("Frechet distance is not finite")
    return max(d, 0.0)


# --- Correlation and class-level measures -------------------------------------------


def r_squared(xs, ys) -> float:
    """Squared Pearson correlation; 0 when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("r_squared needs two equal-length vectors")
    if x.size < 2:
        raise InvalidInputError("r_squared needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r2 = float(dx @ dy) ** 2 / (sxx * syy)
    return min(max(r2, 0.0), 1.0)


def class_coverage(h: ClassHistogram, tau: float | None = None) -> int:
    """Number of classes whose frequency exceeds ``tau`` (default ``0.1 / C``)."""
    if tau is None:
        tau = 0.1 / h.num_classes
    if not 0.0 <= tau < 1.0:
        raise InvalidInputError("tau must be in [0, 1)")
    return int(np.sum(np.asarray(h.frequencies) > tau))


def intra_class_variance(d, b: int = 32, labels=None) -> float:
    """Mean over classes of the trace of the colour-histogram covariance.

    Classes with fewer than two members are skipped.  ``labels`` overrides the
    dataset's own labels (e.g. classifier predictions on generated data).
    """
    images = d.images
    if labels is None:
        labels = d.labels
    labels = np.asarray(labels)
    rows = histogram_rows(images, b)
    traces = []
    for c in np.unique(labels):
        members = rows[labels == c]
        if members.shape[0] < 2:
            continue
        traces.append(float(np.sum(members.var(axis=0, ddof=1))))
    if not traces:
        raise InvalidInputError("no class has at least 2 members")
    return float(np.mean(traces))


@dataclass
class ShiftReport:
    color_kl: float
    gauss_alpha_kl: list = field(default_factory=list)
    fcd: float = float("nan")
    class_coverage: int = 0
    intra_class_variance: float = float("nan")
    realfake_accuracy: float = float("nan")

    FIELDS = ("color_kl", "gauss_alpha_kl_r", "gauss_alpha_kl_g", "gauss_alpha_kl_b",
              "fcd", "class_coverage", "intra_class_variance", "realfake_accuracy")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list:
        g = list(self.gauss_alpha_kl) + [float("nan")] * (3 - len(self.gauss_alpha_kl))
        return [self.color_kl, *g[:3], self.fcd, self.class_coverage,
                self.intra_class_variance, self.realfake_accuracy]
