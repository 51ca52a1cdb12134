"""Single-sample detectability and colour-space cluster analysis.

Linear SVM and random forest decide real (0) vs generated (1) from a single
image's colour histogram; k-means fitted on real histograms exposes which
modes a generator reproduces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .hist import ClassHistogram, DEFAULT_BINS, class_histogram, histogram_rows
from .numkit import Rng

REAL, GENERATED = 0, 1


# --- k-means -------------------------------------------------------------------------


def _sq_dists(x, c, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_pp_seed(points, k: int, rng: Rng) -> np.ndarray:
    """Indices of ``k`` seeds chosen by k-means++ (D^2 weighting)."""
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a seed; take unused indices in order
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return np.asarray(chosen)


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    trace: list = field(default_factory=list)   # inertia after each assignment step

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.centroids.shape[1]:
            raise InvalidInputError("point dim does not match the centroids")
        return np.argmin(_sq_dists(x, self.centroids), axis=1)


def kmeans(points, k: int, rng: Rng, max_iters: int = 100) -> KmeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    An empty cluster is moved onto the point currently farthest from its own
    centroid.  Stops when assignments stop changing.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= n, got k={k}, n={n}")
    cent = x[kmeans_pp_seed(x, k, rng)].copy()
    assign = None
    trace = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, cent)
        new = np.argmin(d2, axis=1)
        own = d2[np.arange(n), new]
        trace.append(float(own.sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(own))
            assign[far] = j
            own[far] = 0.0
            counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, x)
        cent = sums / counts[:, None]
    d2 = _sq_dists(x, cent)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    return KmeansResult(cent, assign, inertia, trace)


def cluster_frequencies(result: KmeansResult, extra_points):
    """Cluster occupancy of the fitted points and of extra points under frozen centroids."""
    own = class_histogram(result.assignments, result.k)
    extra = class_histogram(result.assign(extra_points), result.k)
    return own, extra


# --- binary classifiers --------------------------------------------------------------


@dataclass
class BinaryClassifier:
    """``kind`` is ``linear-svm`` (params: mean, std, w) or ``random-forest`` (params: trees)."""

    kind: str
    params: dict

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "linear-svm":
            return (self.decision_function(x) > 0).astype(np.int64)
        votes = np.zeros(x.shape[0])
        for tree in self.params["trees"]:
            votes += tree.predict(x)
        # ties go to REAL
        return (votes > len(self.params["trees"]) / 2).astype(np.int64)

    def decision_function(self, x) -> np.ndarray:
        if self.kind != "linear-svm":
            raise InvalidInputError("decision_function is only defined for the linear SVM")
        z = _svm_features(np.atleast_2d(x), self.params["mean"], self.params["std"])
        return z @ self.params["w"]

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def _check_binary(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise InvalidInputError("X must be (n, d) with one label per row")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise InvalidInputError("both classes must be present")
    return x, y


def _svm_features(x, mean, std):
    # scaling by 1/sqrt(d) keeps typical sample norms ~1; bias is a constant column
    z = (x - mean) / std / np.sqrt(x.shape[1])
    return np.column_stack([z, np.ones(x.shape[0])])


def train_linear_svm(x, y, epochs: int = 20, lambda_reg: float = 1e-3,
                     rng: Rng | None = None) -> BinaryClassifier:
    """Hinge loss + L2 by Pegasos stochastic subgradient steps of size ``1 / (lambda t)``.

    The returned weights average the iterates of the last epoch.
    """
    x, y = _check_binary(x, y)
    rng = rng if rng is not None else Rng(0, 21)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = _svm_features(x, mean, std)
    s = 2.0 * y - 1.0
    w = np.zeros(z.shape[1])
    radius = 1.0 / np.sqrt(lambda_reg)
    t = 0
    avg = np.zeros_like(w)
    for epoch in range(epochs):
        last = epoch == epochs - 1
        for i in rng.permutation(z.shape[0]):
            t += 1
            eta = 1.0 / (lambda_reg * t)
            margin = s[i] * (z[i] @ w)
            w *= 1.0 - eta * lambda_reg
            if margin < 1.0:
                w += eta * s[i] * z[i]
            norm = np.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
            if last:
                avg += w
    w = avg / z.shape[0]
    return BinaryClassifier("linear-svm", {"mean": mean, "std": std, "w": w})


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # leaf class; -1 on internal nodes

    def predict(self, x) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            inner = self.value[node] < 0
            if not inner.any():
                return self.value[node]
            rows = np.flatnonzero(inner)
            nd = node[rows]
            go_left = x[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])


def _majority(y) -> int:
    return int(np.sum(y) > y.size / 2)


def _best_split(x, y, dims):
    """Lowest weighted-Gini threshold over candidate dims, or ``None`` if nothing splits."""
    n = y.size
    vals = x[:, dims]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    sy = y[order]
    left1 = np.cumsum(sy, axis=0)[:-1]
    nl = np.arange(1, n)[:, None].astype(np.float64)
    nr = n - nl
    right1 = y.sum() - left1
    gini = (nl - (left1**2 + (nl - left1) ** 2) / nl) + (nr - (right1**2 + (nr - right1) ** 2) / nr)
    gini[sv[1:] <= sv[:-1]] = np.inf
    flat = int(np.argmin(gini))
    if not np.isfinite(gini.flat[flat]):
        return None
    pos, j = divmod(flat, len(dims))
    return int(dims[j]), 0.5 * (sv[pos, j] + sv[pos + 1, j]), float(gini.flat[flat])


def _grow_tree(x, y, max_depth, n_candidates, rng) -> DecisionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-1)
        return len(value) - 1

    root = new_node()
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        pure = ys.min() == ys.max()
        split = None
        if not pure and depth < max_depth and idx.size >= 2:
            dims = rng.choice(x.shape[1], size=n_candidates, replace=False)
            split = _best_split(x[idx], ys, dims)
        if split is None:
            value[node] = _majority(ys)
            continue
        dim, thr, _ = split
        mask = x[idx, dim] <= thr
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = dim, thr, lnode, rnode
        stack.append((rnode, idx[~mask], depth + 1))
        stack.append((lnode, idx[mask], depth + 1))
    return DecisionTree(np.asarray(feature), np.asarray(threshold), np.asarray(left),
                        np.asarray(right), np.asarray(value))


def train_random_forest(x, y, n_trees: int = 100, max_depth: int = 8,
                        rng: Rng | None = None) -> BinaryClassifier:
    """Bagged Gini trees with ``sqrt(d)`` candidate dims per node; majority vote.

    Tree ``i`` draws from its own sub-stream ``rng.split(i)`` so results do not
    depend on the order in which trees are grown.
    """
    x, y = _check_binary(x, y)
    rng = rng if rng is not None else Rng(0, 22)
    n, d = x.shape
    m = max(1, int(np.sqrt(d)))
    trees = []
    for i in range(n_trees):
        tr = rng.split(i)
        boot = tr.integers(0, n, size=n)
        trees.append(_grow_tree(x[boot], y[boot], max_depth, m, tr))
    return BinaryClassifier("random-forest", {"trees": trees})


# --- real vs generated ---------------------------------------------------------------


@dataclass(frozen=True)
class RealFakeResult:
    svm_accuracy: float
    forest_accuracy: float
    n_train: int
    n_test: int
    bins: int

    def to_dict(self) -> dict:
        return {"svm_accuracy": self.svm_accuracy, "forest_accuracy": self.forest_accuracy,
                "n_train": self.n_train, "n_test": self.n_test, "bins": self.bins}


def grouped_split(x, train_frac: float, rng: Rng):
    """80/20-style split that keeps bit-identical feature rows on the same side.

    Rows are grouped by exact equality and whole groups are dealt, in shuffled
    order, to the training side until it holds ``round(train_frac * n)`` rows.
    Without duplicates this is a uniform shuffle-and-cut.  With duplicates it
    prevents a copy of a test row from sitting in the training set, possibly
    under the other label, which a memorizing classifier would exploit.
    """
    n = x.shape[0]
    target = int(round(train_frac * n))
    if not 0 < target < n:
        raise InvalidInputError("split leaves one side empty")
    _, group = np.unique(x, axis=0, return_inverse=True)
    group = group.ravel()
    order = rng.permutation(group.max() + 1)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    # rows sorted by their group's shuffled rank; a stable sort keeps groups contiguous
    rows = np.argsort(rank[group], kind="stable")
    sizes = np.bincount(group)[order]
    cut_groups = int(np.searchsorted(np.cumsum(sizes), target))
    n_train = int(np.sum(sizes[:cut_groups + 1])) if cut_groups < sizes.size else n
    if n_train >= n:
        n_train = int(np.sum(sizes[:cut_groups]))
    if n_train == 0:
        raise InvalidInputError("split leaves one side empty")
    return rows[:n_train], rows[n_train:]


def real_fake_experiment(real, generated, b: int = DEFAULT_BINS, rng: Rng | None = None,
                         train_frac: float = 0.8, svm_epochs: int = 20,
                         lambda_reg: float = 1e-3, n_trees: int = 100,
                         max_depth: int = 8) -> RealFakeResult:
    """Held-out accuracy of SVM and forest separating real from generated histograms."""
    if real.side != generated.side:
        raise InvalidInputError(f"image sides differ: {real.side} vs {generated.side}")
    rng = rng if rng is not None else Rng(0, 23)
    x = np.concatenate([histogram_rows(real.images, b), histogram_rows(generated.images, b)])
    y = np.concatenate([np.full(real.n, REAL), np.full(generated.n, GENERATED)])
    tr, te = grouped_split(x, train_frac, rng.split(0))
    svm = train_linear_svm(x[tr], y[tr], svm_epochs, lambda_reg, rng.split(1))
    forest = train_random_forest(x[tr], y[tr], n_trees, max_depth, rng.split(2))
    return RealFakeResult(svm.accuracy(x[te], y[te]), forest.accuracy(x[te], y[te]),
                          int(tr.size), int(te.size), int(b))


def class_frequency_concentration(h: ClassHistogram) -> float:
    return float(np.max(h.frequencies))
