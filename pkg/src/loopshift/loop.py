"""Loop-training, the long-training control and the per-iteration metric timeline.

Iteration ``t`` fits a fresh model on ``D_t`` and samples ``D_{t+1}`` of the
same size as the real data ``D_0``.  Every iteration is measured against
references computed once from ``D_0``: the real mean colour histogram and the
feature statistics of a classifier trained on real data and then frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import Dataset, LabeledDataset, SynthConfig, read_records, synth_dataset
from .detectors import cluster_frequencies, kmeans, real_fake_experiment
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .hist import (ClassHistogram, ColorHistogram, class_histogram, histogram_rows,
                   mean_color_histogram)
from .measures import (FeatureStats, class_coverage, color_kl, feature_stats, frechet,
                       intra_class_variance, mean_gauss_alpha_kl, r_squared)
from .models.classifier import Classifier, ClassifierConfig, train_classifier
from .models.gan import GanConfig, GanTrainer
from .models.generators import Generator, bootstrap_fit, em_iterate, gmm_fit
from .numkit import Rng

log = logging.getLogger(__name__)

MODEL_KINDS = ("bootstrap", "gmm", "gan")
TIMELINE_COLUMNS = ("iteration", "fcd", "color_kl", "gauss_alpha_kl", "class_coverage",
                    "intra_class_var", "realfake_svm", "realfake_forest")
SCHEMA_VERSION = 1

# stream ids under the run seed
_S_CLASSIFIER, _S_FIT, _S_SAMPLE, _S_DETECT, _S_CLUSTER = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class LoopConfig:
    """Flat run configuration; every field maps 1:1 to a JSON key."""

    seed: int
    iterations: int = 6
    model: str = "gmm"
    # dataset: synthetic unless dataset_path is set
    num_classes: int = 4
    images_per_class: int = 500
    side: int = 8
    pixel_noise_sigma: float = 0.05
    dataset_path: str | None = None
    # measures
    bins: int = 32
    eps: float = 1e-6
    # bootstrap / gmm
    bootstrap_noise: float = 0.0
    gmm_k: int = 2
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6
    # gan
    gan_steps: int = 5000
    gan_latent_dim: int = 32
    gan_hidden: int = 128
    gan_loss: str = "non-saturating"
    gan_gp_lambda: float = 10.0
    gan_spectral_norm: bool = False
    gan_sn_power_iters: int = 20
    gan_batch_size: int = 64
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    gan_beta2: float = 0.999
    gan_adam_eps: float = 1e-8
    gan_d_steps_per_g: int | None = None
    # reference classifier
    clf_steps: int = 1500
    clf_lr: float = 1e-3
    clf_batch_size: int = 64
    # metric toggles and detector settings
    metric_gauss: bool = True
    metric_realfake: bool = True
    metric_clusters: bool = True
    svm_epochs: int = 20
    svm_lambda: float = 1e-3
    forest_trees: int = 100
    forest_depth: int = 8
    cluster_k: tuple = (10, 15)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        if self.model not in MODEL_KINDS:
            raise ConfigError("model", f"must be one of {MODEL_KINDS}")
        if self.bins < 2:
            raise ConfigError("bins", "must be >= 2")
        if self.eps <= 0:
            raise ConfigError("eps", "must be > 0")
        object.__setattr__(self, "cluster_k", tuple(int(k) for k in self.cluster_k))

    def gan_config(self) -> GanConfig:
        return GanConfig(latent_dim=self.gan_latent_dim, hidden=self.gan_hidden,
                         loss_kind=self.gan_loss, gp_lambda=self.gan_gp_lambda,
                         spectral_norm=self.gan_spectral_norm,
                         sn_power_iters=self.gan_sn_power_iters, steps=self.gan_steps,
                         batch_size=self.gan_batch_size, lr=self.gan_lr, beta1=self.gan_beta1,
                         beta2=self.gan_beta2, adam_eps=self.gan_adam_eps,
                         d_steps_per_g=self.gan_d_steps_per_g, seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.num_classes, self.images_per_class, self.side,
                           self.pixel_noise_sigma, self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cluster_k"] = list(self.cluster_k)
        return d

    def replace(self, **changes) -> "LoopConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class IterationMetrics:
    iteration: int
    fcd: float
    color_kl: float
    gauss_alpha_kl: float
    class_coverage: int
    class_histogram: ClassHistogram
    intra_class_variance: float
    realfake_svm: float
    realfake_forest: float
    loss_summary: dict = field(default_factory=dict)
    mean_histogram: ColorHistogram | None = None
    cluster_freqs: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.iteration, self.fcd, self.color_kl, self.gauss_alpha_kl, self.class_coverage,
                self.intra_class_variance, self.realfake_svm, self.realfake_forest]


@dataclass
class Reference:
    """Measuring stick computed once from the real data; arrays are read-only."""

    classifier: Classifier
    features: FeatureStats
    mean_histogram: ColorHistogram
    class_histogram: ClassHistogram
    gauss_alpha_kl: float
    intra_class_variance: float
    clusters: dict                 # k -> KmeansResult on real histograms

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.features.mean, self.features.cov, self.mean_histogram.values,
                  self.class_histogram.frequencies, *self.classifier.net.params()):
            h.update(np.ascontiguousarray(a).tobytes())
        for k in sorted(self.clusters):
            h.update(self.clusters[k].centroids.tobytes())
        return h.hexdigest()


@dataclass
class Timeline:
    config: LoopConfig
    kind: str                      # "loop" or "long"
    reference: Reference
    iterations: list = field(default_factory=list)
    error: dict | None = None
    datasets: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        idx = TIMELINE_COLUMNS.index(name)
        return np.array([m.row()[idx] for m in self.iterations], dtype=np.float64)


# --- data and references -------------------------------------------------------------


def load_real(cfg: LoopConfig) -> LabeledDataset:
    if cfg.dataset_path is None:
        return synth_dataset(cfg.synth_config())
    sidecar = cfg.dataset_path + ".json"
    side, num_classes = cfg.side, None
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            meta = json.load(fh)
        side, num_classes = meta.get("side", side), meta.get("num_classes")
    dataset, labels = read_records(cfg.dataset_path, side)
    if labels is None:
        raise InvalidInputError(f"{cfg.dataset_path}: real data must be labeled")
    return LabeledDataset(dataset, labels, num_classes or int(labels.max()) + 1)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def build_reference(real: LabeledDataset, cfg: LoopConfig) -> Reference:
    clf_cfg = ClassifierConfig(steps=cfg.clf_steps, lr=cfg.clf_lr, batch_size=cfg.clf_batch_size)
    clf = train_classifier(real, clf_cfg, Rng(cfg.seed, _S_CLASSIFIER))
    _freeze(*clf.net.params())
    feats = feature_stats(clf.features(real.images))
    hist = mean_color_histogram(real.dataset, cfg.bins)
    chist = class_histogram(real.labels, real.num_classes)
    _freeze(hist.values, chist.frequencies)
    gauss = mean_gauss_alpha_kl(hist, cfg.eps) if cfg.metric_gauss else math.nan
    icv = intra_class_variance(real, cfg.bins)
    clusters = {}
    if cfg.metric_clusters:
        rows = histogram_rows(real.images, cfg.bins)
        for k in cfg.cluster_k:
            res = kmeans(rows, min(k, rows.shape[0]), Rng(cfg.seed, (_S_CLUSTER, k)))
            _freeze(res.centroids, res.assignments)
            clusters[k] = res
    return Reference(clf, feats, hist, chist, gauss, icv, clusters)


def measure(generated: Dataset, real: LabeledDataset, ref: Reference, cfg: LoopConfig,
            t: int, loss_summary=None) -> IterationMetrics:
    """All shift metrics of one generated dataset against the frozen references."""
    clf = ref.classifier
    fcd = frechet(ref.features, feature_stats(clf.features(generated.images)))
    hist = mean_color_histogram(generated, cfg.bins)
    ckl = color_kl(hist, ref.mean_histogram, cfg.eps)
    gauss = mean_gauss_alpha_kl(hist, cfg.eps) if cfg.metric_gauss else math.nan
    pred = clf.predict(generated.images)
    chist = class_histogram(pred, clf.num_classes)
    coverage = class_coverage(chist)
    icv = intra_class_variance(generated, cfg.bins, labels=pred)
    svm_acc = forest_acc = math.nan
    if cfg.metric_realfake:
        rf = real_fake_experiment(real.dataset, generated, cfg.bins, Rng(cfg.seed, (_S_DETECT, t)),
                                  svm_epochs=cfg.svm_epochs, lambda_reg=cfg.svm_lambda,
                                  n_trees=cfg.forest_trees, max_depth=cfg.forest_depth)
        svm_acc, forest_acc = rf.svm_accuracy, rf.forest_accuracy
    freqs = {}
    if ref.clusters:
        rows = histogram_rows(generated.images, cfg.bins)
        for k, res in ref.clusters.items():
            freqs[k] = cluster_frequencies(res, rows)[1].frequencies
    return IterationMetrics(t, fcd, ckl, gauss, coverage, chist, icv, svm_acc, forest_acc,
                            dict(loss_summary or {}), hist, freqs)


# --- model fitting -------------------------------------------------------------------


class _Model:
    """Uniform handle over the three generator kinds so phases can be resumed."""

    def __init__(self, data: Dataset, cfg: LoopConfig, rng: Rng):
        self.cfg, self.rng, self.data = cfg, rng, data
        self.trainer = None
        self.gen: Generator | None = None

    def train_phase(self) -> None:
        cfg = self.cfg
        if cfg.model == "bootstrap":
            self.gen = bootstrap_fit(self.data, cfg.bootstrap_noise)
        elif cfg.model == "gmm":
            if self.gen is None:
                self.gen = gmm_fit(self.data, cfg.gmm_k, self.rng, cfg.gmm_max_iters, cfg.gmm_tol)
            else:
                more = em_iterate(self.gen.payload, self.data.flat(), self.rng,
                                  cfg.gmm_max_iters, cfg.gmm_tol)
                self.gen.loss_trace = np.concatenate([self.gen.loss_trace, more])
        else:
            if self.trainer is None:
                self.trainer = GanTrainer(self.data, cfg.gan_config(), self.rng)
            self.trainer.train(cfg.gan_steps)
            self.gen = self.trainer.generator()

    def loss_summary(self) -> dict:
        trace = self.gen.loss_trace
        if self.cfg.model == "gan" and len(trace):
            tail = trace[-max(1, len(trace) // 10):]
            return {"d_loss": float(tail[:, 0].mean()), "g_loss": float(tail[:, 1].mean()),
                    "steps": int(len(trace))}
        if self.cfg.model == "gmm":
            return {"log_likelihood": float(trace[-1]), "em_iters": int(len(trace))}
        return {}


def _run(cfg: LoopConfig, kind: str, keep_datasets: bool) -> Timeline:
    real = load_real(cfg)
    ref = build_reference(real, cfg)
    fingerprint = ref.fingerprint()
    timeline = Timeline(cfg, kind, ref)
    n = real.n
    current = real.dataset
    model = None
    for t in range(cfg.iterations):
        try:
            if kind == "loop" or model is None:
                # loop: fresh model on the previous output; long: one model on real data
                model = _Model(current, cfg, Rng(cfg.seed, (_S_FIT, t)))
            model.train_phase()
        except TrainingDivergedError as exc:
            log.warning("iteration %d diverged: %s", t, exc)
            timeline.error = {"iteration": t, "step": exc.step, "message": str(exc)}
            break
        generated = model.gen.sample(n, Rng(cfg.seed, (_S_SAMPLE, t)))
        metrics = measure(generated, real, ref, cfg, t, model.loss_summary())
        log.info("%s t=%d fcd=%.4f color_kl=%.4f coverage=%d", kind, t, metrics.fcd,
                 metrics.color_kl, metrics.class_coverage)
        timeline.iterations.append(metrics)
        if keep_datasets:
            timeline.datasets.append(generated)
        if kind == "loop":
            current = generated
    if ref.fingerprint() != fingerprint:
        raise AssertionError("reference statistics changed during the run")
    return timeline


def run_loop(cfg: LoopConfig, keep_datasets: bool = False) -> Timeline:
    """Loop-training: each iteration trains a fresh model on the previous iteration's samples."""
    return _run(cfg, "loop", keep_datasets)


def run_long_training(cfg: LoopConfig, keep_datasets: bool = False) -> Timeline:
    """Control run: one model trained on real data for ``iterations`` budgets, checkpointed."""
    return _run(cfg, "long", keep_datasets)


def correlate(t: Timeline) -> float:
    """R^2 between the FCD and colour-KL columns over iterations with finite values."""
    fcd, kl = t.column("fcd"), t.column("color_kl")
    ok = np.isfinite(fcd) & np.isfinite(kl)
    if ok.sum() < 2:
        raise InvalidInputError("correlate needs at least 2 iterations with valid metrics")
    return r_squared(fcd[ok], kl[ok])


# --- persistence ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_timeline(t: Timeline, out_dir, manifest: bool = True) -> dict:
    """timeline.csv, class_hist_<t>.csv and manifest.json; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"timeline": os.path.join(out_dir, "timeline.csv")}
    with open(paths["timeline"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for m in t.iterations:
            w.writerow([_fmt(v) for v in m.row()])
    paths["class_hist"] = []
    for m in t.iterations:
        p = os.path.join(out_dir, f"class_hist_{m.iteration}.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "frequency"])
            for c, f in enumerate(m.class_histogram.frequencies):
                w.writerow([c, _fmt(f)])
        paths["class_hist"].append(p)
    if not manifest:
        return paths
    paths["manifest"] = os.path.join(out_dir, "manifest.json")
    write_manifest(paths["manifest"], {"command": "loop", "kind": t.kind,
                                       "config": t.config.to_dict(), "seed": t.config.seed,
                                       "error": t.error})
    return paths


def write_manifest(path, payload: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "version": __version__, **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_timeline_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in TIMELINE_COLUMNS}
