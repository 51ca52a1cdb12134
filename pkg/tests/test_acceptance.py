"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The verdict lines are collected in ``conftest.ACCEPTANCE_LINES`` and shown in the
pytest terminal summary.  Loop timelines and curves are written under
``$LOOPSHIFT_ACCEPT_OUT`` (default ``runs/acceptance``) so failures can be inspected.

    pytest tests/test_acceptance.py -v
"""

import hashlib
import json
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from loopshift.cli import main
from loopshift.data import (CIFAR_SIDE, SynthConfig, load_cifar10_batch, read_records,
                            synth_dataset, write_records)
from loopshift.detectors import real_fake_experiment
from loopshift.loop import (LoopConfig, correlate, read_timeline_csv, run_long_training, run_loop,
                            write_timeline)
from loopshift.measures import (FeatureStats, frechet, gauss_alpha_kl, gaussian_fit, kl,
                                r_squared)
from loopshift.models.generators import bootstrap_fit
from loopshift.models.mlp import init_mlp, mlp_forward, mlp_grad
from loopshift.numkit import Rng, sqrtm_psd, sym_eigen

SEEDS = (1, 2, 3, 4, 5)
OUT = os.environ.get("LOOPSHIFT_ACCEPT_OUT",
                     os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                  "runs", "acceptance"))
CIFAR_BATCH = os.environ.get("CIFAR10_BATCH", os.path.join(os.path.dirname(__file__), "data",
                                                           "data_batch_1.bin"))

# TinyGAN, non-saturating loss, 1000 generator steps per iteration (see README)
GAN = dict(model="gan", gan_steps=1000, gan_loss="non-saturating", gan_spectral_norm=True)
# the GMM check only needs fcd and color_kl; the other detectors are switched off for speed
GMM_FAST = dict(model="gmm", gmm_k=2, metric_realfake=False, metric_clusters=False,
                metric_gauss=False)


def verdict(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[num] = line
    print(line)


def count(flags) -> int:
    return int(sum(bool(f) for f in flags))


def fmt(values) -> str:
    return "[" + ", ".join(f"{v:.4g}" for v in values) + "]"


# --- 1. numerical kernels ------------------------------------------------------------


def test_criterion_01_numerical_kernels():
    start = time.perf_counter()
    rng = Rng(101)
    eig_err = sqrt_err = 0.0
    for n in (1, 2, 3, 5, 8, 16, 32, 64):
        for _ in range(3):
            b = rng.normal(size=(n, n))
            a = (b + b.T) / 2
            w, v = sym_eigen(a)
            scale = max(np.abs(a).max(), 1e-300)
            eig_err = max(eig_err, np.abs(v @ np.diag(w) @ v.T - a).max() / scale)
            psd = b @ b.T
            s = sqrtm_psd(psd)
            sqrt_err = max(sqrt_err, np.linalg.norm(s @ s - psd) / np.linalg.norm(psd))
    fr_err = 0.0
    for _ in range(100):
        m1, m2 = rng.normal(size=2) * 3
        s1, s2 = rng.uniform(0.01, 5, size=2)
        d = frechet(FeatureStats(np.array([m1]), np.array([[s1 * s1]])),
                    FeatureStats(np.array([m2]), np.array([[s2 * s2]])))
        fr_err = max(fr_err, abs(d - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    elapsed = time.perf_counter() - start
    ok = eig_err <= 1e-9 and sqrt_err <= 1e-7 and fr_err <= 1e-9 and elapsed < 10
    verdict(1, ok, f"eig recon {eig_err:.2e} (<=1e-9), sqrtm rel {sqrt_err:.2e} (<=1e-7), "
                   f"1-D frechet {fr_err:.2e} (<=1e-9), {elapsed:.2f} s (<10)")
    assert ok


# --- 2. gradients --------------------------------------------------------------------


def _central_diff(f, a, h=1e-5):
    g = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        old = a[i]
        a[i] = old + h
        fp = f()
        a[i] = old - h
        fm = f()
        a[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def test_criterion_02_gradients():
    start = time.perf_counter()
    archs = [([5, 7, 3], ["tanh", "identity"]),
             ([4, 6, 6, 2], ["leaky_relu", "tanh", "sigmoid"]),
             ([6, 5, 4, 1], ["sigmoid", "leaky_relu", "identity"])]
    worst = 0.0
    for sizes, acts in archs:
        for seed in (1, 2, 3):
            rng = Rng(seed, 200)
            net = init_mlp(sizes, acts, rng)
            x = rng.normal(size=(3, sizes[0]))
            up = rng.normal(size=(3, sizes[-1]))

            def f():
                return float(np.sum(up * mlp_forward(net, x)[0]))

            grads, gx = mlp_grad(net, x, up)
            for a, g in zip(net.params() + [x], grads + [gx]):
                n = _central_diff(f, a)
                rel = np.abs(g - n) / np.maximum(np.abs(g) + np.abs(n), 1e-6)
                worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    verdict(2, ok, f"max rel err {worst:.2e} (<1e-4) over 3 archs x 3 seeds, "
                   f"params and inputs, {elapsed:.2f} s (<30)")
    assert ok


# --- 3. measure properties -----------------------------------------------------------


def _binned_normal(mu, sigma, b=32):
    edges = np.linspace(0, 1, b + 1)
    m = np.diff(stats.norm.cdf(edges, mu, sigma))
    return m / m.sum()


def test_criterion_03_measure_properties():
    start = time.perf_counter()
    rng = Rng(303)
    kl_ok = True
    alphas = []
    for _ in range(1000):
        p, q = rng.random(32) ** 3, rng.random(32) ** 3
        p, q = p / p.sum(), q / q.sum()
        kl_ok &= kl(p, q) > 0 and kl(p, p) == 0.0 and kl(q, q) == 0.0
    for _ in range(200):
        h = rng.random(32) ** rng.uniform(0.5, 8)
        alphas.append(gaussian_fit(h / h.sum()).alpha)
    worst_gauss = 0.0
    for mu in np.linspace(0.1, 0.9, 9):
        for sigma in (0.02, 0.05, 0.1, 0.2, 0.3):
            h = _binned_normal(mu, sigma)
            alphas.append(gaussian_fit(h).alpha)
            worst_gauss = max(worst_gauss, gauss_alpha_kl(h))
    alpha_ok = min(alphas) >= 1.0 and max(alphas) <= 10.0
    elapsed = time.perf_counter() - start
    ok = kl_ok and alpha_ok and worst_gauss < 1e-3 and elapsed < 10
    verdict(3, ok, f"KL nonneg/zero-iff-equal on 1000 pairs: {kl_ok}; alpha in "
                   f"[{min(alphas):.3f}, {max(alphas):.3f}] (within [1,10]); "
                   f"max gauss_alpha_kl on Gaussian bins {worst_gauss:.2e} (<1e-3); "
                   f"{elapsed:.2f} s (<10)")
    assert ok


# --- loop runs shared by criteria 4-9 ------------------------------------------------


@pytest.fixture(scope="module")
def gan_runs():
    runs, loop_seconds = {}, 0.0
    for seed in SEEDS:
        cfg = LoopConfig(seed=seed, **GAN)
        start = time.perf_counter()
        loop = run_loop(cfg)
        loop_seconds += time.perf_counter() - start
        long = run_long_training(cfg)
        write_timeline(loop, os.path.join(OUT, "gan", f"loop_seed{seed}"))
        write_timeline(long, os.path.join(OUT, "gan", f"long_seed{seed}"))
        runs[seed] = (loop, long)
    return runs, loop_seconds


@pytest.fixture(scope="module")
def gmm_runs():
    runs, seconds = {}, 0.0
    for seed in SEEDS:
        start = time.perf_counter()
        runs[seed] = run_loop(LoopConfig(seed=seed, **GMM_FAST))
        seconds += time.perf_counter() - start
        write_timeline(runs[seed], os.path.join(OUT, "gmm", f"loop_seed{seed}"))
    return runs, seconds


def _rises(t, col) -> bool:
    v = t.column(col)
    return len(v) == 6 and v[5] > v[0]


def test_criterion_04_loop_demotion(gan_runs, gmm_runs):
    runs, gan_seconds = gan_runs
    gmm, gmm_seconds = gmm_runs
    gan_hits = count(_rises(lp, "fcd") and _rises(lp, "color_kl") for lp, _ in runs.values())
    gmm_hits = count(_rises(t, "fcd") and _rises(t, "color_kl") for t in gmm.values())
    ok = gan_hits >= 4 and gan_seconds < 15 * 60 and gmm_hits >= 4 and gmm_seconds < 60
    curves = "; ".join(f"seed {s}: fcd {fmt(lp.column('fcd'))} kl {fmt(lp.column('color_kl'))}"
                       for s, (lp, _) in runs.items())
    verdict(4, ok, f"TinyGAN fcd and color_kl rise in {gan_hits}/5 seeds (>=4) in "
                   f"{gan_seconds:.0f} s (<900); GMM variant {gmm_hits}/5 (>=4) in "
                   f"{gmm_seconds:.1f} s (<60); {curves}")
    assert ok


def test_criterion_05_long_training_control(gan_runs):
    runs, _ = gan_runs
    pairs = {s: (long.column("fcd")[-1], lp.column("fcd")[-1]) for s, (lp, long) in runs.items()}
    hits = count(a <= b for a, b in pairs.values())
    ok = hits >= 4
    detail = ", ".join(f"seed {s}: long {a:.3g} vs loop {b:.3g}" for s, (a, b) in pairs.items())
    verdict(5, ok, f"long-run final fcd <= loop iteration-5 fcd in {hits}/5 seeds (>=4); {detail}")
    assert ok


def test_criterion_06_class_collapse(gmm_runs):
    runs, _ = gmm_runs
    cov = {s: t.column("class_coverage") for s, t in runs.items()}
    icv = {s: t.column("intra_class_var") for s, t in runs.items()}
    cov_hits = count(c[5] <= c[0] for c in cov.values())
    icv_hits = count(v[5] < v[0] for v in icv.values())
    ok = cov_hits >= 4 and icv_hits >= 4
    detail = "; ".join(f"seed {s}: coverage {cov[s][0]:.0f}->{cov[s][5]:.0f}, "
                       f"icv {icv[s][0]:.4g}->{icv[s][5]:.4g}" for s in runs)
    verdict(6, ok, f"GMM(K=2) coverage non-increasing in {cov_hits}/5 (>=4), intra-class "
                   f"variance falls in {icv_hits}/5 (>=4); {detail}")
    assert ok


def test_criterion_07_detectability(gan_runs):
    runs, _ = gan_runs
    first = {s: lp.iterations[0] for s, (lp, _) in runs.items()}
    hits = count(m.realfake_svm >= 0.6 and m.realfake_forest >= 0.6 for m in first.values())
    controls = []
    for seed in SEEDS:
        real = synth_dataset(SynthConfig(seed=seed))
        copy = bootstrap_fit(real.dataset).sample(real.n, Rng(seed, 700))
        r = real_fake_experiment(real.dataset, copy, rng=Rng(seed, 701))
        controls.append((r.svm_accuracy, r.forest_accuracy))
    control_ok = all(abs(a - 0.5) <= 0.1 for pair in controls for a in pair)
    ok = hits >= 4 and control_ok
    detail = ", ".join(f"seed {s}: svm {m.realfake_svm:.3f} forest {m.realfake_forest:.3f}"
                       for s, m in first.items())
    ctl = ", ".join(f"({a:.3f}, {b:.3f})" for a, b in controls)
    verdict(7, ok, f"iteration-0 TinyGAN detected (svm and forest >= 0.60) in {hits}/5 (>=4): "
                   f"{detail}; bootstrap-copy control (svm, forest) within 0.5+-0.1: "
                   f"{control_ok} {ctl}")
    assert ok


def test_criterion_08_gaussianization(gan_runs):
    runs, _ = gan_runs
    curves = {s: lp.column("gauss_alpha_kl") for s, (lp, _) in runs.items()}
    hits = count(c[5] < c[0] for c in curves.values())
    ok = hits >= 3
    detail = "; ".join(f"seed {s}: {fmt(c)}" for s, c in curves.items())
    verdict(8, ok, f"mean gauss_alpha_kl at iteration 5 below iteration 0 in {hits}/5 (>=3, "
                   f"soft); curves (also in {os.path.join(OUT, 'gan')}): {detail}")
    assert ok


def test_criterion_09_correlation(gmm_runs, tmp_path):
    runs, _ = gmm_runs
    diffs, values = [], []
    for seed, t in runs.items():
        write_timeline(t, tmp_path / str(seed))
        cols = read_timeline_csv(tmp_path / str(seed) / "timeline.csv")
        manual = r_squared(cols["fcd"], cols["color_kl"])
        got = correlate(t)
        diffs.append(abs(got - manual))
        values.append(got)
    ok = max(diffs) <= 1e-12 and all(math.isfinite(v) for v in values)
    verdict(9, ok, f"correlate vs r_squared on exported CSV: max diff {max(diffs):.1e} "
                   f"(<=1e-12); GMM loop R^2 {fmt(values)} all finite")
    assert ok


# --- 10. format fidelity -------------------------------------------------------------


def test_criterion_10_cifar_roundtrip(tmp_path):
    real = synth_dataset(SynthConfig(side=CIFAR_SIDE, images_per_class=25, num_classes=10))
    write_records(tmp_path / "src.bin", real)
    first, labels = read_records(tmp_path / "src.bin", side=CIFAR_SIDE)
    write_records(tmp_path / "out.bin", first, labels)
    second, labels2 = read_records(tmp_path / "out.bin", side=CIFAR_SIDE)
    same_bytes = (tmp_path / "src.bin").read_bytes() == (tmp_path / "out.bin").read_bytes()
    ok = (same_bytes and np.array_equal(first.images, second.images)
          and np.array_equal(labels, labels2) and (tmp_path / "src.bin").stat().st_size
          == real.n * (1 + 3 * CIFAR_SIDE * CIFAR_SIDE))
    verdict(10, ok, f"load->export->load bit-identical on {real.n} 32x32 records: {same_bytes}; "
                    f"official batch: {'present' if os.path.exists(CIFAR_BATCH) else 'absent'}")
    assert ok


@pytest.mark.skipif(not os.path.exists(CIFAR_BATCH), reason="official CIFAR-10 batch not present")
def test_criterion_10_official_batch():
    d = load_cifar10_batch(CIFAR_BATCH)
    per_class = np.bincount(d.labels, minlength=10)
    ok = d.n == 10000 and np.array_equal(per_class, np.full(10, 1000))
    ACCEPTANCE_LINES[10.5] = (f"criterion 10: {'PASS' if ok else 'FAIL'}  official data_batch_1 "
                              f"loads {d.n} images, per class {per_class.tolist()}")
    assert ok


# --- 11. determinism -----------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11, "iterations": 3, "images_per_class": 100,
                               "clf_steps": 300, "forest_trees": 20, "cluster_k": [4]}))
    assert main(["loop", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    manifest = str(tmp_path / "a" / "manifest.json")
    digests = []
    for run in ("b", "c"):
        assert main(["loop", "--config", manifest, "--out", str(tmp_path / run)]) == 0
        digests.append(hashlib.sha256((tmp_path / run / "timeline.csv").read_bytes()).hexdigest())
    first = hashlib.sha256((tmp_path / "a" / "timeline.csv").read_bytes()).hexdigest()
    ok = digests[0] == digests[1] == first
    verdict(11, ok, f"two cmd_loop runs from one manifest give byte-identical timeline.csv: "
                    f"{ok} (sha256 {digests[0][:12]})")
    assert ok
