"""Command-line entry point: ``synth``, ``loop``, ``detect`` and ``analyze``.

Configuration is a flat JSON object whose keys are the :class:`LoopConfig`
fields.  Any field can be overridden on the command line as ``--key value``
(``--gan-steps 1000`` and ``--gan_steps 1000`` are equivalent).  A manifest
written by ``loop`` is itself a valid config file.

Exit codes: 0 success, 1 runtime or numeric error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .data import (LabeledDataset, read_records, sidecar_path, synth_dataset, write_records)
from .detectors import real_fake_experiment
from .errors import ConfigError, FormatError, InvalidInputError, NumericError
from .hist import write_histogram_csv
from .loop import (SCHEMA_VERSION, LoopConfig, Timeline, build_reference, correlate, load_real,
                   measure, run_long_training, run_loop, write_timeline)
from .measures import ShiftReport, gauss_alpha_kl
from .numkit import Rng, pca_project

log = logging.getLogger("loopshift")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
PCA_POINTS_PER_SET = 200


# --- configuration -------------------------------------------------------------------


def _field_types() -> dict:
    return {f.name: str(f.type) for f in dataclasses.fields(LoopConfig)}


def _coerce(name: str, kind: str, value):
    """Convert a JSON value or a command-line string to the field's type."""
    from_cli = isinstance(value, str)
    base = kind.replace(" | None", "")
    if value is None or (from_cli and value.lower() in ("none", "null")):
        if "None" in kind:
            return None
        raise ConfigError(name, "may not be null")
    try:
        if base == "bool":
            if from_cli and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            if isinstance(value, bool):
                return value
            raise ValueError
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if base == "tuple":
            if from_cli:
                value = [v for v in value.replace(",", " ").split()]
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(name, f"expected {base}, got {value!r}")


def load_config_file(path) -> dict:
    """Read a flat JSON config (or a run manifest) with line/column diagnostics."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path}: top level must be a JSON object")
    if "schema_version" in doc and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    return doc


def resolve_config(file_values: dict, overrides: dict) -> LoopConfig:
    """Merge file values and overrides into a validated :class:`LoopConfig`."""
    types = _field_types()
    merged = {}
    for source in (file_values, overrides):
        for key, value in source.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ConfigError(name, "unknown configuration field")
            merged[name] = _coerce(name, types[name], value)
    if merged.get("seed") is None:
        raise ConfigError("seed", "required field is missing (set it in the config or pass --seed)")
    return LoopConfig(**merged)


def _parse_overrides(extra: list) -> dict:
    """``--key value`` pairs left over by argparse."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(tok, "expected --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key.replace("-", "_"), "missing value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _config_from_args(args, extra) -> LoopConfig:
    values = load_config_file(args.config) if args.config else {}
    overrides = _parse_overrides(extra)
    for name in ("seed", "iterations", "model"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = str(v)
    return resolve_config(values, overrides)


# --- manifests and plot data -----------------------------------------------------------


def write_run_manifest(path, command: str, cfg: LoopConfig, outputs: dict, **extra) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "outputs": outputs,
        **extra,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows) -> str:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_plot_data(t: Timeline, out_dir) -> dict:
    """CSV series for the FCD curve, KL-vs-FCD scatter, alpha-KL curves, clusters and PCA."""
    d = os.path.join(out_dir, "plots")
    os.makedirs(d, exist_ok=True)
    its = t.iterations
    eps = t.config.eps
    paths = {}
    paths["fcd_curve"] = _write_csv(os.path.join(d, "fcd_curve.csv"), ["iteration", "fcd"],
                                    [[m.iteration, _num(m.fcd)] for m in its])
    r2 = correlate(t) if len(its) >= 2 else float("nan")
    paths["kl_vs_fcd"] = _write_csv(os.path.join(d, "kl_vs_fcd.csv"),
                                    ["iteration", "fcd", "color_kl", "r_squared"],
                                    [[m.iteration, _num(m.fcd), _num(m.color_kl), _num(r2)]
                                     for m in its])
    if t.config.metric_gauss:
        def channel_row(label, hist):
            per = [gauss_alpha_kl(hist.channel(c), eps) for c in range(3)]
            return [label, *map(_num, per), _num(np.mean(per))]

        rows = [channel_row("real", t.reference.mean_histogram)]
        rows += [channel_row(m.iteration, m.mean_histogram) for m in its]
        paths["alpha_kl_curve"] = _write_csv(os.path.join(d, "alpha_kl_curve.csv"),
                                             ["iteration", "r", "g", "b", "mean"], rows)
    hists = [t.reference.mean_histogram] + [m.mean_histogram for m in its]
    paths["mean_histograms"] = os.path.join(d, "mean_histograms.csv")
    write_histogram_csv(paths["mean_histograms"], hists, ["real"] + [m.iteration for m in its])
    loss_keys = sorted({k for m in its for k in m.loss_summary})
    paths["loss_summary"] = _write_csv(
        os.path.join(d, "loss_summary.csv"), ["iteration", *loss_keys],
        [[m.iteration, *(m.loss_summary.get(k, "") for k in loss_keys)] for m in its])
    for k, res in sorted(t.reference.clusters.items()):
        own = np.bincount(res.assignments, minlength=res.k) / res.assignments.size
        rows = [["real", *map(_num, own)]]
        rows += [[m.iteration, *map(_num, m.cluster_freqs[k])] for m in its if k in m.cluster_freqs]
        paths[f"cluster_freq_k{k}"] = _write_csv(
            os.path.join(d, f"cluster_freq_k{k}.csv"),
            ["iteration", *(f"c{j}" for j in range(res.k))], rows)
    if t.datasets and t.reference.clusters:
        paths.update(_write_pca(t, d))
    return paths


def _write_pca(t: Timeline, d) -> dict:
    from .hist import histogram_rows

    b = t.config.bins
    real = load_real(t.config)
    sets = [("real", "", histogram_rows(real.images[:PCA_POINTS_PER_SET], b))]
    for i, g in enumerate(t.datasets):
        sets.append(("generated", i, histogram_rows(g.images[:PCA_POINTS_PER_SET], b)))
    out = {}
    for k, res in sorted(t.reference.clusters.items()):
        blocks = [("centroid", "", res.centroids)] + sets
        proj = pca_project(np.vstack([x for _, _, x in blocks]), 2)
        rows, start = [], 0
        for source, it, x in blocks:
            for j in range(x.shape[0]):
                rows.append([source, it, _num(proj[start + j, 0]), _num(proj[start + j, 1])])
            start += x.shape[0]
        out[f"pca_k{k}"] = _write_csv(os.path.join(d, f"pca_k{k}.csv"),
                                      ["source", "iteration", "x", "y"], rows)
    return out


# --- commands -------------------------------------------------------------------------


def cmd_synth(args, extra) -> int:
    cfg = _config_from_args(args, extra)
    data = synth_dataset(cfg.synth_config())
    try:
        write_records(args.out, data)
        with open(sidecar_path(args.out), "w") as fh:
            json.dump({"side": cfg.side, "num_classes": cfg.num_classes, "n": data.n,
                       "seed": cfg.seed, "version": __version__}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {args.out}: {exc.strerror}") from exc
    print(json.dumps({"path": args.out, "n": data.n, "side": cfg.side,
                      "bytes": os.path.getsize(args.out)}))
    return EXIT_OK


def _one_loop(job):
    cfg, out_dir, control, save_datasets = job
    kind = "long" if control else "loop"
    outputs = {"timeline": os.path.join(out_dir, "timeline.csv"),
               "manifest": os.path.join(out_dir, "manifest.json")}
    manifest = os.path.join(out_dir, "manifest.json")
    write_run_manifest(manifest, "loop", cfg, outputs, kind=kind, status="running")
    t = (run_long_training if control else run_loop)(cfg, keep_datasets=True)
    paths = write_timeline(t, out_dir, manifest=False)
    outputs.update(paths)
    outputs["plots"] = write_plot_data(t, out_dir)
    if save_datasets:
        outputs["datasets"] = []
        for i, g in enumerate(t.datasets):
            p = os.path.join(out_dir, f"generated_{i}.bin")
            write_records(p, g)
            with open(sidecar_path(p), "w") as fh:
                json.dump({"side": g.side, "n": g.n}, fh)
            outputs["datasets"].append(p)
    r2 = correlate(t) if len(t.iterations) >= 2 else None
    write_run_manifest(manifest, "loop", cfg, outputs, kind=kind, error=t.error,
                       r_squared_fcd_kl=r2, status="diverged" if t.error else "complete")
    return out_dir, len(t.iterations), t.error


def cmd_loop(args, extra) -> int:
    cfg = _config_from_args(args, extra)
    seeds = args.seeds or [cfg.seed]
    if len(seeds) == 1 and not args.seeds:
        jobs = [(cfg, args.out, args.control, args.save_datasets)]
    else:
        jobs = [(cfg.replace(seed=s), os.path.join(args.out, f"seed_{s}"), args.control,
                 args.save_datasets) for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_one_loop, jobs))
    else:
        results = [_one_loop(j) for j in jobs]
    failed = False
    for out_dir, n, err in results:
        print(json.dumps({"out": out_dir, "iterations": n, "error": err}))
        failed |= err is not None
    return EXIT_RUNTIME if failed else EXIT_OK


def _read_any(path, side_hint=None):
    side = side_hint
    sc = sidecar_path(path)
    if side is None and os.path.exists(sc):
        with open(sc) as fh:
            side = json.load(fh).get("side")
    if side is None:
        raise InvalidInputError(f"{path}: image side unknown (no sidecar JSON); pass --side")
    return read_records(path, int(side))


def cmd_detect(args, extra) -> int:
    if extra:
        raise ConfigError(extra[0], "unknown option")
    real, _ = _read_any(args.real, args.side)
    gen, _ = _read_any(args.generated, args.side)
    res = real_fake_experiment(real, gen, args.bins, Rng(args.seed, 4), svm_epochs=args.svm_epochs,
                               n_trees=args.trees, max_depth=args.depth)
    text = json.dumps(res.to_dict(), sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_analyze(args, extra) -> int:
    cfg = _config_from_args(args, extra)
    ds, labels = _read_any(args.real, args.side)
    if labels is None:
        raise InvalidInputError(f"{args.real}: real data must be labeled")
    real = LabeledDataset(ds, labels, int(labels.max()) + 1)
    ref = build_reference(real, cfg)
    rows, reports = [], []
    for i, path in enumerate(args.generated):
        gen, _ = _read_any(path, args.side)
        m = measure(gen, real, ref, cfg, i)
        per = [gauss_alpha_kl(m.mean_histogram.channel(c), cfg.eps) for c in range(3)]
        rep = ShiftReport(m.color_kl, per, m.fcd, m.class_coverage, m.intra_class_variance,
                          m.realfake_forest)
        rows.append([path, *(_num(v) if isinstance(v, float) else v for v in rep.csv_row())])
        reports.append({"path": path, **rep.to_dict(), "realfake_svm": m.realfake_svm})
    out = args.out or "analysis.csv"
    _write_csv(out, ["path", *ShiftReport.FIELDS], rows)
    print(json.dumps(reports, sort_keys=True))
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopshift", description=__doc__.splitlines()[0],
                                epilog="Any config field may be overridden with --key value.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset as binary records")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("loop", help="run loop-training (or the long-training control)")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--control", action="store_true", help="long-training control instead")
    s.add_argument("--iterations", type=int)
    s.add_argument("--model", choices=["bootstrap", "gmm", "gan"])
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", type=int, nargs="+", help="independent runs under out/seed_<k>")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs across seeds")
    s.add_argument("--save-datasets", action="store_true")
    s.set_defaults(func=cmd_loop)

    s = sub.add_parser("detect", help="real vs generated single-sample detectability")
    s.add_argument("real")
    s.add_argument("generated")
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--side", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--svm-epochs", type=int, default=20)
    s.add_argument("--trees", type=int, default=100)
    s.add_argument("--depth", type=int, default=8)
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("analyze", help="recompute shift measures on stored datasets")
    s.add_argument("--config")
    s.add_argument("--real", required=True)
    s.add_argument("--generated", nargs="+", required=True)
    s.add_argument("--side", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="CSV path (default analysis.csv)")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"loopshift: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, FormatError, NumericError, OSError) as exc:
        print(f"loopshift: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
