"""Run loop-training and the long-training control over several seeds.

Prints per-seed first/last values of the timeline columns and writes each
timeline under ``--out/<kind>_seed<k>/``.

    python scripts/compare_loop_long.py --model gan --gan-steps 1000 --seeds 1 2 3 4 5
"""

import argparse
import json
import os
from concurrent.futures import ProcessPoolExecutor

from loopshift.loop import LoopConfig, run_long_training, run_loop, write_timeline


def one(args):
    seed, kind, overrides, out = args
    cfg = LoopConfig(seed=seed, **overrides)
    t = run_loop(cfg) if kind == "loop" else run_long_training(cfg)
    write_timeline(t, os.path.join(out, f"{kind}_seed{seed}"))
    cols = ("fcd", "color_kl", "gauss_alpha_kl", "class_coverage", "intra_class_var",
            "realfake_svm", "realfake_forest")
    return seed, kind, {c: t.column(c).tolist() for c in cols}, t.error


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="gan")
    p.add_argument("--gan-steps", type=int, default=1000)
    p.add_argument("--iterations", type=int, default=6)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--kinds", nargs="+", choices=["loop", "long"], default=["loop", "long"])
    p.add_argument("--jobs", type=int, default=os.cpu_count())
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--set", nargs=2, action="append", default=[], metavar=("KEY", "JSON"))
    a = p.parse_args()
    overrides = {"model": a.model, "gan_steps": a.gan_steps, "iterations": a.iterations}
    overrides.update({k: json.loads(v) for k, v in a.set})
    jobs = [(s, k, overrides, a.out) for s in a.seeds for k in a.kinds]
    with ProcessPoolExecutor(max_workers=a.jobs) as ex:
        results = list(ex.map(one, jobs))
    for seed, kind, cols, err in results:
        summary = "  ".join(f"{c}={v[0]:.3g}->{v[-1]:.3g}" for c, v in cols.items())
        print(f"seed={seed} {kind:4s} {summary}" + (f"  ERROR={err}" if err else ""))


if __name__ == "__main__":
    main()
