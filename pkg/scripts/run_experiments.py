"""Run the desk-scale simulation study and write one results CSV per experiment.

    python3 scripts/run_experiments.py --out results --reps 20 --jobs 4
    python3 scripts/run_experiments.py --experiments vary_sigma0 --model II --reps 5

Each experiment goes to ``<out>/<model>_<experiment>.csv`` with a manifest
next to it; `summarize.py` turns those into mean-error tables.
"""
import argparse
import os
import time
from pathlib import Path

from smart import io as sio
from smart.simulation import EXPERIMENTS, METHODS, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--model", default="I", choices=["I", "II", "III"])
    ap.add_argument("--experiments", default=",".join(EXPERIMENTS))
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=int(os.environ.get("SMART_JOBS", "1")))
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",")
    for name in args.experiments.split(","):
        expt = ExperimentConfig(model=args.model, experiment=name, replications=args.reps,
                                seed=args.seed)
        t0 = time.perf_counter()
        rows = run_experiment(expt, methods, jobs=args.jobs)
        stem = f"{args.model}_{name}"
        sio.write_results(out / f"{stem}.csv", rows)
        sio.write_json(out / f"{stem}.json", {"experiment": expt.to_dict(), "methods": methods})
        failed = sum(r.failed for r in rows)
        print(f"{stem}: {len(rows)} rows, {failed} failed, {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
