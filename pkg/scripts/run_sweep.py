"""Seed sweep over the three buffer strategies plus a shuffled multi-epoch comparator.

Writes ``sweep.json`` (final metrics per run) and ``forgetting.csv`` (per-source
forgetting at every evaluation, the data behind a forgetting-vs-time plot).

    python scripts/run_sweep.py --seeds 0 1 2 3 4 --out runs/sweep
"""
import argparse
import csv
import json
import time
from pathlib import Path

import numpy as np

from replaymem.experiment import run_experiment, run_multi_epoch_baseline, segment_ends
from replaymem.memory import SamplingSchedule, Strategy
from replaymem.metrics import composition_entropy, forgetting_series, mean_final_forgetting
from replaymem.stream import default_sources

LABELS = {Strategy.LINEAR: "LM", Strategy.DYNAMIC: "DM", Strategy.SELECTIVE: "SM"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--S", type=int, default=10)
    ap.add_argument("--N", type=int, default=128)
    ap.add_argument("--K", type=float, default=0.25)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--n-samples", type=int, default=200)
    ap.add_argument("--no-baseline", action="store_true")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    specs = default_sources(args.n_samples)
    ends = segment_ends(specs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves = [], []
    for seed in args.seeds:
        for strategy in Strategy:
            t0 = time.perf_counter()
            records, _ = run_experiment(specs, strategy, SamplingSchedule(args.S, args.batch_size), seed,
                                        capacity=args.N, protect_fraction=args.K)
            final = records[-1]
            row = {"seed": seed, "label": LABELS[strategy], "average_dice": final.average_dice(),
                   "source_dice": {str(k): v for k, v in final.source_dice().items()},
                   "mean_forgetting": mean_final_forgetting(records, ends),
                   "entropy": composition_entropy(final.buffer_composition),
                   "composition": {str(k): v for k, v in final.buffer_composition.items()},
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            for point in forgetting_series(records, ends):
                for src, drop in point["drop"].items():
                    curves.append((seed, row["label"], point["arrival_index"], src, drop))
            print(f"seed {seed} {row['label']:>2}: dice {row['average_dice']:.4f} "
                  f"forgetting {row['mean_forgetting']:.4f} entropy {row['entropy']:.3f} "
                  f"({row['seconds']:.1f}s)", flush=True)
        if not args.no_baseline:
            steps = sum(s.n_samples for s in specs) * args.S
            rec = run_multi_epoch_baseline(specs, steps, args.batch_size, seed)
            rows.append({"seed": seed, "label": "multi-epoch", "average_dice": rec.average_dice(),
                         "source_dice": {str(k): v for k, v in rec.source_dice().items()}})
            print(f"seed {seed} multi-epoch: dice {rec.average_dice():.4f}", flush=True)

    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(out / "forgetting.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "label", "arrival_index", "source_id", "drop"])
        w.writerows(curves)

    print("\nmean over seeds")
    for label in ("LM", "DM", "SM", "multi-epoch"):
        sel = [r for r in rows if r["label"] == label]
        if sel:
            extra = ""
            if "mean_forgetting" in sel[0]:
                extra = (f"  forgetting {np.mean([r['mean_forgetting'] for r in sel]):.4f}"
                         f"  entropy {np.mean([r['entropy'] for r in sel]):.3f}")
            print(f"{label:>12}: dice {np.mean([r['average_dice'] for r in sel]):.4f}{extra}")
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[r["label"]] = r["average_dice"]
    held = sum(d["SM"] >= d["DM"] >= d["LM"] for d in by_seed.values())
    print(f"SM >= DM >= LM in {held}/{len(by_seed)} seeds")


if __name__ == "__main__":
    main()
