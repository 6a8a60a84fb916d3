"""Buffer composition over time for each strategy (the data behind a stacked-area plot).

    python scripts/composition_trace.py --seed 0 --out runs/composition.csv
"""
import argparse
import csv
from pathlib import Path

from replaymem.experiment import run_experiment
from replaymem.memory import SamplingSchedule, Strategy
from replaymem.metrics import composition_entropy
from replaymem.stream import default_sources


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--S", type=int, default=10)
    ap.add_argument("--eval-interval", type=int, default=25)
    ap.add_argument("--out", default="runs/composition.csv")
    args = ap.parse_args()

    specs = default_sources(200)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "arrival_index", "source_id", "count", "entropy"])
        for strategy in Strategy:
            records, _ = run_experiment(specs, strategy, SamplingSchedule(args.S, 8), args.seed,
                                        eval_interval=args.eval_interval)
            for r in records:
                h = composition_entropy(r.buffer_composition)
                for src in sorted(s.source_id for s in specs):
                    w.writerow([strategy.value, r.arrival_index, src, r.buffer_composition.get(src, 0), f"{h:.6f}"])
            final = records[-1].buffer_composition
            print(f"{strategy.value:>9}: final composition {dict(sorted(final.items()))}", flush=True)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
