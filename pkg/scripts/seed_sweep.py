"""Average mAP of each ablation variant over several seeds.

    python scripts/seed_sweep.py --seeds 1 2 3 7 --out runs/seed_sweep.csv
"""

import argparse
import csv
import logging
import sys

import numpy as np

from dsaa import config as configmod
from dsaa.experiment import ABLATION, Experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 7])
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    names = [v.name for v in ABLATION]
    rows = []
    for seed in args.seeds:
        exp = Experiment.build(configmod.load(None, [*args.set, f"seed={seed}"]))
        avg = [100 * exp.run(v).report.average for v in ABLATION]
        order_ok = avg[0] < avg[1] <= avg[2] <= avg[3] and avg[3] > max(avg[:3])
        rows.append([seed, *(f"{a:.2f}" for a in avg), order_ok])
        print(*rows[-1], sep="\t", flush=True)
    vals = np.array([[float(x) for x in r[1:-1]] for r in rows])
    rows.append(["mean", *(f"{m:.2f}" for m in vals.mean(axis=0)), ""])
    rows.append(["std", *(f"{s:.2f}" for s in vals.std(axis=0, ddof=1 if len(vals) > 1 else 0)), ""])

    w = csv.writer(open(args.out, "w", newline="") if args.out else sys.stdout)
    w.writerow(["seed", *names, "ordering_holds"])
    w.writerows(rows)


if __name__ == "__main__":
    main()
