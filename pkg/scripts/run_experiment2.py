"""Isolation sweep: PoP1 grows from 0 to 32 stress instances while PoP2
keeps two; prints PoP2's per-instance CPU share for every model."""

import argparse
import csv
import sys

from popnet.sim import SWEEP_POINTS, experiment2_sweep

MODELS = ("modelA", "modelB", "shared_pool", "none")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    args = ap.parse_args()
    sweeps = {m: experiment2_sweep(m) for m in MODELS}
    header = ["k"] + [f"{m}_pop2" for m in MODELS] + [f"{m}_pop1_accepted" for m in MODELS]
    rows = []
    for i, k in enumerate(SWEEP_POINTS):
        rows.append([k] + [sweeps[m][i].pop2_per_instance for m in MODELS]
                    + [sweeps[m][i].pop1_accepted for m in MODELS])
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    print("PoP2 per-instance CPU share (2 instances), PoP1 running k")
    print(f"{'k':>3} " + " ".join(f"{m:>12}" for m in MODELS))
    for row in rows:
        print(f"{row[0]:>3} " + " ".join(f"{v:>12.6f}" for v in row[1:1 + len(MODELS)]))
    base = sweeps["modelB"][0].pop2_per_instance
    worst = max(abs(p.pop2_per_instance - base) / base for p in sweeps["modelB"])
    print(f"largest PoP2 deviation under over-provisioning model: {worst:.2%}")


if __name__ == "__main__":
    main()
