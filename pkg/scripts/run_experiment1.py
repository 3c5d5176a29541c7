"""Single-PoP ramp under both limit models.

Writes one CSV per model and prints the per-container limit whenever the
number of running containers changes.

    python scripts/run_experiment1.py --out results/
"""

import argparse
from pathlib import Path

from popnet.sim import experiment1, export_events, export_series, run_scenario


def transitions(series):
    last = None
    for rec in series.ticks:
        n = len(rec.samples)
        if n != last:
            per = rec.samples[0].limit if rec.samples else 0.0
            yield rec.t, n, per, rec.aggregate("pop1").usage
            last = n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for model in ("modelA", "modelB"):
        series = run_scenario(experiment1(model))
        rows = export_series(series, args.out / f"experiment1_{model}.csv")
        export_events(series, args.out / f"experiment1_{model}_events.csv")
        print(f"{model}: accepted={len(series.accepted())} rejected={len(series.rejected())} rows={rows}")
        print(f"  {'t':>5} {'running':>7} {'per-container':>14} {'pop total':>10}")
        for t, n, per, total in transitions(series):
            print(f"  {t:>5g} {n:>7} {per:>14.6f} {total:>10.6f}")


if __name__ == "__main__":
    main()
