"""Prevention rate over the audit_interval x dwell grid, as a plot-ready CSV."""

import argparse
import csv
import sys

from vmshield import scenario
from vmshield.simulator import Outcome, run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="co-residency", choices=scenario.PRESETS)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--max", type=int, default=8, help="grid runs 1..max on both axes")
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["audit_interval", "dwell", "attempts", "prevented", "succeeded", "rate"])
    for a in range(1, args.max + 1):
        for d in range(1, args.max + 1):
            outcomes = []
            for seed in range(args.seeds):
                cfg = scenario.with_overrides(scenario.preset(args.preset), {
                    "seed": seed, "audit_interval": a, "breach_dwell_time": d, "duration": 80})
                outcomes += [x.outcome for x in run(cfg).attempts]
            n = len(outcomes)
            p = outcomes.count(Outcome.PREVENTED)
            s = outcomes.count(Outcome.SUCCEEDED)
            w.writerow([a, d, n, p, s, f"{p / n:.3f}" if n else ""])


if __name__ == "__main__":
    main()
