"""Paired consolidation on/off runs of the consolidation-demo preset."""

import argparse

from vmshield import scenario
from vmshield.simulator import run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--threshold", type=float, default=None, help="underload threshold override")
    args = ap.parse_args()

    base = scenario.preset("consolidation-demo")
    if args.threshold is not None:
        base = scenario.with_overrides(base, {"underload_threshold": args.threshold})
    print("seed,ticks_on,ticks_off,energy_on,energy_off,migrations_on")
    for seed in range(args.seeds):
        on = run(scenario.with_overrides(base, {"seed": seed})).metrics
        off = run(scenario.with_overrides(base, {"seed": seed, "consolidation": False})).metrics
        print(f"{seed},{on.active_server_ticks},{off.active_server_ticks},"
              f"{on.energy:.3f},{off.energy:.3f},{on.migrations}")


if __name__ == "__main__":
    main()
