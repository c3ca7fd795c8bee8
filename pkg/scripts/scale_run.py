"""Time one large run: 200 servers, 2000 ticks, a co-residency attack halfway."""

import argparse
import time

from vmshield import scenario
from vmshield.simulator import run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--servers", type=int, default=200)
    ap.add_argument("--ticks", type=int, default=2000)
    ap.add_argument("--rate", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = scenario.with_overrides(scenario.preset("co-residency"), {
        "seed": args.seed, "duration": args.ticks, "arrivals.rate": args.rate,
        "servers": [{"count": args.servers, "capacity": [32, 65536, 2000, 10000]}],
        "attack.launch_time": args.ticks // 2 + 1})
    t0 = time.perf_counter()
    m = run(cfg).metrics
    print(f"{time.perf_counter() - t0:.1f}s  {m.to_dict()}")


if __name__ == "__main__":
    main()
