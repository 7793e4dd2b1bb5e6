"""Reload-latency histogram of the secret after repeated faulting accesses."""

import argparse

from twophase.harness import prefetch_experiment
from twophase.variants import get_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="intel-client")
    ap.add_argument("--variant", default="pte-us")
    ap.add_argument("--level", default="LLC")
    ap.add_argument("--rounds", type=int, default=1000)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rep = prefetch_experiment(args.variant, args.level, args.rounds,
                              get_profile(args.profile), args.seed, args.trials)
    width = max(rep.histogram.values())
    for lat, n in rep.histogram.items():
        print(f"{lat:>5} cycles {n:>4} " + "#" * round(40 * n / width))
    print("outcomes:", rep.outcomes)
    print("final levels:", rep.final_levels)


if __name__ == "__main__":
    main()
