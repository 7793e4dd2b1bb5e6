"""Speculation window as the CPUID moves through the FP windowing gadget."""

import argparse

from twophase.harness import FP_GADGET_OPS, rob_cap_oracle, sweep_p2
from twophase.variants import get_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="intel-client")
    ap.add_argument("--variant", default="pte-us")
    ap.add_argument("--step", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    prof = get_profile(args.profile)
    positions = range(FP_GADGET_OPS, -1, -args.step)
    curve = sweep_p2(prof, args.variant, args.seed, positions)
    print("effective_size,window")
    for eff, w in curve:
        print(f"{eff},{w}")
    print(f"# ROB occupancy cap: {rob_cap_oracle(prof)}")


if __name__ == "__main__":
    main()
