"""Exploitability matrix for every builtin profile, side by side."""

import argparse

from twophase.harness import exploitability
from twophase.variants import builtin_profiles, catalog


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    profiles = builtin_profiles()
    names = sorted(profiles)
    print(f"{'variant':<28}" + "".join(f"{n:>14}" for n in names))
    for v in catalog():
        cells = []
        for n in names:
            got = exploitability(v, profiles[n], args.seed).value
            want = profiles[n].expected.get(v.id)
            cells.append(got + ("" if want in (None, got) else f" (!{want})"))
        print(f"{v.name:<28}" + "".join(f"{c:>14}" for c in cells))


if __name__ == "__main__":
    main()
