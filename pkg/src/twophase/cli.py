"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 every requested variant is
unsupported (NA) on the chosen profile.
"""

from __future__ import annotations

import argparse
import difflib
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional, Sequence

from . import harness as h
from .report import render
from .variants import (ProfileError, builtin_profiles, catalog, get_profile, get_variant,
                       load_profile, variant_ids)

DEFAULT_SEED = 0
EXIT_CONFIG = 2
EXIT_ALL_NA = 3


class ConfigError(Exception):
    pass


class AllUnsupported(Exception):
    pass


def _suggest(name: str, choices: Sequence[str]) -> str:
    close = difflib.get_close_matches(name, choices, n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def resolve_profile(name: str):
    try:
        return get_profile(name)
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}"
                          + _suggest(name, sorted(builtin_profiles()))) from None
    except ProfileError as exc:
        raise ConfigError(str(exc)) from None


def resolve_variant(name: str):
    try:
        return get_variant(name)
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}" + _suggest(name, variant_ids())) from None


def _pmap(fn: Callable, items: list, jobs: int) -> list:
    """Map preserving input order, optionally across worker processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- experiment bodies (top level so worker processes can pickle them) ----

def _exploit_row(args):
    prof, vid, seed = args
    v = get_variant(vid)
    return {"profile": prof.name, "variant": v.id, "name": v.name,
            "letter": h.exploitability(v, prof, seed).value}


def _window_row(args):
    prof, vid, pos, seed = args
    w = h.measure_speculation_window(lambda k: h.fig5_case(pos, k, vid), prof, seed)
    eff = h.FP_GADGET_OPS - pos if pos is not None else h.FP_GADGET_OPS
    return {"profile": prof.name, "variant": vid, "cpuid_pos": pos, "effective_size": eff,
            "window": w.window, "no_speculation": w.no_speculation,
            "oracle_cap": h.rob_cap_oracle(prof, eff)}


def _dual_rows(args):
    prof, vid, same, seed = args
    return [{"profile": prof.name, "variant": vid, "same_address": same,
             "inserted_count": k, "outcome": o.value}
            for k, o in h.dual_primitive_test(same, prof, seed, vid)]


def _mispredict_row(args):
    prof, slow, seed = args
    return {"profile": prof.name, "with_slow_windowing": slow,
            "window": h.misprediction_window(prof, slow, seed).window,
            "bound": h.misprediction_bound(prof, slow)}


# -- commands --------------------------------------------------------------

def cmd_list_variants(args, prof):
    rows = [{"id": v.id, "name": v.name, "template": v.template.value,
             "check_id": v.check_id, "mark": v.mark, "addr_mode": v.addr_mode,
             "cpu_mode": v.cpu_mode, "required_features": v.required_features}
            for v in catalog()]
    return "variants", rows


def cmd_list_profiles(args, prof):
    rows = [{"name": p.name, "rob_size": p.rob_size, "features": p.features,
             "description": p.description} for p in builtin_profiles().values()]
    return "profiles", rows


def cmd_validate_profile(args, prof):
    try:
        p = load_profile(args.path, validate=True)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {args.path}") from None
    except ProfileError as exc:
        raise ConfigError(str(exc)) from None
    return "profiles", [{"name": p.name, "rob_size": p.rob_size, "features": p.features,
                         "description": p.description}]


def _selected(args, prof) -> list[str]:
    vids = [resolve_variant(args.variant).id] if getattr(args, "variant", None) else variant_ids()
    supported = [v for v in vids if get_variant(v).required_features <= prof.features]
    if not supported:
        raise AllUnsupported(f"no requested variant is supported by profile {prof.name!r}")
    return vids


def cmd_exploitability(args, prof):
    vids = _selected(args, prof)
    return "exploitability", _pmap(_exploit_row, [(prof, v, args.seed) for v in vids],
                                   args.jobs)


def cmd_window(args, prof):
    vid = _selected(args, prof)[0]
    if args.sweep_cpuid:
        positions = list(range(h.FP_GADGET_OPS, -1, -1))
    else:
        positions = [args.cpuid_pos]
    return "window", _pmap(_window_row, [(prof, vid, p, args.seed) for p in positions],
                           args.jobs)


def cmd_p1(args, prof):
    vid = _selected(args, prof)[0]
    try:
        d = h.measure_differential(vid, args.data_level, args.tlb, prof, args.seed)
    except h.UnsupportedVariant as exc:
        raise ConfigError(str(exc)) from None
    return "p1", [{"profile": prof.name, "variant": vid, "data_level": args.data_level.upper(),
                   "tlb": args.tlb, "relative_p1": d.relative_p1, "t_spec1": d.t_spec1,
                   "t_spec2": d.t_spec2, "t_spec2_prime": d.t_spec2_prime,
                   "t_delay": d.t_delay, "t_p1": d.t_p1, "t_data": d.t_data,
                   "chase_depth": d.chase_depth}]


def cmd_prefetch(args, prof):
    vid = _selected(args, prof)[0]
    rep = h.prefetch_experiment(vid, args.level, args.rounds, prof, args.seed, args.trials)
    base = {"profile": prof.name, "variant": vid, "level": args.level.upper(),
            "rounds": args.rounds, "trials": args.trials}
    rows = [dict(base, kind="reload_latency", key=lat, count=n)
            for lat, n in rep.histogram.items()]
    rows += [dict(base, kind="outcome", key=o, count=n) for o, n in rep.outcomes.items()]
    rows += [dict(base, kind="final_level", key=lv, count=n)
             for lv, n in sorted(rep.final_levels.items())]
    return "prefetch", rows


def cmd_squash(args, prof):
    vid = _selected(args, prof)[0]
    return "squash", [{"profile": prof.name, "variant": vid,
                       "threshold": h.squash_threshold(prof, vid, args.seed),
                       "rob_size": prof.rob_size}]


def cmd_mispredict(args, prof):
    return "mispredict", _pmap(_mispredict_row, [(prof, s, args.seed) for s in (False, True)],
                               args.jobs)


def cmd_dual(args, prof):
    vid = _selected(args, prof)[0]
    modes = [True] if args.same_address else [True, False]
    if args.different_address:
        modes = [False]
    rows = _pmap(_dual_rows, [(prof, vid, m, args.seed) for m in modes], args.jobs)
    return "dual-primitive", [r for chunk in rows for r in chunk]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", default="intel-client",
                        help="builtin profile name or path to a profile file")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--format", dest="fmt", choices=("csv", "jsonl"), default="csv")

    p = argparse.ArgumentParser(prog="twophase", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    add("list-variants", cmd_list_variants, "catalog of speculation primitives")
    add("list-profiles", cmd_list_profiles, "builtin processor profiles")
    sp = add("validate-profile", cmd_validate_profile, "schema check plus outcome lint")
    sp.add_argument("path")
    sp = add("exploitability", cmd_exploitability, "Y/N/R/NA matrix")
    sp.add_argument("--variant")
    sp = add("window", cmd_window, "speculation window under the FP windowing gadget")
    sp.add_argument("--variant", default="pte-us")
    sp.add_argument("--cpuid-pos", type=int, default=None,
                    help="CPUID position inside the gadget (default: none)")
    sp.add_argument("--sweep-cpuid", action="store_true")
    sp = add("p1", cmd_p1, "relative P1 latency by differential measurement")
    sp.add_argument("--variant", required=True)
    sp.add_argument("--data-level", required=True, type=str.lower,
                    choices=("l1", "l2", "llc", "mem"))
    sp.add_argument("--tlb", choices=("present", "flushed"), default="present")
    sp = add("prefetch", cmd_prefetch, "repeat a primitive and track the secret's level")
    sp.add_argument("--variant", required=True)
    sp.add_argument("--level", required=True, type=str.lower, choices=("l2", "llc", "mem"))
    sp.add_argument("--rounds", type=int, required=True)
    sp.add_argument("--trials", type=int, default=1)
    sp = add("squash", cmd_squash, "chain length at which P2 squashes the sender")
    sp.add_argument("--variant", default="pte-us")
    add("mispredict", cmd_mispredict, "window of a mispredicted branch")
    sp = add("dual-primitive", cmd_dual, "second primitive delayed behind the first")
    sp.add_argument("--variant", default="pte-us")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--same-address", action="store_true")
    g.add_argument("--different-address", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if getattr(args, "rounds", 0) < 0:
            raise ConfigError("--rounds must be non-negative")
        prof = resolve_profile(args.profile) if args.command != "validate-profile" else None
        kind, rows = args.func(args, prof)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllUnsupported as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_NA
    except h.HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = render(kind, rows, args.fmt)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
