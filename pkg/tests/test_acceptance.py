"""Acceptance criteria, one check per criterion.

Each check returns ``(passed, detail)``. Under pytest every check is a test
and the summary prints one PASS/FAIL line per criterion; running this file
directly prints the same lines.
"""

from __future__ import annotations

import io
import random
import sys
import time
from contextlib import redirect_stdout
from functools import cache
from itertools import groupby
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqgen import event_view, oracle_profile, random_case  # noqa: E402

from twophase import cli, harness as h  # noqa: E402
from twophase.harness import SignalOutcome as S  # noqa: E402
from twophase.oracle import analytic_oracle  # noqa: E402
from twophase.pipeline import simulate  # noqa: E402
from twophase.variants import get_profile, variant_ids  # noqa: E402

# measured letters for a Kaby Lake client and an EPYC 7251 server, with
# starred entries folded into Y
LAPTOP_1 = "Y Y Y R R NA NA Y Y Y Y N N R R R R Y R N R R".split()
DESKTOP_6 = "NA NA R R NA NA NA Y R NA Y Y Y R R R R R R R R R".split()

RESULTS: dict[int, tuple[bool, str]] = {}


def _record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    return bool(ok), detail


def criterion_1():
    t = time.perf_counter()
    mismatches = []
    for name, column in (("intel-client", LAPTOP_1), ("amd-epyc", DESKTOP_6)):
        prof = get_profile(name)
        for vid, want in zip(variant_ids(), column, strict=True):
            got = h.exploitability(vid, prof).value
            if got != want:
                mismatches.append(f"{name}/{vid}: {got} != {want}")
    dt = time.perf_counter() - t
    ok = not mismatches and dt < 60
    return _record(1, ok, f"44 cells, {len(mismatches)} mismatches, {dt:.1f}s "
                          + "; ".join(mismatches))


@cache
def _fig5():
    prof = get_profile("intel-client")
    return prof, h.sweep_p2(prof)


def criterion_2():
    prof, curve = _fig5()
    windows = [w for _, w in curve]
    monotone = all(a <= b for a, b in zip(windows, windows[1:]))
    sat = max(windows)
    oracle = h.rob_cap_oracle(prof, h.FP_GADGET_OPS)
    ok = monotone and 130 <= sat <= 160 and sat == oracle
    return _record(2, ok, f"monotone={monotone} saturation={sat} oracle={oracle}")


def criterion_3():
    prof = get_profile("intel-client")
    us = h.measure_differential("pte-us", "L1", "present", prof)
    ds = h.measure_differential("ds-over-limit", "L2", "present", prof)
    flushed = h.measure_relative_p1("ds-over-limit", "L1", "flushed", prof)
    present = h.measure_relative_p1("ds-over-limit", "L1", "present", prof)
    identity = all(d.t_spec2_prime - d.t_spec2 == d.t_p1 - d.t_data and
                   d.t_delay + d.t_p1 + d.t_spec2 == d.t_spec1 for d in (us, ds))
    ok = (us.relative_p1 == 0 and ds.relative_p1 == -12 and abs(flushed - present) > 100
          and identity)
    return _record(3, ok, f"US/L1={us.relative_p1} DS/L2={ds.relative_p1} "
                          f"DS flushed-present={flushed - present} identities={identity}")


def criterion_4():
    prof = get_profile("intel-client")
    outs = h.combo_outcomes("pte-us", prof)
    wrong = {c: o.value for c, o in outs.items()
             if o is not (S.CORRECT if c[0] == "L1" else S.ZERO)}
    return _record(4, not wrong, f"{len(outs)} placements, unexpected: {wrong or 'none'}")


def _dual_shape_ok(seq):
    outs = [o for _, o in seq]
    k = 0
    while k < len(outs) and outs[k] is S.CORRECT:
        k += 1
    return k > 0 and all(o is S.NONE for o in outs[k:])


def criterion_5():
    prof = get_profile("intel-client")
    details, ok = [], True
    for same in (True, False):
        seq = h.dual_primitive_test(same, prof)
        good = _dual_shape_ok(seq)
        ok &= good
        runs = [f"{o.value[0]}^{len(list(g))}" for o, g in groupby(o for _, o in seq)]
        details.append(("same" if same else "different") + ": " + " ".join(runs))
    return _record(5, ok, " ".join(details))


def criterion_6():
    w = h.p1_window_independence(get_profile("intel-client"))
    return _record(6, w["present"] == w["flushed"], f"windows {w}")


def criterion_7():
    prof = get_profile("intel-client")
    t = h.squash_threshold(prof)
    return _record(7, t is not None and t < prof.rob_size,
                   f"threshold={t} rob_size={prof.rob_size}")


def criterion_8():
    prof = get_profile("intel-client")
    t = time.perf_counter()
    seeds = range(5)
    llc = [h.prefetch_experiment("pte-us", "LLC", 1000, prof, seed=s) for s in seeds]
    mem = h.prefetch_experiment("pte-us", "MEM", 1000, prof, seed=0)
    present = h.prefetch_experiment("pte-present", "LLC", 1000, prof, seed=0)
    dt = time.perf_counter() - t
    ok_llc = all(r.final_levels == {"L2": 1} and 0 <= r.outcomes["CORRECT"] <= 5 for r in llc)
    ok_mem = mem.final_levels == {"MEM": 1}
    ok_present = present.final_levels == {"LLC": 1} and present.outcomes["CORRECT"] == 0
    ok = ok_llc and ok_mem and ok_present and dt < 10
    return _record(8, ok, f"LLC finals={[r.final_levels for r in llc]} "
                          f"correct={[r.outcomes['CORRECT'] for r in llc]}; "
                          f"MEM final={mem.final_levels}; PTE-present final="
                          f"{present.final_levels} correct={present.outcomes['CORRECT']}; "
                          f"{dt:.1f}s")


def criterion_9():
    prof = get_profile("intel-client")
    w0 = h.misprediction_window(prof, False).window
    w1 = h.misprediction_window(prof, True).window
    b0, b1 = h.misprediction_bound(prof, False), h.misprediction_bound(prof, True)
    return _record(9, w0 == w1 == b0 == b1, f"without={w0} with={w1} bounds={b0},{b1}")


def criterion_10():
    prof = oracle_profile()
    rng = random.Random(20190101)
    t = time.perf_counter()
    bad = []
    for i in range(1000):
        seq, env, regs = random_case(rng)
        got = simulate(seq, env, prof, seed=i, regs=regs)
        want = analytic_oracle(seq, env, prof, regs)
        if (event_view(got.entries) != event_view(want.entries)
                or got.squash_set != want.squash_set or got.p2_cycle != want.p2_cycle):
            bad.append(i)
    dt = time.perf_counter() - t
    return _record(10, not bad and dt < 30,
                   f"1000 sequences, mismatches={bad[:5]}, {dt:.1f}s")


REPORT_ARGS = (
    ["exploitability", "--profile", "intel-client"],
    ["exploitability", "--profile", "amd-epyc", "--jobs", "2"],
    ["window", "--cpuid-pos", "40"],
    ["p1", "--variant", "ds-over-limit", "--data-level", "l2"],
    ["prefetch", "--variant", "pte-us", "--level", "llc", "--rounds", "200",
     "--format", "jsonl"],
    ["squash"],
    ["mispredict"],
    ["dual-primitive"],
)


def _reports(seed: int) -> bytes:
    buf = io.StringIO()
    with redirect_stdout(buf):
        for args in REPORT_ARGS:
            if cli.main([*args, "--seed", str(seed)]) != 0:
                raise AssertionError(f"cli failed: {args}")
    return buf.getvalue().encode()


def criterion_11():
    a, b = _reports(7), _reports(7)
    return _record(11, a == b and len(a) > 0, f"{len(a)} bytes, identical={a == b}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 12)])
def test_acceptance(check):
    ok, detail = check()
    assert ok, detail


def summary_lines() -> list[str]:
    return [f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
            for n, (ok, detail) in sorted(RESULTS.items())]


if __name__ == "__main__":
    for check in CRITERIA:
        check()
    print("\n".join(summary_lines()))
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
