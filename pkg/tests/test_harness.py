import pytest

from twophase import harness as h
from twophase import memsys as m
from twophase.harness import Letter, SignalOutcome as S
from twophase.isa import OpKind
from twophase.memsys import Level, MemEnvironment
from twophase.variants import get_profile

INTEL = get_profile("intel-client")
AMD = get_profile("amd-epyc")


def _channel_env(*slots):
    env = MemEnvironment()
    for s in range(h.CHANNEL_SLOTS):
        m.flush_cache(env, h.CHANNEL_BASE + s * h.SLOT)
    for s in slots:
        m.preload(env, h.CHANNEL_BASE + s * h.SLOT, Level.L1)
    return env


def test_hit_threshold_splits_l1_from_llc():
    lat = INTEL.latencies
    assert lat.l1 < h.hit_threshold(INTEL) < lat.llc


@pytest.mark.parametrize("slots, want", [
    ((h.SECRET_VALUE >> 12,), S.CORRECT),
    ((0, h.SECRET_VALUE >> 12), S.CORRECT),
    ((0,), S.ZERO),
    ((), S.NONE),
    ((3,), S.NONE),
])
def test_receiver_decoding(slots, want):
    assert h.receive(_channel_env(*slots), INTEL) is want


@pytest.mark.parametrize("outs, letter", [
    ([S.CORRECT, S.ZERO], Letter.Y),
    ([S.ZERO, S.NONE], Letter.N),
    ([S.NONE, S.NONE], Letter.R),
])
def test_letters(outs, letter):
    assert h.letter_from_outcomes(outs) is letter


def test_secret_value_must_index_a_slot():
    with pytest.raises(h.HarnessError):
        h.TestCase((h.primitive("pte-us"),), secret_value=256 << 12)


def test_assembled_roles_cover_listing():
    asm = h.assemble(h.fig5_case(10, 3))
    roles = asm.roles
    assert len(roles["primitive"]) == 1
    prim = asm.seq.ops[roles["primitive"][0]]
    assert prim.kind is OpKind.LOAD and prim.mem.displacement == h.SECRET_ADDR
    assert sum(len(v) for v in roles.values()) == len(asm.seq)
    assert sum(op.kind is OpKind.CPUID for op in asm.seq) == 1


def test_legal_twin_has_no_fault():
    tc = h.exploitability_case("pte-us", "L1", "present").with_(legal=True)
    _, trace, _ = h.run_test(tc, INTEL)
    assert trace.exception is None


def test_unsupported_variant_reports_na():
    assert h.exploitability("pte-present", AMD) is Letter.NA
    with pytest.raises(h.UnsupportedVariant):
        h.run_test(h.exploitability_case("pte-present", "L1", "present"), AMD)


def test_window_scan_stops_at_first_silence():
    outs = {k: (S.CORRECT if k <= 5 else S.NONE) for k in range(20)}
    orig = h.run_covert_test
    try:
        h.run_covert_test = lambda tc, profile, seed=0: outs[tc]
        w = h.measure_speculation_window(lambda k: k, INTEL)
    finally:
        h.run_covert_test = orig
    assert w.window == 5 and not w.no_speculation and len(w.outcomes) == 7


def test_no_speculation_window():
    w = h.measure_speculation_window(
        lambda k: h.exploitability_case("cs-execute-only", "L1", "present"), INTEL, limit=3)
    assert w.no_speculation and w.window == 0


def test_relative_p1_rejects_terminal_variants():
    with pytest.raises(h.UnsupportedVariant):
        h.measure_differential("pte-present", "L1", "present", INTEL)


def test_relative_p1_rejects_bad_placement():
    with pytest.raises(h.HarnessError):
        h.measure_differential("pte-us", "L7", "present", INTEL)


def test_prefetch_argument_checks():
    with pytest.raises(h.HarnessError):
        h.prefetch_experiment("pte-us", "LLC", -1, INTEL)
    with pytest.raises(h.HarnessError):
        h.prefetch_experiment("pte-us", "L9", 1, INTEL)


def test_prefetch_zero_rounds_keeps_level():
    rep = h.prefetch_experiment("pte-us", "LLC", 0, INTEL, trials=3)
    assert rep.final_levels == {"LLC": 3}
    assert rep.histogram == {INTEL.latencies.llc: 3}


def test_prefetch_is_seed_deterministic():
    a = h.prefetch_experiment("pte-us", "LLC", 300, INTEL, seed=11)
    b = h.prefetch_experiment("pte-us", "LLC", 300, INTEL, seed=11)
    assert a == b


def test_rob_cap_oracle_is_below_rob_size():
    assert h.rob_cap_oracle(INTEL) < INTEL.rob_size
    assert len(h.fp_gadget_retire_times(INTEL, 10)) == 10


def test_correct_branch_prediction_window_is_rob_bound():
    w = h.misprediction_window(INTEL, False, mispredict=False)
    assert w.window == INTEL.rob_size
