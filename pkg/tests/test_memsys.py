import random

import pytest
from hypothesis import given, strategies as st

from twophase import memsys as m
from twophase.memsys import AddrMode, Level, MemEnvironment, SegmentDescriptor, SegType
from twophase.variants import PrefetchPolicy, get_profile

PROF = get_profile("intel-client")
LAT = PROF.latencies
ADDR = 0x200008


def _env(level=Level.L1, tlb=True, **pte):
    env = MemEnvironment()
    env.map_page(ADDR, **pte)
    if level is Level.MEM:
        m.flush_cache(env, ADDR)
    else:
        m.preload(env, ADDR, level)
    if tlb:
        m.preload_tlb(env, ADDR)
    env.write(ADDR, 0x42000)
    return env


@pytest.mark.parametrize("level", list(Level))
def test_legal_read_latency_is_level_latency_on_tlb_hit(level):
    r = m.access(_env(level), "read", ADDR, "DS", PROF)
    assert not r.faulted
    assert r.translation_latency == 0
    assert r.data_latency == LAT.level(level.value)
    assert r.value == 0x42000


def test_translation_costs():
    env = _env(tlb=False)
    assert m.translation_latency(env, m.page_of(ADDR), PROF) == LAT.stlb + LAT.walk
    env.psc.add(m.page_of(ADDR))
    assert m.translation_latency(env, m.page_of(ADDR), PROF) == LAT.stlb + LAT.walk_psc
    env.stlb.add(m.page_of(ADDR))
    assert m.translation_latency(env, m.page_of(ADDR), PROF) == LAT.stlb


def test_user_access_to_kernel_page():
    r = m.access(_env(Level.L2, us=False), "read", ADDR, "DS", PROF)
    first = r.first_violation
    assert first.check_id == "pte_us"
    assert first.p1_time == PROF.timing("pte_us").delay
    # P1 lands before the L2 data
    assert r.zero_forwarded()


def test_post_translation_tie_keeps_the_data():
    # pte_us P1 delay equals the L1 latency on this profile
    assert PROF.timing("pte_us").delay == LAT.l1
    r = m.access(_env(Level.L1, us=False), "read", ADDR, "DS", PROF)
    assert not r.zero_forwarded()


def test_terminal_fault_sees_only_l1():
    assert m.access(_env(Level.L1, present=False), "read", ADDR, "DS", PROF).data_latency \
        == LAT.l1
    for level in (Level.L2, Level.LLC, Level.MEM):
        r = m.access(_env(level, present=False), "read", ADDR, "DS", PROF)
        assert r.terminal and r.data_latency is None and r.zero_forwarded()


def test_write_to_read_only_page():
    r = m.access(_env(rw=False), "write", ADDR, "DS", PROF)
    assert [c.check_id for c in r.violations] == ["pte_rw"]
    assert m.access(_env(rw=False), "read", ADDR, "DS", PROF).violations == ()


def test_unmapped_address_is_config_error():
    with pytest.raises(m.ConfigError):
        m.access(MemEnvironment(), "read", 0x1234000, "DS", PROF)


def _seg_env(desc):
    env = _env()
    env.addr_mode = AddrMode.BITS32
    env.set_segment("DS", 0x2B, desc)
    return env


def test_segment_limit_checks_last_byte():
    limit = ADDR + 7
    assert not m.access(_seg_env(SegmentDescriptor(limit=limit)), "read", ADDR, "DS",
                        PROF).faulted
    r = m.access(_seg_env(SegmentDescriptor(limit=limit - 1)), "read", ADDR, "DS", PROF)
    assert [c.check_id for c in r.violations] == ["seg_limit"]


def test_segment_base_is_added():
    env = _seg_env(SegmentDescriptor(base=0x1000))
    assert m.access(env, "read", ADDR - 0x1000, "DS", PROF).linear_addr == ADDR


def test_not_present_segment_blocks_speculation():
    r = m.access(_seg_env(SegmentDescriptor(present=False)), "read", ADDR, "DS", PROF)
    assert r.no_speculation and not r.zero_forwarded()


def test_execute_only_segment_read():
    r = m.access(_seg_env(SegmentDescriptor(seg_type=SegType.CODE_XO)), "read", ADDR, "DS",
                 PROF)
    assert [c.check_id for c in r.violations] == ["seg_type_read"]


def test_preload_semantics():
    env = _env(Level.L2)
    assert env.level(ADDR) is Level.L2
    m.fill(env, ADDR)
    assert env.level(ADDR) is Level.L1
    m.demote_l1(env, ADDR)
    assert env.level(ADDR) is Level.L2
    m.flush_cache(env, ADDR)
    assert env.level(ADDR) is Level.MEM
    assert m.probe_reload(env, ADDR, PROF) == LAT.mem
    with pytest.raises(ValueError):
        m.preload(env, ADDR, Level.MEM)


def test_tlb_flush_forgets_every_structure():
    env = _env()
    m.flush_tlb(env, ADDR)
    page = m.page_of(ADDR)
    assert page not in env.dtlb | env.stlb | env.psc


class _Always:
    def random(self):
        return 0.0


def test_prefetch_side_effect():
    env = _env(Level.LLC)
    m.apply_prefetch_side_effect(env, ADDR, PrefetchPolicy(0, 0), random.Random(0))
    assert env.level(ADDR) is Level.L2
    env = _env(Level.LLC)
    m.apply_prefetch_side_effect(env, ADDR, PrefetchPolicy(1, 0), _Always())
    assert env.level(ADDR) is Level.L1
    env = _env(Level.MEM)
    m.apply_prefetch_side_effect(env, ADDR, PrefetchPolicy(1, 1), _Always())
    assert env.level(ADDR) is Level.MEM
    env = _env(Level.LLC)
    m.apply_prefetch_side_effect(env, ADDR, PrefetchPolicy(1, 0), _Always(), terminal=True)
    assert env.level(ADDR) is Level.LLC


def test_clone_is_independent():
    env = _env()
    c = env.clone()
    m.flush_cache(c, ADDR)
    c.features.pkru_deny.add(3)
    assert env.level(ADDR) is Level.L1 and not env.features.pkru_deny


def test_env_round_trip():
    env = _seg_env(SegmentDescriptor(base=0x10, limit=0xFFFF, seg_type=SegType.DATA_RO))
    env.features.smap_enabled = True
    env.priv_regs[4] = 0x3406E0
    again = m.loads_env(m.dumps_env(env))
    assert again == env
    assert m.dumps_env(again) == m.dumps_env(env)


def test_env_unknown_field_rejected():
    d = m.env_to_dict(_env())
    d["bogus"] = 1
    with pytest.raises((ValueError, KeyError)):
        m.env_from_dict(d)


@given(level=st.sampled_from(list(Level)),
       pte=st.fixed_dictionaries({"present": st.booleans(), "us": st.booleans(),
                                  "rw": st.booleans(), "reserved_set": st.booleans()}),
       write=st.booleans(), in_dtlb=st.booleans(), in_stlb=st.booleans())
def test_tlb_state_never_changes_which_checks_fail(level, pte, write, in_dtlb, in_stlb):
    base = m.access(_env(level, tlb=True, **pte), "write" if write else "read", ADDR, "DS",
                    PROF)
    env = _env(level, tlb=False, **pte)
    if in_dtlb:
        env.dtlb.add(m.page_of(ADDR))
    if in_stlb:
        env.stlb.add(m.page_of(ADDR))
    other = m.access(env, "write" if write else "read", ADDR, "DS", PROF)
    assert [c.check_id for c in other.violations] == [c.check_id for c in base.violations]
    assert other.translation_latency >= base.translation_latency
