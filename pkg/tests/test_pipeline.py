import random

import pytest
from hypothesis import given, settings, strategies as st
from seqgen import oracle_profile, random_case

from twophase import memsys as m
from twophase.isa import RAX, RBX, RDX, build_dependency_graph, parse_seq
from twophase.memsys import Level, MemEnvironment
from twophase.pipeline import Status, simulate
from twophase.variants import get_profile

PROF = get_profile("intel-client")
LAT = PROF.latencies
SECRET = 0x200000
PLAIN = 0x300000


def _env():
    env = MemEnvironment()
    env.map_page(SECRET, us=False)
    env.map_page(PLAIN)
    for a in (SECRET, PLAIN):
        m.preload(env, a, Level.L1)
        m.preload_tlb(env, a)
    env.write(SECRET, 0x42000)
    env.write(PLAIN, 7)
    return env


def test_alu_chain_completes_one_cycle_per_op():
    k = 12
    seq = parse_seq(".livein %rax\n" + "add $1, %rax\n" * k)
    tr = simulate(seq, _env(), PROF, regs={RAX: 0})
    first = tr.entries[0].dispatch_cycle
    assert tr.entries[-1].complete_cycle == first + k * LAT.alu
    assert tr.entries[-1].result == k


def test_issue_width_groups():
    seq = parse_seq(".livein %rax, %rbx\n" + "add $1, %rax\nadd $1, %rbx\n" * 4)
    tr = simulate(seq, _env(), PROF, regs={RAX: 0, RBX: 0})
    W = PROF.issue_width
    assert [e.issue_cycle for e in tr.entries] == [i // W for i in range(8)]


def test_retire_is_in_order_and_width_limited():
    seq = parse_seq(".livein %rax, %rbx\n" + "add $1, %rbx\n" * 10)
    tr = simulate(seq, _env(), PROF, regs={RAX: 0, RBX: 0})
    rets = [e.retire_cycle for e in tr.entries]
    assert rets == sorted(rets)
    for c in set(rets):
        assert rets.count(c) <= PROF.retire_width


def test_missing_live_in_is_an_error():
    seq = parse_seq(".livein %rax\nadd $1, %rax\n")
    with pytest.raises(ValueError):
        simulate(seq, _env(), PROF, regs={})


def test_legal_load_value_and_latency():
    seq = parse_seq(f"mov {PLAIN:#x}, %rax\n")
    tr = simulate(seq, _env(), PROF)
    e = tr.entries[0]
    assert e.result == 7 and e.complete_cycle - e.dispatch_cycle == LAT.l1
    assert e.status is Status.RETIRED


def test_p2_squashes_younger_ops_and_ends_run():
    seq = parse_seq(f".livein %rbx\nmov {SECRET:#x}, %rax\nadd %rax, %rbx\n"
                    + "add $1, %rbx\n" * 200)
    tr = simulate(seq, _env(), PROF, regs={RBX: 0})
    assert tr.exception == "pte_us"
    prim = tr.entries[0]
    assert tr.p2_cycle >= prim.fault.p1_cycle + 1
    assert tr.squash_set == {e.op_index for e in tr.entries[1:]}
    assert all(e.squash_cycle == tr.p2_cycle for e in tr.entries[1:])
    # the dependent saw the transient value (L1 data wins the tie)
    assert tr.entries[1].result == 0x42000


def test_zero_forwarded_when_data_is_late():
    env = _env()
    m.preload(env, SECRET, Level.L2)
    seq = parse_seq(f".livein %rbx\nmov {SECRET:#x}, %rax\nadd %rax, %rbx\n")
    tr = simulate(seq, env, PROF, regs={RBX: 5})
    prim = tr.entries[0]
    assert prim.fault.zero_forwarded
    assert prim.complete_cycle == prim.fault.p1_cycle
    assert tr.entries[1].result == 5


def test_mispredicted_branch_squashes_wrong_path():
    env = _env()
    seq = parse_seq(f".livein %rbx, %rdx\nmov {PLAIN:#x}, %rcx\n"
                    "jnz %rcx, out [predict=fallthrough]\n"
                    "add $1, %rbx\nadd $1, %rbx\nout:\nadd $2, %rdx\n")
    tr = simulate(seq, env, PROF, regs={RBX: 0, RDX: 0})
    assert {2, 3} <= tr.squash_set
    assert tr.branch_squashes
    out = tr.entry(4)
    assert out.status is Status.RETIRED and out.result == 2


def test_store_to_load_forwarding():
    seq = parse_seq(f"mov $9, {PLAIN:#x}\nmov {PLAIN:#x}, %rax\n")
    tr = simulate(seq, _env(), PROF)
    st_, ld = tr.entries
    assert ld.result == 9
    assert ld.complete_cycle == max(ld.dispatch_cycle + 1, st_.complete_cycle)


def test_simulate_does_not_mutate_input_env():
    env = _env()
    m.flush_cache(env, PLAIN)
    before = m.dumps_env(env)
    tr = simulate(parse_seq(f"mov {PLAIN:#x}, %rax\n"), env, PROF)
    assert m.dumps_env(env) == before
    assert tr.env.level(PLAIN) is Level.L1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_programs_respect_dataflow_and_determinism(seed):
    prof = oracle_profile()
    seq, env, regs = random_case(random.Random(seed))
    a = simulate(seq, env, prof, seed=seed, regs=regs)
    b = simulate(seq, env, prof, seed=seed, regs=regs)
    assert a.dump() == b.dump()
    g = build_dependency_graph(seq)
    by_op = {e.op_index: e for e in a.entries}
    for e in a.entries:
        if e.dispatch_cycle is None:
            continue
        assert e.dispatch_cycle > e.issue_cycle
        for p in g.deps(e.op_index):
            prod = by_op[p]
            assert prod.complete_cycle is not None and prod.complete_cycle <= e.dispatch_cycle
