import pytest
from hypothesis import given, strategies as st

from twophase.isa import (RAX, RBX, RCX, XMM0, XMM1, OpKind, ParseError, SequenceError,
                          build_dependency_graph, effective_gadget_after_cpuid, format_seq,
                          parse_op, parse_seq)


@pytest.mark.parametrize("line, kind", [
    ("add $1, %rax", OpKind.ALU_ADD),
    ("sub %rbx, %rax", OpKind.ALU_SUB),
    ("mov 0x200000, %rax", OpKind.LOAD),
    ("mov %rax, 0x300000", OpKind.STORE),
    ("mov $5, 0x300000", OpKind.STORE),
    ("movapd %xmm1, %xmm0", OpKind.FP_MOVAPD),
    ("addpd %xmm1, %xmm0", OpKind.FP_ADDPD),
    ("mulpd %xmm1, %xmm0", OpKind.FP_MULPD),
    ("movq %xmm0, %rax", OpKind.FP_MOVAPD),
    ("mov %cr4, %rax", OpKind.REG_PRIV_READ),
    ("rdmsr $0x1a2, %rax", OpKind.REG_PRIV_READ),
    ("bound %rax, $16", OpKind.BOUND_CHECK),
    ("movw $0x33, %ss, %rbx", OpKind.SEG_LOAD),
    ("cpuid", OpKind.CPUID),
])
def test_parse_kinds(line, kind):
    assert parse_op(line).kind is kind


def test_two_operand_fp_reads_destination():
    op = parse_op("addpd %xmm1, %xmm0")
    assert op.srcs == (XMM0, XMM1) and op.dst == XMM0
    assert parse_op("movapd %xmm1, %xmm0").srcs == (XMM1,)


def test_memory_operand_fields():
    op = parse_op("mov %fs:0x10(%rbx,%rcx,8), %rax")
    m = op.mem
    assert (m.segment, m.displacement, m.base, m.index, m.scale) == ("FS", 0x10, RBX, RCX, 8)


def test_parse_error_carries_line_number():
    with pytest.raises(ParseError) as exc:
        parse_seq("add $1, %rax\nfrobnicate %rax\n")
    assert "2" in str(exc.value)


def test_backward_branch_rejected():
    with pytest.raises((ParseError, SequenceError)):
        parse_seq("top:\nadd $1, %rax\njnz %rax, top\n")


def test_dependency_producers():
    seq = parse_seq("""
        .livein %rbx, %rcx
        mov 0x200000, %rax
        add $1, %rbx
        add %rax, %rbx
        sub $1, %rcx
    """)
    g = build_dependency_graph(seq)
    assert g.producers[2] == {RBX: 1, RAX: 0}
    assert g.producers[3] == {RCX: None}
    assert g.deps(2) == {0, 1}
    assert g.path_length(0, 2) == 1
    assert g.path_length(0, 3) == -1


def test_cpuid_orders_everything_around_it():
    seq = parse_seq(".livein %rax, %rbx, %rcx\n"
                    "add $1, %rax\nadd $1, %rbx\ncpuid\nadd $1, %rcx\n")
    g = build_dependency_graph(seq)
    assert g.deps(2) >= {0, 1}
    assert 2 in g.deps(3)


def test_effective_gadget_drops_ops_before_cpuid():
    seq = parse_seq(".livein %xmm0, %xmm1\nmovapd %xmm1, %xmm0\ncpuid\n"
                    "addpd %xmm1, %xmm0\nmulpd %xmm1, %xmm0\n")
    eff = effective_gadget_after_cpuid(seq)
    assert [op.kind for op in eff] == [OpKind.FP_ADDPD, OpKind.FP_MULPD]


REGS = ["%rax", "%rbx", "%rcx", "%r12"]
alu_line = st.builds(lambda m, s, d: f"{m} {s}, {d}", st.sampled_from(["add", "sub"]),
                     st.one_of(st.sampled_from(REGS), st.integers(0, 999).map(lambda i: f"${i}")),
                     st.sampled_from(REGS))
load_line = st.builds(lambda a, d: f"mov {a:#x}, {d}",
                      st.integers(0, 2**20).map(lambda x: x * 8), st.sampled_from(REGS))
fp_line = st.builds(lambda m, s, d: f"{m} {s}, {d}",
                    st.sampled_from(["movapd", "addpd", "mulpd"]),
                    st.sampled_from(["%xmm0", "%xmm1"]), st.sampled_from(["%xmm0", "%xmm1"]))


@given(st.lists(st.one_of(alu_line, load_line, fp_line, st.just("cpuid")), min_size=1,
                max_size=20))
def test_format_parse_round_trip(lines):
    header = ".livein " + ", ".join([*REGS, "%xmm0", "%xmm1"])
    seq = parse_seq("\n".join([header, *lines]))
    again = parse_seq(format_seq(seq))
    assert again.ops == seq.ops
    assert format_seq(again) == format_seq(seq)
