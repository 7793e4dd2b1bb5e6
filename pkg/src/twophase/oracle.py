"""Closed-form event-time model of the pipeline for small sequences.

The oracle never steps cycles. It derives each op's issue, dispatch,
completion and retirement time from those of earlier ops, then applies the
earliest squash event. It only covers sequences where no structural hazard
can occur, which is what makes the closed form exact:

* at most 10 ops; ALU, FP, CPUID, absolute-address LOADs on distinct pages
  and conditional branches predicted fall-through whose taken target is the
  end of the sequence;
* every unit class has at least as many ports as it has ops, and the ROB
  holds the whole sequence;
* the prefetch side effect is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import memsys
from .isa import ALU_KINDS, FP_KINDS, MASK64, InstrSeq, OpKind, build_dependency_graph
from .memsys import MemEnvironment
from .pipeline import FaultRecord, RobEntry, Status, _latency, _unit_class
from .variants import ProcessorProfile

INF = float("inf")
MAX_OPS = 10


class OracleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    entries: list[RobEntry]
    p2_cycle: Optional[int]
    exception: Optional[str]
    cycles: int

    @property
    def squash_set(self) -> frozenset[int]:
        return frozenset(e.op_index for e in self.entries if e.status is Status.SQUASHED)


def check_domain(seq: InstrSeq, env: MemEnvironment, profile: ProcessorProfile) -> None:
    n = len(seq.ops)
    if not 0 < n <= MAX_OPS:
        raise OracleDomainError(f"sequence length {n} outside 1..{MAX_OPS}")
    if profile.rob_size < n:
        raise OracleDomainError("ROB smaller than the sequence")
    if profile.prefetch.p_l1 or profile.prefetch.p_terminal_l2:
        raise OracleDomainError("prefetch side effect must be disabled")
    if env.features.cr0_ts:
        raise OracleDomainError("lazy FP state checks are outside the domain")
    allowed = ALU_KINDS | FP_KINDS | {OpKind.LOAD, OpKind.CPUID, OpKind.BRANCH_COND}
    counts = {"load": 0, "alu": 0, "fp": 0}
    pages = set()
    for i, op in enumerate(seq.ops):
        if op.kind not in allowed:
            raise OracleDomainError(f"op {i}: {op.kind.value} outside the domain")
        counts[_unit_class(op.kind)] += 1
        if op.kind is OpKind.LOAD:
            if op.mem.registers():
                raise OracleDomainError(f"op {i}: load address must be absolute")
            page = memsys.page_of(op.mem.displacement)
            if page in pages:
                raise OracleDomainError(f"op {i}: loads must touch distinct pages")
            pages.add(page)
        if op.kind is OpKind.BRANCH_COND:
            if op.branch.predicted_target is not None or seq.labels[op.branch.target] != n:
                raise OracleDomainError(f"op {i}: branch must predict fall-through "
                                        f"and target the end")
    units = {"load": profile.units.load, "alu": profile.units.alu, "fp": profile.units.fp}
    for cls, c in counts.items():
        if c > units[cls]:
            raise OracleDomainError(f"{c} {cls} ops exceed {units[cls]} ports")


def analytic_oracle(seq: InstrSeq, env: MemEnvironment, profile: ProcessorProfile,
                    regs: Optional[dict] = None) -> OracleResult:
    check_domain(seq, env, profile)
    graph = build_dependency_graph(seq)
    regs = dict(regs or {})
    n = len(seq.ops)
    W, R = profile.issue_width, profile.retire_width

    issue = [INF] * n
    dispatch = [INF] * n
    complete = [INF] * n      # INF: result never produced
    ready = [INF] * n         # retire (or P2) eligibility
    retire = [INF] * n        # retire or P2 cycle
    value = [0] * n
    fault: list[Optional[FaultRecord]] = [None] * n
    taken = [False] * n

    seg_start, seg_first = 0, 0
    for i, op in enumerate(seq.ops):
        issue[i] = seg_start + (i - seg_first) // W if seg_start < INF else INF
        srcs = graph.producers[i]

        def val(r):
            p = srcs[r]
            return regs.get(r, 0) if p is None else value[p]

        deps = set(range(i)) if op.kind is OpKind.CPUID else {p for p in srcs.values()
                                                               if p is not None}
        dispatch[i] = max([issue[i] + 1] + [complete[p] for p in deps])
        d = dispatch[i]
        kind = op.kind
        if kind in ALU_KINDS:
            b = op.imm if op.imm is not None else val(op.srcs[1])
            a = val(op.srcs[0])
            value[i] = (a + b if kind is OpKind.ALU_ADD else a - b) & MASK64
            complete[i] = d + _latency(profile, kind)
        elif kind in FP_KINDS:
            vs = [val(r) for r in op.srcs]
            value[i] = {OpKind.FP_MOVAPD: lambda: vs[0], OpKind.FP_ADDPD: lambda: vs[0] + vs[1],
                        OpKind.FP_MULPD: lambda: vs[0] * vs[1]}[kind]() & MASK64
            complete[i] = d + _latency(profile, kind)
        elif kind in (OpKind.CPUID, OpKind.BRANCH_COND):
            complete[i] = d + _latency(profile, kind)
            if kind is OpKind.BRANCH_COND:
                taken[i] = val(op.srcs[0]) != 0
        else:
            res = memsys.access(env, "read", op.mem.displacement, op.mem.segment, profile)
            first = res.first_violation
            if first is None:
                complete[i] = d + res.data_latency
                value[i] = res.value
            else:
                p1 = d + first.p1_time
                zero = res.zero_forwarded()
                fault[i] = FaultRecord(first.check_id, p1, zero, res.no_speculation) \
                    if d < INF else None
                ready[i] = p1 + 1
                if res.no_speculation:
                    complete[i] = INF
                elif zero:
                    complete[i] = p1
                else:
                    complete[i] = d + res.data_latency
                    value[i] = res.value
        if fault[i] is None:
            ready[i] = complete[i] + 1
        prev = retire[i - 1] if i else 0
        width_gap = retire[i - R] + 1 if i >= R else 0
        # nothing behind a faulted op ever reaches the head
        behind_fault = any(f is not None for f in fault[:i])
        retire[i] = INF if behind_fault else max(ready[i], prev, width_gap)
        if kind is OpKind.CPUID:
            seg_start, seg_first = retire[i], i + 1

    # squash events in cycle/stage order: branch resolution precedes P2
    events = []
    for i in range(n):
        if seq.ops[i].kind is OpKind.BRANCH_COND and taken[i] and complete[i] < INF:
            events.append((complete[i], 0, i))
        if fault[i] is not None and retire[i] < INF:
            events.append((retire[i], 1, i))
    events.sort()
    squash = [None] * n
    never = [False] * n
    p2 = exception = None
    for t, stage, i in events:
        if squash[i] is not None or never[i]:
            continue
        for j in range(i + 1, n):
            if squash[j] is None and not never[j]:
                if issue[j] < t:
                    squash[j] = t
                else:
                    never[j] = True
        if stage == 1:
            p2, exception = t, fault[i].check_id
            break

    end = p2
    if end is None:
        end = int(max(retire[i] for i in range(n) if squash[i] is None and not never[i]))

    entries = []
    for i, op in enumerate(seq.ops):
        if never[i] or issue[i] == INF:
            continue
        s = squash[i]
        limit = end if s is None else s
        disp = dispatch[i] if dispatch[i] < (INF if s is None else s) else None
        comp = complete[i] if disp is not None and complete[i] <= limit else None
        f = fault[i] if disp is not None and fault[i] is not None \
            and fault[i].p1_cycle <= limit else None
        if s is not None:
            status, ret = Status.SQUASHED, None
        elif fault[i] is None and retire[i] < INF:
            status, ret = Status.RETIRED, int(retire[i])
        elif comp is not None:
            status, ret = Status.COMPLETED, None
        elif disp is not None:
            status, ret = Status.EXECUTING, None
        else:
            status, ret = Status.ISSUED, None
        entries.append(RobEntry(i, status, int(issue[i]), _int(disp), _int(comp), ret,
                                _int(s), f, value[i] if comp is not None else 0, str(op)))
    return OracleResult(entries, p2, exception, int(end))


def _int(x):
    return None if x is None or x == INF else int(x)
