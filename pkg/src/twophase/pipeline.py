"""Cycle-stepped out-of-order core with two-phase fault handling.

Each cycle runs these stages in order:

1. P1 events: execution units learn about violated checks. Zero results
   were already scheduled at dispatch; here the prefetch side effect of a
   terminated access is applied.
2. Branch resolution: a mispredicted branch squashes every younger entry
   and redirects issue.
3. Retire: up to ``retire_width`` head entries. A faulted head whose P1 has
   passed triggers P2 instead: all younger entries are squashed and issue
   stops for good.
4. Dispatch: oldest ready entries first, limited per unit class. An entry is
   ready one cycle after issue once every producer's result is available
   (same-cycle bypass).
5. Issue: up to ``issue_width`` ops along the predicted path into the ROB.

Memory side effects of an access (cache and TLB fills) happen at dispatch,
when the request leaves the load unit. A squash does not undo them, which is
what makes the covert channel work.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import memsys
from .isa import (ALU_KINDS, FP_KINDS, MASK64, InstrSeq, MicroOp, OpKind, Register,
                  build_dependency_graph)
from .memsys import AccessResult, MemEnvironment
from .variants import ProcessorProfile


class Status(str, Enum):
    ISSUED = "ISSUED"
    EXECUTING = "EXECUTING"
    COMPLETED = "COMPLETED"
    RETIRED = "RETIRED"
    SQUASHED = "SQUASHED"


@dataclass(frozen=True)
class FaultRecord:
    check_id: str
    p1_cycle: int
    zero_forwarded: bool
    no_speculation: bool


class SimulationError(RuntimeError):
    def __init__(self, msg: str, dump: str = ""):
        super().__init__(msg)
        self.dump = dump


class _Entry:
    __slots__ = ("seq", "op_index", "op", "issue", "dispatch", "complete", "retire",
                 "squash", "fault", "result", "producers", "waiting", "consumers",
                 "ready_at", "p2_ready", "unit", "access", "addr", "srcmap")

    def __init__(self, seq: int, op_index: int, op: MicroOp, issue: int):
        self.seq = seq
        self.op_index = op_index
        self.op = op
        self.issue = issue
        self.dispatch: Optional[int] = None
        self.complete: Optional[int] = None   # cycle the result becomes visible
        self.retire: Optional[int] = None
        self.squash: Optional[int] = None
        self.fault: Optional[FaultRecord] = None
        self.result = 0
        self.producers: list[_Entry] = []
        self.waiting = 0
        self.consumers: list[_Entry] = []
        self.ready_at: Optional[int] = None
        self.p2_ready: Optional[int] = None
        self.unit = _unit_class(op.kind)
        self.access: Optional[AccessResult] = None
        self.addr: Optional[int] = None
        self.srcmap: dict = {}


def _unit_class(kind: OpKind) -> str:
    if kind in (OpKind.LOAD, OpKind.STORE):
        return "load"
    if kind in FP_KINDS:
        return "fp"
    return "alu"


@dataclass(frozen=True)
class RobEntry:
    op_index: int
    status: Status
    issue_cycle: int
    dispatch_cycle: Optional[int]
    complete_cycle: Optional[int]
    retire_cycle: Optional[int]
    squash_cycle: Optional[int]
    fault: Optional[FaultRecord]
    result: int
    text: str = ""


@dataclass
class ExecTrace:
    entries: list[RobEntry]
    p2_cycle: Optional[int]
    exception: Optional[str]
    env: MemEnvironment
    cycles: int
    branch_squashes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def squash_set(self) -> frozenset[int]:
        return frozenset(e.op_index for e in self.entries if e.status is Status.SQUASHED)

    def entry(self, op_index: int) -> Optional[RobEntry]:
        """The last dynamic instance of a program op (None if never issued)."""
        found = None
        for e in self.entries:
            if e.op_index == op_index:
                found = e
        return found

    def executed(self, op_index: int) -> bool:
        e = self.entry(op_index)
        return e is not None and e.dispatch_cycle is not None

    def dump(self) -> str:
        return format_trace(self.entries, self.p2_cycle, self.exception)


def format_trace(entries, p2_cycle=None, exception=None) -> str:
    """Line-oriented event dump: ``cycle op event [detail]``, sorted by cycle."""
    events = []
    order = {"issue": 0, "dispatch": 1, "p1": 2, "complete": 3, "retire": 4, "squash": 5}
    for e in entries:
        label = f"#{e.op_index}"
        for name, cyc in (("issue", e.issue_cycle), ("dispatch", e.dispatch_cycle),
                          ("complete", e.complete_cycle), ("retire", e.retire_cycle),
                          ("squash", e.squash_cycle)):
            if cyc is not None:
                detail = e.text if name == "issue" else ""
                if name == "complete":
                    detail = f"{e.result:#x}"
                events.append((cyc, order[name], label, name, detail))
        if e.fault is not None:
            f = e.fault
            detail = f"{f.check_id} zero={int(f.zero_forwarded)} nospec={int(f.no_speculation)}"
            events.append((f.p1_cycle, order["p1"], label, "p1", detail))
    lines = [f"{c:6d} {lab:>5} {name:<8} {det}".rstrip()
             for c, _, lab, name, det in sorted(events, key=lambda t: (t[0], t[1], int(t[2][1:])))]
    if p2_cycle is not None:
        lines.append(f"{p2_cycle:6d}     - p2       {exception}")
    return "\n".join(lines) + "\n"


def _latency(profile: ProcessorProfile, kind: OpKind) -> int:
    lat = profile.latencies
    return {
        OpKind.ALU_ADD: lat.alu, OpKind.ALU_SUB: lat.alu,
        OpKind.FP_MOVAPD: lat.fp_movapd, OpKind.FP_ADDPD: lat.fp_addpd,
        OpKind.FP_MULPD: lat.fp_mulpd, OpKind.CPUID: lat.cpuid,
        OpKind.BRANCH_COND: lat.branch, OpKind.BRANCH_INDIRECT: lat.branch,
        OpKind.STORE: lat.store, OpKind.REG_PRIV_READ: lat.reg_read,
        OpKind.SEG_LOAD: lat.seg_load, OpKind.BOUND_CHECK: lat.bound,
    }[kind]


class _Core:
    def __init__(self, seq: InstrSeq, env: MemEnvironment, profile: ProcessorProfile,
                 seed: int, regs: dict, max_cycles: int):
        self.seq = seq
        self.env = env
        self.profile = profile
        self.rng = random.Random(seed)
        self.regs = dict(regs)
        self.max_cycles = max_cycles
        self.entries: list[_Entry] = []
        self.rob: deque[_Entry] = deque()
        self.rename: dict[Register, _Entry] = {}
        self.pc = 0
        self.halted = False
        self.cpuid_inflight = 0
        self.pending_stores: set[int] = set()   # seqs of undispatched stores
        self.ready: list = []                   # heap of (ready_at, seq, entry)
        self.events: list = []                  # heap of (cycle, stage, seq, entry)
        self.p2_cycle: Optional[int] = None
        self.exception: Optional[str] = None
        self.branch_squashes: list[tuple[int, int]] = []
        self.units = {"load": profile.units.load, "alu": profile.units.alu,
                      "fp": profile.units.fp}

    # -- bookkeeping --------------------------------------------------------
    def _squash_younger(self, than: _Entry, cycle: int) -> None:
        while self.rob and self.rob[-1].seq > than.seq:
            e = self.rob.pop()
            e.squash = cycle
            if e.op.kind is OpKind.CPUID:
                self.cpuid_inflight -= 1
            self.pending_stores.discard(e.seq)
        self.rename = {e.op.dst: e for e in self.rob if e.op.dst is not None}

    def _set_result(self, e: _Entry, cycle: Optional[int], value: int) -> None:
        e.result = value & MASK64
        e.complete = cycle
        if cycle is None:
            return
        for c in e.consumers:
            c.waiting -= 1
            if c.waiting == 0:
                self._make_ready(c)

    def _make_ready(self, e: _Entry) -> None:
        t = e.issue + 1
        for p in e.producers:
            t = max(t, p.complete)
        e.ready_at = t
        heapq.heappush(self.ready, (t, e.seq, e))

    def _src(self, e: _Entry, reg: Register) -> int:
        p = e.srcmap.get(reg)
        return self.regs.get(reg, 0) if p is None else p.result

    # -- issue --------------------------------------------------------------
    def _can_issue(self) -> bool:
        return not (self.halted or self.pc >= len(self.seq.ops) or self.cpuid_inflight
                    or len(self.rob) >= self.profile.rob_size)

    def _issue(self, cycle: int) -> None:
        for _ in range(self.profile.issue_width):
            if not self._can_issue():
                return
            idx = self.pc
            op = self.seq.ops[idx]
            e = _Entry(len(self.entries), idx, op, cycle)
            e.srcmap = {r: self.rename.get(r) for r in op.reads()}
            if op.kind is OpKind.CPUID:
                producers = list(self.rob)
                self.cpuid_inflight += 1
            else:
                producers = [p for p in e.srcmap.values() if p is not None]
            self.entries.append(e)
            self.rob.append(e)
            if op.kind is OpKind.STORE:
                self.pending_stores.add(e.seq)
            e.producers = list(dict.fromkeys(producers))
            for p in e.producers:
                if p.complete is None:
                    e.waiting += 1
                    p.consumers.append(e)
            if e.waiting == 0:
                self._make_ready(e)
            if op.dst is not None:
                self.rename[op.dst] = e
            if op.branch is not None:
                self.pc = self.seq.target_index(op.branch.predicted_target, idx + 1)
            else:
                self.pc = idx + 1

    # -- dispatch and execute -----------------------------------------------
    def _dispatch(self, cycle: int) -> None:
        cands = []
        while self.ready and self.ready[0][0] <= cycle:
            cands.append(heapq.heappop(self.ready))
        cands.sort(key=lambda t: t[1])
        used = {"load": 0, "alu": 0, "fp": 0}
        oldest_store = min(self.pending_stores, default=None)
        for _, sq, e in cands:
            if e.squash is not None:
                continue
            blocked = used[e.unit] >= self.units[e.unit] or (
                e.op.kind is OpKind.LOAD and oldest_store is not None and oldest_store < sq)
            if blocked:
                heapq.heappush(self.ready, (cycle + 1, sq, e))
                continue
            used[e.unit] += 1
            e.dispatch = cycle
            if e.op.kind is OpKind.STORE:
                self.pending_stores.discard(sq)
            self._execute(e, cycle)
            if e.op.kind is OpKind.STORE:
                oldest_store = min(self.pending_stores, default=None)

    def _address(self, e: _Entry) -> int:
        m = e.op.mem
        addr = m.displacement
        if m.base is not None:
            addr += self._src(e, m.base)
        if m.index is not None:
            addr += self._src(e, m.index) * m.scale
        return addr & MASK64

    def _resolve(self, e: _Entry, res: AccessResult, cycle: int, value: int) -> None:
        """Schedule the result of an op whose checks are described by ``res``."""
        e.access = res
        first = res.first_violation
        if first is None:
            self._set_result(e, cycle + res.data_latency, value)
            return
        p1 = cycle + first.p1_time
        zero = res.zero_forwarded()
        e.fault = FaultRecord(first.check_id, p1, zero, res.no_speculation)
        e.p2_ready = p1 + 1
        if res.no_speculation:
            self._set_result(e, None, 0)
        elif zero:
            self._set_result(e, p1, 0)
            if e.op.kind is OpKind.LOAD:
                heapq.heappush(self.events, (p1, 0, e.seq, e))
        else:
            self._set_result(e, cycle + res.data_latency, value)

    def _execute(self, e: _Entry, cycle: int) -> None:
        op, kind, prof, env = e.op, e.op.kind, self.profile, self.env
        if kind in ALU_KINDS:
            a = self._src(e, op.srcs[0])
            b = op.imm if op.imm is not None else self._src(e, op.srcs[1])
            v = a + b if kind is OpKind.ALU_ADD else a - b
            self._set_result(e, cycle + _latency(prof, kind), v)
        elif kind in FP_KINDS:
            vals = [self._src(e, r) for r in op.srcs]
            if kind is OpKind.FP_MOVAPD:
                v = vals[0]
            elif kind is OpKind.FP_ADDPD:
                v = vals[0] + vals[1]
            else:
                v = vals[0] * vals[1]
            lat = _latency(prof, kind)
            self._resolve(e, memsys.register_access(env, op, prof, lat), cycle, v)
        elif kind is OpKind.LOAD:
            self._execute_load(e, cycle)
        elif kind is OpKind.STORE:
            e.addr = self._address(e)
            v = self._src(e, op.srcs[0]) if op.srcs else op.imm
            res = memsys.access(env, "write", e.addr, op.mem.segment, prof)
            if not res.terminal:
                memsys.fill_tlb(env, res.linear_addr)
            self._resolve(e, res, cycle, v)
        elif kind in (OpKind.BRANCH_COND, OpKind.BRANCH_INDIRECT):
            idx = e.op_index
            if kind is OpKind.BRANCH_COND:
                taken = self._src(e, op.srcs[0]) != 0
                actual = self.seq.target_index(op.branch.target if taken else None, idx + 1)
            else:
                actual = self._src(e, op.srcs[0])
                if not idx < actual <= len(self.seq.ops):
                    raise SimulationError(f"op {idx}: indirect target {actual} is not a "
                                          f"forward op index")
            e.addr = actual
            done = cycle + _latency(prof, kind)
            self._set_result(e, done, actual)
            heapq.heappush(self.events, (done, 1, e.seq, e))
        elif kind is OpKind.REG_PRIV_READ:
            res = memsys.register_access(env, op, prof, _latency(prof, kind))
            self._resolve(e, res, cycle, res.value)
        elif kind is OpKind.SEG_LOAD:
            res = memsys.segment_load(env, op.imm, op.segment, prof, _latency(prof, kind))
            self._resolve(e, res, cycle, res.value)
        elif kind is OpKind.BOUND_CHECK:
            res = memsys.bound_check(self._src(e, op.srcs[0]), op.imm, prof,
                                     _latency(prof, kind))
            self._resolve(e, res, cycle, 0)
        elif kind is OpKind.CPUID:
            self._set_result(e, cycle + _latency(prof, kind), 0)
        else:  # pragma: no cover
            raise SimulationError(f"unhandled op kind {kind}")

    def _execute_load(self, e: _Entry, cycle: int) -> None:
        env, prof = self.env, self.profile
        e.addr = addr = self._address(e)
        for older in reversed(self.rob):
            if older.seq < e.seq and older.op.kind is OpKind.STORE \
                    and memsys.qword(older.addr) == memsys.qword(addr):
                # store-to-load forwarding from the store buffer
                done = None if older.complete is None else max(cycle + 1, older.complete)
                self._set_result(e, done, older.result)
                return
        res = memsys.access(env, "read", addr, e.op.mem.segment, prof)
        if not res.terminal:
            memsys.fill_tlb(env, res.linear_addr)
        if not res.faulted or not (res.zero_forwarded() or res.no_speculation):
            memsys.fill(env, res.linear_addr)
        self._resolve(e, res, cycle, res.value)

    # -- events, retire -----------------------------------------------------
    def _events(self, cycle: int) -> None:
        while self.events and self.events[0][0] <= cycle:
            _, stage, _, e = heapq.heappop(self.events)
            if e.squash is not None:
                continue
            if stage == 0:
                memsys.apply_prefetch_side_effect(self.env, e.access.linear_addr,
                                                  self.profile.prefetch, self.rng,
                                                  terminal=e.access.terminal)
            else:
                predicted = self.seq.target_index(e.op.branch.predicted_target,
                                                  e.op_index + 1)
                if e.addr != predicted:
                    self._squash_younger(e, cycle)
                    self.branch_squashes.append((cycle, e.op_index))
                    self.pc = e.addr

    def _retire(self, cycle: int) -> bool:
        """Returns True once P2 has fired."""
        for _ in range(self.profile.retire_width):
            if not self.rob:
                return False
            h = self.rob[0]
            if h.fault is not None:
                if cycle >= h.p2_ready:
                    self._squash_younger(h, cycle)
                    self.p2_cycle = cycle
                    self.exception = h.fault.check_id
                    self.halted = True
                    return True
                return False
            if h.complete is None or cycle < h.complete + 1:
                return False
            h.retire = cycle
            self.rob.popleft()
            if h.op.kind is OpKind.STORE:
                self.env.write(h.addr, h.result)
            elif h.op.kind is OpKind.CPUID:
                self.cpuid_inflight -= 1
        return False

    def _next_cycle(self, cycle: int) -> Optional[int]:
        cands = []
        if self._can_issue():
            return cycle + 1
        if self.ready:
            cands.append(self.ready[0][0])
        if self.events:
            cands.append(self.events[0][0])
        if self.rob:
            h = self.rob[0]
            if h.fault is not None:
                cands.append(h.p2_ready)
            elif h.complete is not None:
                cands.append(h.complete + 1)
        if not cands:
            return None
        return max(cycle + 1, min(cands))

    def run(self) -> int:
        n = len(self.seq.ops)
        cycle = 0
        while True:
            if cycle > self.max_cycles:
                raise SimulationError(f"cycle budget {self.max_cycles} exceeded",
                                      format_trace(self._records(cycle)))
            self._events(cycle)
            if self._retire(cycle):
                return cycle
            self._dispatch(cycle)
            self._issue(cycle)
            if not self.rob and (self.halted or self.pc >= n):
                return cycle
            nxt = self._next_cycle(cycle)
            if nxt is None:
                raise SimulationError(f"deadlock at cycle {cycle}",
                                      format_trace(self._records(cycle)))
            cycle = nxt

    def _records(self, end: int) -> list[RobEntry]:
        out = []
        for e in self.entries:
            complete, fault, dispatch = e.complete, e.fault, e.dispatch
            if e.squash is not None:
                status = Status.SQUASHED
                if complete is not None and complete > e.squash:
                    complete = None
                if fault is not None and fault.p1_cycle > e.squash:
                    fault = None
            elif e.retire is not None:
                status = Status.RETIRED
            elif complete is not None and complete <= end:
                status = Status.COMPLETED
            elif dispatch is not None:
                status = Status.EXECUTING
                complete = None
            else:
                status = Status.ISSUED
            out.append(RobEntry(e.op_index, status, e.issue, dispatch, complete,
                                e.retire, e.squash, fault,
                                e.result if complete is not None else 0, str(e.op)))
        return out


def simulate(seq: InstrSeq, env: MemEnvironment, profile: ProcessorProfile,
             seed: int = 0, regs: Optional[dict] = None,
             max_cycles: int = 100_000) -> ExecTrace:
    """Run ``seq`` to completion (or to P2) on a copy of ``env``.

    ``regs`` gives initial values for the sequence's live-in registers; every
    declared live-in must have one.
    """
    build_dependency_graph(seq)
    regs = dict(regs or {})
    missing = sorted(str(r) for r in seq.live_ins if r not in regs)
    if missing:
        raise ValueError("live-in registers without initial values: " + ", ".join(missing))
    core = _Core(seq, env.clone(), profile, seed, regs, max_cycles)
    end = core.run()
    return ExecTrace(core._records(end), core.p2_cycle, core.exception, core.env, end,
                     core.branch_squashes)
