"""Test-case composition, covert-channel receiver and measurement procedures.

A test case is an ordered list of gadgets (windowing, suppressing,
speculation primitive, disclosure, branch) plus the placement of the secret
in the memory hierarchy. ``assemble`` turns it into a textual listing and a
memory environment; ``run_covert_test`` simulates it and reads the
Flush+Reload channel.

Register conventions in assembled listings:

* ``%rax`` carries the primitive's result into the disclosure gadget;
* ``%rdx`` carries the value of a feeding slow load (``feeds=True``);
* ``%r9``/``%r10`` belong to the suppressing pointer chase;
* ``%rsi`` holds the BOUND index, ``%xmm0``/``%xmm1`` the FP gadget.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional

from . import memsys
from .isa import PRIV_CR4, PRIV_MSR_1A2, R12, RSI, XMM0, XMM1, InstrSeq, parse_seq
from .memsys import (AddrMode, CpuMode, FeatureState, Level, MemEnvironment,
                     SegmentDescriptor, SegType)
from .pipeline import ExecTrace, simulate
from .variants import ProcessorProfile, Template, VariantSpec, get_variant

SECRET_VALUE = 0x42000
SECRET_ADDR = 0x200000
SECRET2_ADDR = 0x201000
LANDING_ADDR = 0x100000
WINDOW_ADDR = 0x400000
PIN_ADDR = 0x401000
BRANCH_VAR_ADDR = 0x402000
AUX_BASE = 0x500000
CHASE_BASE = 0x600000
CHANNEL_BASE = 0x1000000
CHANNEL_SLOTS = 256
SLOT = 4096
LIMIT_SELECTOR = 0x2B
LOAD_SELECTOR = 0x33
BOUND_LIMIT = 16
FP_GADGET_OPS = 75
PAD_OPS = 3

LEVELS = ("L1", "L2", "LLC", "MEM")
TLB_STATES = ("present", "flushed")


class HarnessError(ValueError):
    pass


class UnsupportedVariant(HarnessError):
    """The variant cannot be tested on this profile or in this experiment."""


class GadgetKind(str, Enum):
    WINDOWING_SLOW_LOAD = "WINDOWING_SLOW_LOAD"
    WINDOWING_FP_CHAIN = "WINDOWING_FP_CHAIN"
    SUPPRESSING = "SUPPRESSING"
    PRIMITIVE = "PRIMITIVE"
    DISCLOSURE_I = "DISCLOSURE_I"
    DISCLOSURE_II = "DISCLOSURE_II"
    DELAY = "DELAY"
    BRANCH = "BRANCH"


@dataclass(frozen=True)
class GadgetSpec:
    kind: GadgetKind
    variant_id: Optional[str] = None
    cpuid_pos: Optional[int] = None       # FP chain; None means no CPUID
    fp_ops: int = FP_GADGET_OPS
    chase_depth: int = 1
    addsub_count: int = 0
    level: str = "L2"                     # slow load / branch variable residency
    tlb: str = "flushed"
    feeds: bool = False                   # slow load result goes to %rdx
    after_window: bool = False            # address based on %rdx
    aux_load: bool = False                # primitive result also indexes AUX_BASE
    address: int = SECRET_ADDR
    source: str = "primitive"             # disclosure: "primitive" or "window"
    mispredict: bool = True

    def __post_init__(self):
        if self.kind is GadgetKind.WINDOWING_FP_CHAIN and self.cpuid_pos is not None \
                and not 0 <= self.cpuid_pos <= self.fp_ops:
            raise HarnessError(f"cpuid_pos must lie in 0..{self.fp_ops}")
        if self.addsub_count < 0 or self.chase_depth < 1:
            raise HarnessError("negative gadget size")
        if self.level not in LEVELS or self.tlb not in TLB_STATES:
            raise HarnessError(f"bad level/tlb {self.level}/{self.tlb}")


def slow_load(level="L2", tlb="flushed", feeds=False, address=None,
              pad=False) -> GadgetSpec:
    addr = address if address is not None else (WINDOW_ADDR if feeds else PIN_ADDR)
    return GadgetSpec(GadgetKind.WINDOWING_SLOW_LOAD, level=level, tlb=tlb, feeds=feeds,
                      address=addr, addsub_count=PAD_OPS if pad else 0)


def fp_chain(cpuid_pos: Optional[int], fp_ops: int = FP_GADGET_OPS) -> GadgetSpec:
    return GadgetSpec(GadgetKind.WINDOWING_FP_CHAIN, cpuid_pos=cpuid_pos, fp_ops=fp_ops)


def suppressing(chase_depth: int) -> GadgetSpec:
    return GadgetSpec(GadgetKind.SUPPRESSING, chase_depth=chase_depth)


def primitive(variant_id: str, **kw) -> GadgetSpec:
    return GadgetSpec(GadgetKind.PRIMITIVE, variant_id=variant_id, **kw)


def disclosure(addsub_count: Optional[int] = None, source: str = "primitive") -> GadgetSpec:
    if addsub_count is None:
        return GadgetSpec(GadgetKind.DISCLOSURE_I, source=source)
    return GadgetSpec(GadgetKind.DISCLOSURE_II, addsub_count=addsub_count, source=source)


def delay(addsub_count: int) -> GadgetSpec:
    """Chained ADD/SUBs on the feeding slow load's value (%rdx)."""
    return GadgetSpec(GadgetKind.DELAY, addsub_count=addsub_count)


def branch(level: str = "LLC", mispredict: bool = True) -> GadgetSpec:
    return GadgetSpec(GadgetKind.BRANCH, level=level, tlb="present", mispredict=mispredict)


@dataclass(frozen=True)
class TestCase:
    gadgets: tuple[GadgetSpec, ...]
    secret_value: int = SECRET_VALUE
    secret_level: str = "L1"
    secret_tlb: str = "present"
    channel_base: int = CHANNEL_BASE
    legal: bool = False          # build the legal twin: variant directives not applied
    __test__ = False             # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "gadgets", tuple(self.gadgets))
        if not 0 <= self.secret_value >> 12 < CHANNEL_SLOTS:
            raise HarnessError("secret_value >> 12 must index one of the 256 channel slots")
        if self.secret_level not in LEVELS or self.secret_tlb not in TLB_STATES:
            raise HarnessError(f"bad secret placement {self.secret_level}/{self.secret_tlb}")

    def with_(self, **kw) -> "TestCase":
        return replace(self, **kw)

    @property
    def variant(self) -> Optional[VariantSpec]:
        for g in self.gadgets:
            if g.kind is GadgetKind.PRIMITIVE and g.variant_id is not None:
                return get_variant(g.variant_id)
        return None


class SignalOutcome(str, Enum):
    CORRECT = "CORRECT"
    ZERO = "ZERO"
    NONE = "NONE"


class Letter(str, Enum):
    Y = "Y"
    N = "N"
    R = "R"
    NA = "NA"


# ---------------------------------------------------------------------------
# assembly

@dataclass
class Assembled:
    seq: InstrSeq
    env: MemEnvironment
    regs: dict
    listing: str
    roles: dict = field(default_factory=dict)   # role -> op indices


class _Builder:
    def __init__(self, tc: TestCase, variant: Optional[VariantSpec]):
        self.tc = tc
        self.variant = variant
        self.lines: list[str] = []
        self.roles: dict[str, list[int]] = {}
        self.live: dict = {}
        self.n = 0
        self.tail_label = False
        mode = AddrMode(variant.addr_mode) if variant else AddrMode.BITS64
        cpu = CpuMode(variant.cpu_mode) if variant else CpuMode.USER
        self.env = MemEnvironment(cpu_mode=cpu, addr_mode=mode)
        # benign loads avoid the segment register a variant corrupts
        self.seg = "%fs:" if mode is AddrMode.BITS32 else ""
        self.user_pages = cpu is CpuMode.USER
        self.value_reg = "%rax"

    def emit(self, text: str, role: str) -> None:
        self.roles.setdefault(role, []).append(self.n)
        self.lines.append(text)
        self.n += 1

    def page(self, addr: int, **pte) -> None:
        pte.setdefault("us", self.user_pages)
        self.env.map_page(addr, **pte)

    def place(self, addr: int, level: str, tlb: str) -> None:
        if level == "MEM":
            memsys.flush_cache(self.env, addr)
        else:
            memsys.preload(self.env, addr, level)
        if tlb == "present":
            memsys.preload_tlb(self.env, addr)
        else:
            memsys.flush_tlb(self.env, addr)


def _fp_chain_lines(g: GadgetSpec) -> list[str]:
    body = []
    for i in range(g.fp_ops):
        body.append(("movapd %xmm0, %xmm1", "addpd %xmm1, %xmm0", "mulpd %xmm1, %xmm0")[i % 3])
    if g.cpuid_pos is not None:
        body.insert(g.cpuid_pos, "cpuid")
    return body


def _emit_primitive(b: _Builder, g: GadgetSpec, tc: TestCase) -> None:
    if g.variant_id is None:
        # an ordinary, permitted load of the secret
        b.page(g.address)
        b.env.write(g.address, tc.secret_value)
        b.place(g.address, tc.secret_level, tc.secret_tlb)
        base = "(%rdx)" if g.after_window else ""
        b.emit(f"movq {b.seg}{g.address:#x}{base}, %rax", "primitive")
        return
    v = get_variant(g.variant_id)
    d = {} if tc.legal else dict(v.env_directives)
    env = b.env
    addr = g.address
    base = "(%rdx)" if g.after_window else ""
    sec = tc.secret_value
    # secret page: readable by default, corrupted as the variant requires
    pte = {"us": True} if v.cpu_mode == "SUPERVISOR" else {}
    pte.update(d.get("pte", {}))
    b.page(addr, **pte)
    env.write(addr, sec)
    b.place(addr, tc.secret_level, tc.secret_tlb)
    feats = d.get("feature", {})
    if feats:
        env.features = FeatureState(feats.get("smap_enabled", False),
                                    feats.get("pke_enabled", False),
                                    feats.get("cr0_ts", False),
                                    set(feats.get("pkru_deny", [])))
    seg = b.seg
    if "segment" in d:
        sd = d["segment"]
        reg = sd["reg"]
        desc = SegmentDescriptor(
            limit=addr - 1 if sd.get("limit") == "below" else 0xFFFFFFFF,
            seg_type=SegType(sd.get("seg_type", "DATA_RW")),
            present=sd.get("present", True),
            null_selector=sd.get("null_selector", False))
        env.set_segment(reg, LIMIT_SELECTOR, desc)
        seg = f"%{reg.lower()}:"
    t = v.template
    if t is Template.ONE_INSTR_LOAD:
        b.emit(f"movq {seg}{addr:#x}{base}, %rax", "primitive")
    elif t is Template.TWO_INSTR_STORE_LOAD:
        b.emit(f"movq ${sec:#x}, {seg}{addr:#x}{base}", "primitive")
        b.emit(f"movq {seg}{addr:#x}{base}, %rax", "primitive")
        env.write(addr, 0)
    elif t is Template.TWO_INSTR_CHECK_LOAD and v.check_id == "bound":
        index = BOUND_LIMIT if not tc.legal else 0
        b.live[RSI] = index
        b.emit(f"bound %rsi, ${BOUND_LIMIT}", "primitive")
        b.emit(f"movq {b.seg}{addr:#x}{base}, %rax", "primitive")
    elif t is Template.TWO_INSTR_CHECK_LOAD:
        sl = d.get("segload", {})
        target = v.env_directives["segload"]["reg"]
        desc = SegmentDescriptor(
            base=addr - LANDING_ADDR,
            seg_type=SegType(sl.get("seg_type", "DATA_RW")),
            present=sl.get("present", True),
            dpl=sl.get("dpl", b.env.cpl),
            null_selector=sl.get("null_selector", False))
        env.segments[LOAD_SELECTOR] = desc
        b.page(LANDING_ADDR)
        memsys.preload(env, LANDING_ADDR, "L1")
        memsys.preload_tlb(env, LANDING_ADDR)
        b.emit(f"movw ${LOAD_SELECTOR:#x}, %{target.lower()}, %rbx", "primitive")
        b.emit(f"movq {b.seg}{LANDING_ADDR:#x}(%rbx), %rax", "primitive")
    elif t is Template.REG_READ:
        code = PRIV_CR4 if v.env_directives["priv"] == "cr4" else PRIV_MSR_1A2
        env.priv_regs[code] = sec
        if tc.legal:
            env.cpu_mode = CpuMode.SUPERVISOR
        b.emit("movq %cr4, %rax" if code == PRIV_CR4 else f"rdmsr ${code:#x}, %rax",
               "primitive")
    elif t is Template.FP_REG_READ:
        b.live[XMM0] = sec
        b.emit("movq %xmm0, %rax", "primitive")
    else:
        raise UnsupportedVariant(f"{v.id}: template {t.value} has no primitive builder")
    if g.aux_load:
        for off in (0, sec):
            b.page(AUX_BASE + off)
            b.place(AUX_BASE + off, "MEM", "present")
        b.emit(f"movq {b.seg}{AUX_BASE:#x}(%rax), %rcx", "aux")
    b.value_reg = "%rax"


def assemble(tc: TestCase) -> Assembled:
    """Build the listing and memory environment for a test case."""
    variant = tc.variant
    b = _Builder(tc, variant)
    env = b.env
    for slot in range(CHANNEL_SLOTS):
        a = tc.channel_base + slot * SLOT
        b.page(a)
        memsys.flush_cache(env, a)
        memsys.preload_tlb(env, a)
    for g in tc.gadgets:
        k = g.kind
        if k is GadgetKind.WINDOWING_SLOW_LOAD:
            b.page(g.address)
            b.place(g.address, g.level, g.tlb)
            dst = "%rdx" if g.feeds else "%r8"
            b.emit(f"movq {b.seg}{g.address:#x}, {dst}", "window" if g.feeds else "pin")
            for _ in range(g.addsub_count):
                b.emit("add $1, %r12", "pad")
            if g.addsub_count:
                b.live.setdefault(R12, 0)
        elif k is GadgetKind.WINDOWING_FP_CHAIN:
            b.live[XMM0] = 3
            b.live.setdefault(XMM1, 0)
            for line in _fp_chain_lines(g):
                b.emit(line, "fp_gadget")
        elif k is GadgetKind.SUPPRESSING:
            b.page(0, present=False)
            memsys.flush_tlb(env, 0)
            for i in range(g.chase_depth):
                a = CHASE_BASE + i * SLOT
                b.page(a)
                b.place(a, "L2", "present")
                env.write(a, a + SLOT if i + 1 < g.chase_depth else 0)
                src = f"{b.seg}{a:#x}" if i == 0 else f"{b.seg}(%r9)"
                b.emit(f"movq {src}, %r9", "suppress")
            b.emit(f"movq {b.seg}(%r9), %r10", "suppress")
        elif k is GadgetKind.PRIMITIVE:
            _emit_primitive(b, g, tc)
        elif k in (GadgetKind.DISCLOSURE_I, GadgetKind.DISCLOSURE_II):
            reg = b.value_reg
            if g.source == "window":
                b.emit(f"add ${tc.secret_value:#x}, %rdx, %rdi", "disclosure")
                reg = "%rdi"
            for i in range(g.addsub_count):
                b.emit(f"{'add' if i % 2 == 0 else 'sub'} $1, {reg}", "addsub")
            b.emit(f"movq {b.seg}{tc.channel_base:#x}({reg}), %rbx", "sender")
        elif k is GadgetKind.DELAY:
            for i in range(g.addsub_count):
                b.emit(f"{'add' if i % 2 == 0 else 'sub'} $1, %rdx", "addsub")
        elif k is GadgetKind.BRANCH:
            b.page(BRANCH_VAR_ADDR)
            b.place(BRANCH_VAR_ADDR, g.level, g.tlb)
            # the front end is trained toward the fall-through (disclosure)
            # path; a nonzero variable makes the branch actually jump away
            env.write(BRANCH_VAR_ADDR, 1 if g.mispredict else 0)
            b.emit(f"movq {b.seg}{BRANCH_VAR_ADDR:#x}, %r11", "branch")
            b.emit("jnz %r11, end [predict=fallthrough]", "branch")
            b.tail_label = True
        else:  # pragma: no cover
            raise HarnessError(f"unknown gadget {k}")
    lines = list(b.lines)
    if b.live:
        order = sorted(b.live)
        lines.insert(0, ".livein " + ", ".join(str(r) for r in order))
    if b.tail_label:
        lines.append("end:")
    listing = "\n".join(lines) + "\n"
    seq = parse_seq(listing)
    return Assembled(seq, env, dict(b.live), listing,
                     {r: tuple(ix) for r, ix in b.roles.items()})


# ---------------------------------------------------------------------------
# covert channel

def hit_threshold(profile: ProcessorProfile) -> float:
    lat = profile.latencies
    return (lat.l1 + lat.llc) / 2


def receive(env: MemEnvironment, profile: ProcessorProfile, secret_value: int = SECRET_VALUE,
            channel_base: int = CHANNEL_BASE) -> SignalOutcome:
    thr = hit_threshold(profile)
    hits = {s for s in range(CHANNEL_SLOTS)
            if memsys.probe_reload(env, channel_base + s * SLOT, profile) < thr}
    if secret_value >> 12 in hits:
        return SignalOutcome.CORRECT
    if 0 in hits:
        return SignalOutcome.ZERO
    return SignalOutcome.NONE


def _check_features(tc: TestCase, profile: ProcessorProfile) -> None:
    v = tc.variant
    if v is not None and not v.required_features <= profile.features:
        missing = ", ".join(sorted(v.required_features - profile.features))
        raise UnsupportedVariant(f"{v.id}: profile {profile.name!r} lacks {missing}")


def run_test(tc: TestCase, profile: ProcessorProfile, seed: int = 0,
             env: Optional[MemEnvironment] = None) -> tuple[SignalOutcome, ExecTrace, Assembled]:
    _check_features(tc, profile)
    asm = assemble(tc)
    trace = simulate(asm.seq, env if env is not None else asm.env, profile, seed, asm.regs)
    return receive(trace.env, profile, tc.secret_value, tc.channel_base), trace, asm


def run_covert_test(tc: TestCase, profile: ProcessorProfile, seed: int = 0) -> SignalOutcome:
    return run_test(tc, profile, seed)[0]


# ---------------------------------------------------------------------------
# speculation windows

@dataclass(frozen=True)
class WindowResult:
    window: int
    no_speculation: bool = False
    outcomes: tuple[SignalOutcome, ...] = ()

    def __int__(self) -> int:
        return self.window


def measure_speculation_window(template: Callable[[int], TestCase], profile: ProcessorProfile,
                               seed: int = 0, limit: Optional[int] = None) -> WindowResult:
    """Largest ADD/SUB count whose test still transmits, by linear scan.

    ``template(k)`` builds the test case with ``k`` chained ADD/SUBs in its
    Type II disclosure gadget. The scan stops at the first silent count and
    never goes past ``limit`` (default: the ROB size).
    """
    limit = profile.rob_size if limit is None else limit
    outcomes = []
    for k in range(limit + 1):
        out = run_covert_test(template(k), profile, seed)
        outcomes.append(out)
        if out is SignalOutcome.NONE:
            if k == 0:
                return WindowResult(0, True, tuple(outcomes))
            return WindowResult(k - 1, False, tuple(outcomes))
    return WindowResult(limit, False, tuple(outcomes))


def fig5_case(cpuid_pos: Optional[int], k: int, variant_id: str = "pte-us") -> TestCase:
    return TestCase((fp_chain(cpuid_pos), primitive(variant_id), disclosure(k)),
                    secret_level="L1", secret_tlb="present")


def sweep_p2(profile: ProcessorProfile, variant_id: str = "pte-us", seed: int = 0,
             positions: Optional[Iterable[int]] = None) -> list[tuple[int, int]]:
    """(effective gadget size, window) as the CPUID moves from the end to the front."""
    positions = range(FP_GADGET_OPS, -1, -1) if positions is None else positions
    curve = []
    for pos in positions:
        w = measure_speculation_window(lambda k, p=pos: fig5_case(p, k, variant_id),
                                       profile, seed)
        curve.append((FP_GADGET_OPS - pos, w.window))
    return curve


def fp_gadget_retire_times(profile: ProcessorProfile, effective: int) -> list[int]:
    """Retire cycles of a serial FP chain, relative to its first op's issue."""
    lat = profile.latencies
    lats = [(lat.fp_movapd, lat.fp_addpd, lat.fp_mulpd)[i % 3]
            for i in range(FP_GADGET_OPS - effective, FP_GADGET_OPS)]
    W, R = profile.issue_width, profile.retire_width
    retire: list[int] = []
    done = 0
    for j, l in enumerate(lats):
        dispatch = max(j // W + 1, done)
        done = dispatch + l
        r = max(done + 1, retire[j - 1] if j else 0, retire[j - R] + 1 if j >= R else 0)
        retire.append(r)
    return retire


def rob_cap_oracle(profile: ProcessorProfile, effective: int = FP_GADGET_OPS) -> int:
    """Speculation window once ROB capacity, not time, bounds the chain.

    P2 of the primitive happens in the cycle its predecessor retires (or one
    later when the retire slots of that cycle are used up). The sender must
    issue by cycle P2-2 to dispatch before the squash, so the ROB then holds
    the still-unretired gadget ops, the primitive, the chain and the sender.
    """
    R = profile.retire_width
    lat = profile.latencies
    retire = fp_gadget_retire_times(profile, effective)
    n = len(retire)
    # the primitive (an L1 hit with its TLB entry present) is P2-ready early
    ready = n // profile.issue_width + 1 + lat.l1 + 1
    p2 = max(ready, retire[-1] if n else 0, retire[n - R] + 1 if n >= R else 0)
    occupied = sum(1 for r in retire if r > p2 - 2)
    return profile.rob_size - 2 - occupied


def squash_case(k: int, variant_id: str = "pte-us") -> TestCase:
    return TestCase((slow_load("L2", "flushed", feeds=True),
                     primitive(variant_id, after_window=True),
                     disclosure(k, source="window")),
                    secret_level="LLC", secret_tlb="present")


def squash_threshold(profile: ProcessorProfile, variant_id: str = "pte-us",
                     seed: int = 0) -> Optional[int]:
    """Smallest ADD/SUB count at which the independent chain is squashed."""
    w = measure_speculation_window(lambda k: squash_case(k, variant_id), profile, seed)
    if w.no_speculation:
        return 0
    return w.window + 1 if w.window < profile.rob_size else None


def p1_independence_case(k: int, secret_tlb: str, variant_id: str = "pte-us") -> TestCase:
    return TestCase((slow_load("L2", "flushed"),
                     slow_load("L1", "present", feeds=True),
                     primitive(variant_id, aux_load=True),
                     disclosure(k, source="window")),
                    secret_level="L1", secret_tlb=secret_tlb)


def p1_window_independence(profile: ProcessorProfile, variant_id: str = "pte-us",
                           seed: int = 0) -> dict[str, int]:
    """Window with the secret's TLB entry present vs flushed (P2 pinned)."""
    return {tlb: measure_speculation_window(
        lambda k, t=tlb: p1_independence_case(k, t, variant_id), profile, seed).window
        for tlb in TLB_STATES}


# ---------------------------------------------------------------------------
# relative P1

@dataclass(frozen=True)
class DifferentialTimes:
    t_spec1: int
    t_spec2: int
    t_spec2_prime: int
    t_delay: int
    t_p1: int
    t_data: int
    chase_depth: int = 1

    @property
    def relative_p1(self) -> int:
        """P1 time relative to data arrival (negative: P1 comes first)."""
        return self.t_spec2_prime - self.t_spec2


def p1_case(variant_id: str, k: int, depth: int, data_level: str, tlb: str,
            legal: bool) -> TestCase:
    return TestCase((suppressing(depth), primitive(variant_id), disclosure(k)),
                    secret_level=data_level if legal else "MEM", secret_tlb=tlb, legal=legal)


def measure_differential(variant: VariantSpec | str, data_level: str, tlb_state: str,
                         profile: ProcessorProfile, seed: int = 0,
                         max_depth: Optional[int] = None) -> DifferentialTimes:
    v = get_variant(variant) if isinstance(variant, str) else variant
    data_level = data_level.upper()
    if data_level not in LEVELS or tlb_state not in TLB_STATES:
        raise HarnessError(f"bad placement {data_level}/{tlb_state}")
    if not v.required_features <= profile.features:
        raise UnsupportedVariant(f"{v.id}: profile {profile.name!r} lacks "
                                 + ", ".join(sorted(v.required_features - profile.features)))
    if v.terminal:
        raise UnsupportedVariant(f"{v.id}: terminal faults leave no measurable window "
                                 f"under suppression")
    if v.template is not Template.ONE_INSTR_LOAD:
        raise UnsupportedVariant(f"{v.id}: relative P1 is measured on one-instruction "
                                 f"load primitives only")
    if not profile.timing(v.check_id).speculation_allowed:
        raise UnsupportedVariant(f"{v.id}: no speculative forwarding on {profile.name!r}")
    max_depth = max_depth if max_depth is not None else profile.rob_size // 2

    def window(depth, legal):
        cap = profile.rob_size - depth - 3
        return measure_speculation_window(
            lambda k: p1_case(v.id, k, depth, data_level, tlb_state, legal),
            profile, seed, limit=cap), cap

    for depth in range(1, max_depth + 1):
        ctrl, _ = window(depth, True)
        if ctrl.no_speculation:
            continue
        fault, cap = window(depth, False)
        if fault.no_speculation:
            raise HarnessError(f"{v.id}: faulting run transmits nothing")
        if fault.window >= cap:
            raise HarnessError(f"{v.id}: suppressed window reaches ROB capacity "
                               f"at chase depth {depth}")
        # white-box timings from the k=0 runs
        _, tf, af = run_test(p1_case(v.id, 0, depth, data_level, tlb_state, False),
                             profile, seed)
        _, tc_, ac = run_test(p1_case(v.id, 0, depth, data_level, tlb_state, True),
                              profile, seed)
        prim_f = tf.entry(af.roles["primitive"][-1])
        prim_c = tc_.entry(ac.roles["primitive"][-1])
        supp = tf.p2_cycle
        return DifferentialTimes(
            t_spec1=supp - 1,
            t_spec2=fault.window,
            t_spec2_prime=ctrl.window,
            t_delay=prim_f.dispatch_cycle,
            t_p1=prim_f.fault.p1_cycle - prim_f.dispatch_cycle,
            t_data=prim_c.complete_cycle - prim_c.dispatch_cycle,
            chase_depth=depth)
    raise HarnessError(f"{v.id}: no chase depth up to {max_depth} leaves room for "
                       f"the control run")


def measure_relative_p1(variant, data_level: str, tlb_state: str,
                        profile: ProcessorProfile, seed: int = 0) -> int:
    """Relative P1 latency from two suppressed runs (negative: P1 first)."""
    return measure_differential(variant, data_level, tlb_state, profile, seed).relative_p1


# ---------------------------------------------------------------------------
# exploitability

def env_combos() -> list[tuple[str, str]]:
    return [(lv, tlb) for lv in LEVELS for tlb in TLB_STATES]


def exploitability_case(variant_id: str, level: str, tlb: str) -> TestCase:
    return TestCase((slow_load("MEM", "flushed"), primitive(variant_id), disclosure()),
                    secret_level=level, secret_tlb=tlb)


def combo_outcomes(variant: VariantSpec | str, profile: ProcessorProfile,
                   seed: int = 0, combos=None) -> dict[tuple[str, str], SignalOutcome]:
    v = get_variant(variant) if isinstance(variant, str) else variant
    combos = env_combos() if combos is None else combos
    return {c: run_covert_test(exploitability_case(v.id, *c), profile, seed) for c in combos}


def letter_from_outcomes(outcomes: Iterable[SignalOutcome]) -> Letter:
    outs = set(outcomes)
    if SignalOutcome.CORRECT in outs:
        return Letter.Y
    if SignalOutcome.ZERO in outs:
        return Letter.N
    return Letter.R


def exploitability(variant: VariantSpec | str, profile: ProcessorProfile, seed: int = 0,
                   combos=None) -> Letter:
    v = get_variant(variant) if isinstance(variant, str) else variant
    if not v.required_features <= profile.features:
        return Letter.NA
    return letter_from_outcomes(combo_outcomes(v, profile, seed, combos).values())


# ---------------------------------------------------------------------------
# prefetching

@dataclass(frozen=True)
class PrefetchReport:
    histogram: dict[int, int]
    outcomes: dict[str, int]
    final_levels: dict[str, int]


def prefetch_case(variant_id: str) -> TestCase:
    return TestCase((primitive(variant_id), disclosure()), secret_tlb="present")


def prefetch_experiment(variant: VariantSpec | str, initial_level: str, rounds: int,
                        profile: ProcessorProfile, seed: int = 0,
                        trials: int = 1) -> PrefetchReport:
    """Run the primitive ``rounds`` times and watch where the secret ends up.

    Every round is followed by a reset of the pipeline (the suppressed
    exception's handler). The handler's own memory traffic pushes a secret
    line that the round's loads left in L1 back to L2; a line that the
    terminated access was still fetching lands after the handler and
    survives into the next round. The histogram holds the secret's reload
    latency after the last round of each trial.
    """
    v = get_variant(variant) if isinstance(variant, str) else variant
    if rounds < 0 or trials < 1:
        raise HarnessError("rounds must be >= 0 and trials >= 1")
    initial_level = initial_level.upper()
    if initial_level not in LEVELS:
        raise HarnessError(f"bad level {initial_level}")
    tc = prefetch_case(v.id).with_(secret_level=initial_level)
    _check_features(tc, profile)
    asm = assemble(tc)
    hist: Counter = Counter()
    outs: Counter = Counter({o.value: 0 for o in SignalOutcome})
    finals: Counter = Counter()
    rng = random.Random(seed)
    for _ in range(trials):
        env = asm.env.clone()
        for _ in range(rounds):
            before = env.level(SECRET_ADDR)
            trace = simulate(asm.seq, env, profile, seed=rng.getrandbits(32), regs=asm.regs)
            outs[receive(trace.env, profile, tc.secret_value).value] += 1
            env = trace.env
            after = env.level(SECRET_ADDR)
            promoted = after is Level.L1 and before is not Level.L1 and \
                not _data_filled(trace, asm)
            if after is Level.L1 and not promoted:
                memsys.demote_l1(env, SECRET_ADDR)
            for s in range(CHANNEL_SLOTS):
                memsys.flush_cache(env, tc.channel_base + s * SLOT)
        hist[memsys.probe_reload(env, SECRET_ADDR, profile)] += 1
        finals[env.level(SECRET_ADDR).value] += 1
    return PrefetchReport(dict(sorted(hist.items())), dict(outs), dict(finals))


def _data_filled(trace: ExecTrace, asm: Assembled) -> bool:
    """Did a primitive load receive real data (and so fill L1 itself)?"""
    for i in asm.roles.get("primitive", ()):
        e = trace.entry(i)
        if e is not None and e.dispatch_cycle is not None and (
                e.fault is None or not (e.fault.zero_forwarded or e.fault.no_speculation)):
            return True
    return False


# ---------------------------------------------------------------------------
# branch misprediction

def mispredict_case(k: int, with_slow_windowing: bool, mispredict: bool = True) -> TestCase:
    # the windowing load gets an issue group of its own so that it does not
    # take a load port from the condition or wrong-path loads
    gadgets = [slow_load("MEM", "flushed", pad=True)] if with_slow_windowing else []
    gadgets += [branch("LLC", mispredict),
                primitive(None), disclosure(k)]
    return TestCase(tuple(gadgets), secret_level="L1", secret_tlb="present")


def misprediction_bound(profile: ProcessorProfile, with_slow_windowing: bool) -> int:
    """Largest chain that fits between the wrong-path load and branch resolution.

    Computed from issue grouping and latencies alone: the condition load,
    branch and wrong-path load all issue in the first cycles, the branch
    resolves one cycle after its operand arrives, and the sender must
    dispatch strictly before that cycle.
    """
    lat = profile.latencies
    W = profile.issue_width
    off = 1 + PAD_OPS if with_slow_windowing else 0
    cond_issue, branch_issue, load_issue = off // W, (off + 1) // W, (off + 2) // W
    cond_done = cond_issue + 1 + lat.llc
    resolve = max(branch_issue + 1, cond_done) + lat.branch
    t0 = load_issue + 1 + lat.l1
    return resolve - t0 - 1


def misprediction_window(profile: ProcessorProfile, with_slow_windowing: bool,
                         seed: int = 0, mispredict: bool = True) -> WindowResult:
    return measure_speculation_window(
        lambda k: mispredict_case(k, with_slow_windowing, mispredict), profile, seed)


# ---------------------------------------------------------------------------
# two primitives

def dual_case(k: int, same_address: bool, variant_id: str = "pte-us") -> TestCase:
    second = SECRET_ADDR if same_address else SECRET2_ADDR
    return TestCase((slow_load("L2", "flushed"),
                     slow_load("L1", "present", feeds=True),
                     primitive(variant_id),
                     delay(k),
                     primitive(variant_id, after_window=True, address=second),
                     disclosure()),
                    secret_level="L1", secret_tlb="present")


def dual_primitive_test(same_address: bool, profile: ProcessorProfile, seed: int = 0,
                        variant_id: str = "pte-us",
                        max_count: Optional[int] = None) -> list[tuple[int, SignalOutcome]]:
    """Delay the second primitive by k ADD/SUBs; record the channel outcome."""
    max_count = profile.rob_size if max_count is None else max_count
    out = []
    for k in range(max_count + 1):
        o = run_covert_test(dual_case(k, same_address, variant_id), profile, seed)
        out.append((k, o))
        if len(out) >= 4 and all(x is SignalOutcome.NONE for _, x in out[-4:]):
            break
    return out
