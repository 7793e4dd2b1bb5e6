"""Memory hierarchy, address translation and permission checks.

Residency and TLB state are tracked per 4 KB page. ``access`` is a pure
function of the environment: it reports how long translation and the data
fetch take and, for each permission check, when the execution unit learns
about a violation. State changes go through the explicit preload/flush
helpers and through ``apply_prefetch_side_effect``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .isa import MASK64, MicroOp, OpKind, PRIV_CR4, FP_KINDS
from .variants import (Anchor, CHECK_ORDER, TERMINAL_CHECKS, PrefetchPolicy,
                       ProcessorProfile)

PAGE = 4096


def page_of(addr: int) -> int:
    return addr & ~(PAGE - 1)


def qword(addr: int) -> int:
    return addr & ~7


class Level(str, Enum):
    L1 = "L1"
    L2 = "L2"
    LLC = "LLC"
    MEM = "MEM"


class CpuMode(str, Enum):
    USER = "USER"
    SUPERVISOR = "SUPERVISOR"


class AddrMode(str, Enum):
    BITS32 = "BITS32"
    BITS64 = "BITS64"


class SegType(str, Enum):
    DATA_RW = "DATA_RW"
    DATA_RO = "DATA_RO"
    CODE_XO = "CODE_XO"


class ConfigError(ValueError):
    """The environment cannot serve the request (not a simulated fault)."""


@dataclass
class PageTableEntry:
    present: bool = True
    rw: bool = True
    us: bool = True
    reserved_set: bool = False
    nx: bool = False
    pkey: int = 0

    def __post_init__(self):
        if not 0 <= self.pkey < 16:
            raise ValueError("pkey is a 4-bit id")

    @property
    def terminal(self) -> bool:
        return not self.present or self.reserved_set


@dataclass
class SegmentDescriptor:
    base: int = 0
    limit: int = 0xFFFFFFFF
    seg_type: SegType = SegType.DATA_RW
    present: bool = True
    dpl: int = 3
    null_selector: bool = False


@dataclass
class FeatureState:
    smap_enabled: bool = False
    pke_enabled: bool = False
    cr0_ts: bool = False
    pkru_deny: set = field(default_factory=set)  # keys with access disabled


@dataclass
class MemEnvironment:
    residency: dict = field(default_factory=dict)     # page -> Level
    dtlb: set = field(default_factory=set)            # pages
    stlb: set = field(default_factory=set)
    psc: set = field(default_factory=set)
    page_tables: dict = field(default_factory=dict)   # page -> PageTableEntry
    segments: dict = field(default_factory=dict)      # selector -> SegmentDescriptor
    seg_regs: dict = field(default_factory=dict)      # "DS" -> selector
    mem_values: dict = field(default_factory=dict)    # qword address -> value
    priv_regs: dict = field(default_factory=dict)     # privileged register code -> value
    shadow: set = field(default_factory=set)          # pages with a fault-free alias
    cpu_mode: CpuMode = CpuMode.USER
    addr_mode: AddrMode = AddrMode.BITS64
    features: FeatureState = field(default_factory=FeatureState)

    def clone(self) -> "MemEnvironment":
        # page-table entries and descriptors are never mutated by a run, so
        # only the containers need copying
        return replace(
            self, residency=dict(self.residency), dtlb=set(self.dtlb), stlb=set(self.stlb),
            psc=set(self.psc), page_tables=dict(self.page_tables),
            segments=dict(self.segments), seg_regs=dict(self.seg_regs),
            mem_values=dict(self.mem_values), priv_regs=dict(self.priv_regs),
            shadow=set(self.shadow),
            features=replace(self.features, pkru_deny=set(self.features.pkru_deny)))

    # convenience -----------------------------------------------------------
    def map_page(self, addr: int, **pte) -> PageTableEntry:
        entry = PageTableEntry(**pte)
        self.page_tables[page_of(addr)] = entry
        return entry

    def pte(self, addr: int) -> PageTableEntry:
        try:
            return self.page_tables[page_of(addr)]
        except KeyError:
            raise ConfigError(f"address {addr:#x} is not mapped") from None

    def level(self, addr: int) -> Level:
        return self.residency.get(page_of(addr), Level.MEM)

    def read(self, addr: int) -> int:
        return self.mem_values.get(qword(addr), 0)

    def write(self, addr: int, value: int) -> None:
        self.mem_values[qword(addr)] = value & MASK64

    def dtlb_present(self, addr: int) -> bool:
        return page_of(addr) in self.dtlb

    def set_segment(self, reg: str, selector: int, desc: SegmentDescriptor) -> None:
        self.segments[selector] = desc
        self.seg_regs[reg.upper()] = selector

    @property
    def cpl(self) -> int:
        return 3 if self.cpu_mode is CpuMode.USER else 0


@dataclass(frozen=True)
class CheckOutcome:
    check_id: str
    violated: bool
    anchor: Anchor
    p1_time: Optional[int]
    speculation_allowed: bool = True


@dataclass(frozen=True)
class AccessResult:
    translation_latency: int
    data_latency: Optional[int]
    checks: tuple[CheckOutcome, ...]
    value: int
    linear_addr: int = 0

    @property
    def violations(self) -> tuple[CheckOutcome, ...]:
        return tuple(c for c in self.checks if c.violated)

    @property
    def faulted(self) -> bool:
        return any(c.violated for c in self.checks)

    @property
    def terminal(self) -> bool:
        return any(c.violated and c.check_id in TERMINAL_CHECKS for c in self.checks)

    @property
    def no_speculation(self) -> bool:
        return any(c.violated and not c.speculation_allowed for c in self.checks)

    @property
    def first_violation(self) -> Optional[CheckOutcome]:
        """Violation whose P1 fires first; ties go to the earlier check."""
        v = self.violations
        if not v:
            return None
        return min(v, key=lambda c: (c.p1_time, CHECK_ORDER.index(c.check_id)))

    def zero_forwarded(self) -> bool:
        """True when P1 terminates the access before its data arrives."""
        first = self.first_violation
        if first is None or self.no_speculation:
            return False
        if self.data_latency is None:
            return True
        if first.anchor is Anchor.POST_TRANSLATION:
            # the check and the fetch share the translation; on a tie the
            # fetched data is latched first
            return first.p1_time < self.data_latency
        return first.p1_time <= self.data_latency


def _outcome(profile: ProcessorProfile, check_id: str, violated: bool,
             translation_latency: int) -> CheckOutcome:
    if not violated and check_id not in profile.checks:
        return CheckOutcome(check_id, False, Anchor.AT_DISPATCH, None)
    t = profile.timing(check_id)
    if t.anchor is Anchor.POST_TRANSLATION:
        p1 = translation_latency + t.delay
    else:
        p1 = t.delay
    return CheckOutcome(check_id, violated, t.anchor, p1, t.speculation_allowed)


def translation_latency(env: MemEnvironment, page: int, profile: ProcessorProfile) -> int:
    lat = profile.latencies
    if page in env.dtlb:
        return 0
    if page in env.stlb:
        return lat.stlb
    return lat.stlb + (lat.walk_psc if page in env.psc else lat.walk)


def _segment(env: MemEnvironment, seg_reg: str) -> SegmentDescriptor:
    selector = env.seg_regs.get(seg_reg.upper())
    if selector is None:
        # unconfigured segment registers are flat
        return SegmentDescriptor()
    try:
        return env.segments[selector]
    except KeyError:
        raise ConfigError(f"selector {selector:#x} for {seg_reg} has no descriptor") from None


def segmentation_checks(env: MemEnvironment, write: bool, offset: int,
                        seg_reg: str) -> tuple[int, list[tuple[str, bool]]]:
    """Logical-to-linear translation; returns (linear, [(check_id, violated)])."""
    desc = _segment(env, seg_reg)
    checks = [
        ("seg_null", desc.null_selector),
        ("seg_present", not desc.null_selector and not desc.present),
        ("seg_type_read", not write and desc.seg_type is SegType.CODE_XO),
        ("seg_type_write", write and desc.seg_type is not SegType.DATA_RW),
        ("seg_limit", offset + 7 > desc.limit),
    ]
    base = 0 if desc.null_selector else desc.base
    return (base + offset) & 0xFFFFFFFF, checks


def paging_checks(env: MemEnvironment, write: bool, pte: PageTableEntry) -> list[tuple[str, bool]]:
    user = env.cpu_mode is CpuMode.USER
    f = env.features
    return [
        ("pte_present", not pte.present),
        ("pte_reserved", pte.reserved_set),
        ("pte_us", user and not pte.us),
        ("pte_rw", write and not pte.rw),
        ("smap", not user and pte.us and f.smap_enabled),
        ("pkey", f.pke_enabled and pte.us and pte.pkey in f.pkru_deny),
    ]


def access(env: MemEnvironment, op_kind: str, logical_addr: int, segment: str,
           profile: ProcessorProfile) -> AccessResult:
    """Timing and check outcomes of one data access.

    ``op_kind`` is ``"read"`` or ``"write"``. Latencies are relative to the
    dispatch cycle. Writes complete into the store buffer after the store
    latency; reads complete after translation plus the fetch from the current
    residency level. A terminal translation fault leaves no physical address
    for the lower levels, so such reads only see data that is already in L1.
    """
    if op_kind not in ("read", "write"):
        raise ValueError(op_kind)
    write = op_kind == "write"
    lat = profile.latencies
    raw: list[tuple[str, bool]] = []
    linear = logical_addr & MASK64
    if env.addr_mode is AddrMode.BITS32:
        linear, seg = segmentation_checks(env, write, logical_addr, segment)
        raw.extend(seg)
    page = page_of(linear)
    pte = env.pte(linear)
    tr = translation_latency(env, page, profile)
    raw.extend(paging_checks(env, write, pte))
    if write:
        data = lat.store
    elif pte.terminal:
        data = tr + lat.l1 if env.level(linear) is Level.L1 else None
    else:
        data = tr + lat.level(env.level(linear).value)
    checks = tuple(_outcome(profile, cid, bad, tr) for cid, bad in raw)
    return AccessResult(tr, data, checks, env.read(linear), linear)


def register_access(env: MemEnvironment, op: MicroOp, profile: ProcessorProfile,
                    latency: int) -> AccessResult:
    """Checks on register-only micro-ops (privileged reads, lazy FP state)."""
    raw: list[tuple[str, bool]] = []
    value = 0
    if op.kind is OpKind.REG_PRIV_READ:
        cid = "cr4_read" if op.imm == PRIV_CR4 else "msr_read"
        raw.append((cid, env.cpu_mode is CpuMode.USER))
        value = env.priv_regs.get(op.imm, 0)
    elif op.kind in FP_KINDS:
        raw.append(("cr0_ts", env.features.cr0_ts))
    checks = tuple(_outcome(profile, cid, bad, 0) for cid, bad in raw)
    return AccessResult(0, latency, checks, value)


def bound_check(index: int, limit: int, profile: ProcessorProfile,
                latency: int) -> AccessResult:
    """BOUND raises when the index is outside ``[0, limit)``."""
    checks = (_outcome(profile, "bound", index >= limit, 0),)
    return AccessResult(0, latency, checks, 0)


def segment_load(env: MemEnvironment, selector: int, target: str,
                 profile: ProcessorProfile, latency: int) -> AccessResult:
    """Load a segment register; the result value is the segment base."""
    try:
        desc = env.segments[selector]
    except KeyError:
        raise ConfigError(f"selector {selector:#x} has no descriptor") from None
    stack = target.upper() == "SS"
    if stack:
        raw = [
            ("segload_null", desc.null_selector),
            ("segload_type", not desc.null_selector and desc.seg_type is not SegType.DATA_RW),
            ("segload_present", not desc.null_selector and not desc.present),
            ("segload_dpl", not desc.null_selector and desc.dpl != env.cpl),
        ]
    else:
        raw = [
            ("segload_type", not desc.null_selector and desc.seg_type is SegType.CODE_XO),
            ("segload_present", not desc.null_selector and not desc.present),
        ]
    checks = tuple(_outcome(profile, cid, bad, 0) for cid, bad in raw)
    return AccessResult(0, latency, checks, 0 if desc.null_selector else desc.base)


# ---------------------------------------------------------------------------
# environment control

def preload(env: MemEnvironment, addr: int, level) -> None:
    """Place the line at ``level`` through its shadow alias (never faults).

    L2 means L2+LLC but not L1; LLC means LLC only.
    """
    level = Level(level)
    if level is Level.MEM:
        raise ValueError("use flush_cache to place data in memory")
    env.residency[page_of(addr)] = level
    env.shadow.add(page_of(addr))


def flush_cache(env: MemEnvironment, addr: int) -> None:
    env.residency[page_of(addr)] = Level.MEM


def preload_tlb(env: MemEnvironment, addr: int) -> None:
    page = page_of(addr)
    env.dtlb.add(page)
    env.stlb.add(page)
    env.psc.add(page)


def flush_tlb(env: MemEnvironment, addr: int) -> None:
    page = page_of(addr)
    env.dtlb.discard(page)
    env.stlb.discard(page)
    env.psc.discard(page)


def flush_all_tlb(env: MemEnvironment) -> None:
    env.dtlb.clear()
    env.stlb.clear()
    env.psc.clear()


def fill(env: MemEnvironment, addr: int) -> None:
    """A completed fetch leaves the line in every cache level."""
    env.residency[page_of(addr)] = Level.L1


def fill_tlb(env: MemEnvironment, addr: int) -> None:
    preload_tlb(env, addr)


def demote_l1(env: MemEnvironment, addr: int) -> None:
    if env.level(addr) is Level.L1:
        env.residency[page_of(addr)] = Level.L2


def probe_reload(env: MemEnvironment, addr: int, profile: ProcessorProfile) -> int:
    """Reload latency for the line's current level (non-destructive)."""
    return profile.latencies.level(env.level(addr).value)


def apply_prefetch_side_effect(env: MemEnvironment, addr: int, policy: PrefetchPolicy,
                               rng, terminal: bool = False) -> None:
    """Side effect of a faulting load cut off at P1 with its fetch in flight.

    Lines already in L2 or the LLC are pulled into L2, and occasionally into
    L1. Lines in memory stay there. Terminal faults only reach L2, with
    probability ``p_terminal_l2``.
    """
    level = env.level(addr)
    page = page_of(addr)
    if terminal:
        if level in (Level.L2, Level.LLC) and policy.p_terminal_l2 > 0 \
                and rng.random() < policy.p_terminal_l2:
            env.residency[page] = Level.L2
        return
    if level not in (Level.L2, Level.LLC):
        return
    env.residency[page] = Level.L2
    if policy.p_l1 > 0 and rng.random() < policy.p_l1:
        env.residency[page] = Level.L1


# ---------------------------------------------------------------------------
# fixtures

def env_to_dict(env: MemEnvironment) -> dict:
    def hx(x):
        return f"{x:#x}"
    return {
        "cpu_mode": env.cpu_mode.value,
        "addr_mode": env.addr_mode.value,
        "features": {"smap_enabled": env.features.smap_enabled,
                     "pke_enabled": env.features.pke_enabled,
                     "cr0_ts": env.features.cr0_ts,
                     "pkru_deny": sorted(env.features.pkru_deny)},
        "page_tables": {hx(p): {"present": e.present, "rw": e.rw, "us": e.us,
                                "reserved_set": e.reserved_set, "nx": e.nx,
                                "pkey": e.pkey}
                        for p, e in sorted(env.page_tables.items())},
        "segments": {hx(s): {"base": hx(d.base), "limit": hx(d.limit),
                             "seg_type": d.seg_type.value, "present": d.present,
                             "dpl": d.dpl, "null_selector": d.null_selector}
                     for s, d in sorted(env.segments.items())},
        "seg_regs": {r: hx(s) for r, s in sorted(env.seg_regs.items())},
        "residency": {hx(p): lv.value for p, lv in sorted(env.residency.items())},
        "dtlb": [hx(p) for p in sorted(env.dtlb)],
        "stlb": [hx(p) for p in sorted(env.stlb)],
        "psc": [hx(p) for p in sorted(env.psc)],
        "shadow": [hx(p) for p in sorted(env.shadow)],
        "mem_values": {hx(a): hx(v) for a, v in sorted(env.mem_values.items())},
        "priv_regs": {hx(a): hx(v) for a, v in sorted(env.priv_regs.items())},
    }


_ENV_FIELDS = {"cpu_mode", "addr_mode", "features", "page_tables", "segments",
               "seg_regs", "residency", "dtlb", "stlb", "psc", "shadow",
               "mem_values", "priv_regs"}


def env_from_dict(d: dict) -> MemEnvironment:
    unknown = set(d) - _ENV_FIELDS
    if unknown:
        raise ConfigError(f"unknown environment field(s) {sorted(unknown)}")

    def i(x):
        return int(x, 0) if isinstance(x, str) else int(x)
    feats = d.get("features", {})
    env = MemEnvironment(
        cpu_mode=CpuMode(d.get("cpu_mode", "USER")),
        addr_mode=AddrMode(d.get("addr_mode", "BITS64")),
        features=FeatureState(feats.get("smap_enabled", False),
                              feats.get("pke_enabled", False),
                              feats.get("cr0_ts", False),
                              set(feats.get("pkru_deny", []))),
    )
    env.page_tables = {i(p): PageTableEntry(**e) for p, e in d.get("page_tables", {}).items()}
    env.segments = {i(s): SegmentDescriptor(i(v["base"]), i(v["limit"]),
                                            SegType(v["seg_type"]), v["present"],
                                            v["dpl"], v["null_selector"])
                    for s, v in d.get("segments", {}).items()}
    env.seg_regs = {r: i(s) for r, s in d.get("seg_regs", {}).items()}
    env.residency = {i(p): Level(v) for p, v in d.get("residency", {}).items()}
    env.dtlb = {i(p) for p in d.get("dtlb", [])}
    env.stlb = {i(p) for p in d.get("stlb", [])}
    env.psc = {i(p) for p in d.get("psc", [])}
    env.shadow = {i(p) for p in d.get("shadow", [])}
    env.mem_values = {i(a): i(v) for a, v in d.get("mem_values", {}).items()}
    env.priv_regs = {i(a): i(v) for a, v in d.get("priv_regs", {}).items()}
    return env


def dumps_env(env: MemEnvironment) -> str:
    return json.dumps(env_to_dict(env), indent=2, sort_keys=True) + "\n"


def loads_env(text: str) -> MemEnvironment:
    return env_from_dict(json.loads(text))
