"""Speculation-primitive catalog and processor profiles.

A profile carries the latency table, ROB geometry and, per permission check,
*when* the execution unit learns about a violation (``CheckTiming``). The
exploitability letters are not stored as outcomes; they emerge from running
the simulator against these timings. Profiles may declare the letters they
are expected to reproduce, which ``load_profile`` verifies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

SCHEMA_VERSION = 1


class Anchor(str, Enum):
    POST_SEGMENTATION = "POST_SEGMENTATION"
    POST_TRANSLATION = "POST_TRANSLATION"
    AT_DISPATCH = "AT_DISPATCH"


class Template(str, Enum):
    ONE_INSTR_LOAD = "ONE_INSTR_LOAD"
    TWO_INSTR_STORE_LOAD = "TWO_INSTR_STORE_LOAD"
    TWO_INSTR_CHECK_LOAD = "TWO_INSTR_CHECK_LOAD"
    REG_READ = "REG_READ"
    FP_REG_READ = "FP_REG_READ"
    BRANCH = "BRANCH"


# Check ids in the order the hardware evaluates them; ties in P1 time are
# broken by this order.
CHECK_ORDER = (
    "seg_null", "seg_present", "seg_type_read", "seg_type_write", "seg_limit",
    "segload_type", "segload_present", "segload_null", "segload_dpl",
    "pte_present", "pte_reserved", "pte_us", "pte_rw", "smap", "pkey",
    "cr0_ts", "cr4_read", "msr_read", "bound",
)
TERMINAL_CHECKS = frozenset({"pte_present", "pte_reserved"})


@dataclass(frozen=True)
class CheckTiming:
    check_id: str
    speculation_allowed: bool = True
    anchor: Anchor = Anchor.POST_TRANSLATION
    delay: int = 0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError(f"{self.check_id}: negative delay")


@dataclass(frozen=True)
class Latencies:
    l1: int = 4
    l2: int = 16
    llc: int = 70
    mem: int = 200
    stlb: int = 8
    walk: int = 100
    walk_psc: int = 30
    alu: int = 1
    fp_movapd: int = 1
    fp_addpd: int = 4
    fp_mulpd: int = 4
    cpuid: int = 1
    branch: int = 1
    store: int = 1
    reg_read: int = 1
    seg_load: int = 1
    bound: int = 1

    def __post_init__(self):
        if not 0 < self.l1 < self.l2 < self.llc < self.mem:
            raise ValueError("cache latencies must be strictly increasing")
        if min(self.stlb, self.walk, self.walk_psc) <= 0:
            raise ValueError("translation latencies must be positive")

    def level(self, level: str) -> int:
        return {"L1": self.l1, "L2": self.l2, "LLC": self.llc, "MEM": self.mem}[level]


@dataclass(frozen=True)
class PrefetchPolicy:
    p_l1: float = 1 / 1000
    p_terminal_l2: float = 0.0


@dataclass(frozen=True)
class Units:
    load: int = 2
    alu: int = 2
    fp: int = 1


@dataclass(frozen=True)
class ProcessorProfile:
    name: str
    checks: Mapping[str, CheckTiming]
    latencies: Latencies = Latencies()
    rob_size: int = 148
    issue_width: int = 4
    retire_width: int = 4
    units: Units = Units()
    prefetch: PrefetchPolicy = PrefetchPolicy()
    features: frozenset = frozenset()
    expected: Mapping[str, str] = field(default_factory=dict)
    description: str = ""

    def timing(self, check_id: str) -> CheckTiming:
        try:
            return self.checks[check_id]
        except KeyError:
            raise ProfileError(f"profile {self.name!r} has no timing for check "
                               f"{check_id!r}") from None

    def with_(self, **kw) -> "ProcessorProfile":
        return replace(self, **kw)


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    id: str
    name: str
    template: Template
    check_id: str
    required_features: frozenset = frozenset()
    addr_mode: str = "BITS64"
    cpu_mode: str = "USER"
    env_directives: Mapping[str, Any] = field(default_factory=dict)
    mark: str = "*"

    @property
    def terminal(self) -> bool:
        return self.check_id in TERMINAL_CHECKS


def _v(id, name, template, check, feats=(), mode="BITS64", cpu="USER", mark=None,
       **directives) -> VariantSpec:
    if mark is None:
        mark = "*" if template is Template.ONE_INSTR_LOAD else "**"
    return VariantSpec(id, name, template, check, frozenset(feats), mode, cpu,
                       directives, mark)


T = Template
_CATALOG = (
    _v("pte-present", "PTE (Present)", T.ONE_INSTR_LOAD, "pte_present", ["tsx"],
       pte={"present": False}),
    _v("pte-reserved", "PTE (Reserved)", T.ONE_INSTR_LOAD, "pte_reserved", ["tsx"],
       pte={"reserved_set": True}),
    _v("pte-us", "PTE (US)", T.ONE_INSTR_LOAD, "pte_us", pte={"us": False}),
    _v("load-cr4", "Load CR4", T.REG_READ, "cr4_read", mark="*", priv="cr4"),
    _v("load-msr", "Load MSR (0x1a2)", T.REG_READ, "msr_read", ["msr_0x1a2"],
       mark="*", priv="msr"),
    _v("pkey-user", "Protection Key (User)", T.ONE_INSTR_LOAD, "pkey", ["pku"],
       pte={"pkey": 1}, feature={"pke_enabled": True, "pkru_deny": [1]}),
    _v("pkey-kernel", "Protection Key (Kernel)", T.ONE_INSTR_LOAD, "pkey", ["pku"],
       cpu="SUPERVISOR", pte={"pkey": 1},
       feature={"pke_enabled": True, "pkru_deny": [1]}),
    _v("smap", "SMAP violation", T.ONE_INSTR_LOAD, "smap", ["smap"], cpu="SUPERVISOR",
       feature={"smap_enabled": True}),
    _v("pte-rw", "PTE (write w/ RW=0)", T.TWO_INSTR_STORE_LOAD, "pte_rw",
       pte={"rw": False}),
    _v("xmm0-cr0ts", "Load xmm0 (CR0.TS)", T.FP_REG_READ, "cr0_ts", ["lazy_fpu"],
       mark="*", feature={"cr0_ts": True}),
    _v("bound", "BOUND (32-bit)", T.TWO_INSTR_CHECK_LOAD, "bound", mode="BITS32"),
    _v("ds-over-limit", "DS Over-Limit (32-bit)", T.ONE_INSTR_LOAD, "seg_limit",
       mode="BITS32", segment={"reg": "DS", "limit": "below"}),
    _v("ss-over-limit", "SS Over-Limit (32-bit)", T.ONE_INSTR_LOAD, "seg_limit",
       mode="BITS32", segment={"reg": "SS", "limit": "below"}),
    _v("ds-not-present", "DS Not-Present (32-bit)", T.ONE_INSTR_LOAD, "seg_present",
       mode="BITS32", segment={"reg": "DS", "present": False}),
    _v("ss-not-present", "SS Not-Present (32-bit)", T.TWO_INSTR_CHECK_LOAD,
       "segload_present", mode="BITS32", segload={"reg": "SS", "present": False}),
    _v("ds-execute-only", "DS Execute-Only (32-bit)", T.TWO_INSTR_CHECK_LOAD,
       "segload_type", mode="BITS32", segload={"reg": "DS", "seg_type": "CODE_XO"}),
    _v("cs-execute-only", "CS Execute-Only (32-bit)", T.ONE_INSTR_LOAD,
       "seg_type_read", mode="BITS32", segment={"reg": "CS", "seg_type": "CODE_XO"}),
    _v("ds-read-only-write", "DS Read-Only (write, 32-bit)", T.TWO_INSTR_STORE_LOAD,
       "seg_type_write", mode="BITS32", segment={"reg": "DS", "seg_type": "DATA_RO"}),
    _v("ss-read-only", "SS Read-Only (32-bit)", T.TWO_INSTR_CHECK_LOAD,
       "segload_type", mode="BITS32", segload={"reg": "SS", "seg_type": "DATA_RO"}),
    _v("ds-null", "DS Null (32-bit)", T.ONE_INSTR_LOAD, "seg_null", mode="BITS32",
       segment={"reg": "DS", "null_selector": True}),
    _v("ss-null", "SS Null (32-bit)", T.TWO_INSTR_CHECK_LOAD, "segload_null",
       mode="BITS32", segload={"reg": "SS", "null_selector": True}),
    _v("ss-dpl", "SS DPL != CPL (32-bit)", T.TWO_INSTR_CHECK_LOAD, "segload_dpl",
       mode="BITS32", segload={"reg": "SS", "dpl": 0}),
)


def catalog() -> list[VariantSpec]:
    """All 22 tested variants, in table order."""
    return list(_CATALOG)


def get_variant(variant_id: str) -> VariantSpec:
    for v in _CATALOG:
        if v.id == variant_id:
            return v
    raise KeyError(variant_id)


def variant_ids() -> list[str]:
    return [v.id for v in _CATALOG]


# ---------------------------------------------------------------------------
# profile files

_TOP_FIELDS = {"schema_version", "name", "description", "latencies", "rob_size",
               "issue_width", "retire_width", "units", "prefetch", "features",
               "checks", "expected"}
_CHECK_FIELDS = {"speculation_allowed", "anchor", "delay"}


def _strict(obj: Mapping, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ProfileError(f"{where}: unknown field(s) {sorted(unknown)}")


def _build(cls, obj: Mapping, where: str):
    allowed = set(cls.__dataclass_fields__)
    _strict(obj, allowed, where)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ProfileError(f"{where}: {exc}") from None


def profile_from_dict(data: Mapping[str, Any]) -> ProcessorProfile:
    if not isinstance(data, Mapping):
        raise ProfileError("profile must be a JSON object")
    _strict(data, _TOP_FIELDS, "profile")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ProfileError(f"unsupported schema_version {data.get('schema_version')!r}"
                           f" (expected {SCHEMA_VERSION})")
    if "name" not in data or "checks" not in data:
        raise ProfileError("profile needs 'name' and 'checks'")
    checks = {}
    for cid, spec in data["checks"].items():
        if cid not in CHECK_ORDER:
            raise ProfileError(f"checks: unknown check id {cid!r}")
        _strict(spec, _CHECK_FIELDS, f"checks.{cid}")
        try:
            checks[cid] = CheckTiming(cid, bool(spec.get("speculation_allowed", True)),
                                      Anchor(spec.get("anchor", "POST_TRANSLATION")),
                                      int(spec.get("delay", 0)))
        except ValueError as exc:
            raise ProfileError(f"checks.{cid}: {exc}") from None
    expected = dict(data.get("expected", {}))
    for vid, letter in expected.items():
        if letter not in ("Y", "N", "R", "NA"):
            raise ProfileError(f"expected.{vid}: bad letter {letter!r}")
        try:
            get_variant(vid)
        except KeyError:
            raise ProfileError(f"expected: unknown variant {vid!r}") from None
    for key in ("rob_size", "issue_width", "retire_width"):
        if key in data and (not isinstance(data[key], int) or data[key] <= 0):
            raise ProfileError(f"{key} must be a positive integer")
    return ProcessorProfile(
        name=data["name"],
        description=data.get("description", ""),
        checks=checks,
        latencies=_build(Latencies, data.get("latencies", {}), "latencies"),
        rob_size=data.get("rob_size", 148),
        issue_width=data.get("issue_width", 4),
        retire_width=data.get("retire_width", 4),
        units=_build(Units, data.get("units", {}), "units"),
        prefetch=_build(PrefetchPolicy, data.get("prefetch", {}), "prefetch"),
        features=frozenset(data.get("features", [])),
        expected=expected,
    )


def profile_to_dict(p: ProcessorProfile) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": p.name,
        "description": p.description,
        "latencies": asdict(p.latencies),
        "rob_size": p.rob_size,
        "issue_width": p.issue_width,
        "retire_width": p.retire_width,
        "units": asdict(p.units),
        "prefetch": asdict(p.prefetch),
        "features": sorted(p.features),
        "checks": {cid: {"speculation_allowed": c.speculation_allowed,
                         "anchor": c.anchor.value, "delay": c.delay}
                   for cid, c in sorted(p.checks.items(),
                                        key=lambda kv: CHECK_ORDER.index(kv[0]))},
        "expected": dict(p.expected),
    }


def lint_profile(p: ProcessorProfile) -> list[str]:
    """Static consistency problems plus mismatches against declared letters."""
    from .harness import exploitability

    problems = []
    for v in _CATALOG:
        if v.required_features <= p.features and v.check_id not in p.checks:
            problems.append(f"{v.id}: no timing for check {v.check_id!r}")
    if problems:
        return problems
    for vid, want in sorted(p.expected.items(), key=lambda kv: variant_ids().index(kv[0])):
        got = exploitability(get_variant(vid), p).value
        if got != want:
            problems.append(f"{vid}: expected {want}, simulated {got} "
                            f"(check {get_variant(vid).check_id!r})")
    return problems


def load_profile(path, validate: bool = True) -> ProcessorProfile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: not valid JSON ({exc})") from None
    prof = profile_from_dict(data)
    if validate:
        problems = lint_profile(prof)
        if problems:
            raise ProfileError(f"{prof.name}: self-consistency lint failed: "
                               + "; ".join(problems))
    return prof


_BUILTIN_CACHE: dict[str, ProcessorProfile] = {}


def builtin_profiles() -> dict[str, ProcessorProfile]:
    if not _BUILTIN_CACHE:
        pkg = resources.files(__package__) / "profiles"
        for entry in sorted(pkg.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".json"):
                prof = profile_from_dict(json.loads(entry.read_text()))
                _BUILTIN_CACHE[prof.name] = prof
    return dict(_BUILTIN_CACHE)


def get_profile(name_or_path: str) -> ProcessorProfile:
    profiles = builtin_profiles()
    if name_or_path in profiles:
        return profiles[name_or_path]
    if Path(name_or_path).is_file():
        return load_profile(name_or_path)
    raise KeyError(name_or_path)
