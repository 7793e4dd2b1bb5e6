"""Abstract micro-op instruction set and instruction sequences.

Programs are straight-line lists of micro-ops with forward-only labels. Only
LOAD and STORE touch memory; everything else works on registers. A small
AT&T-flavoured text format is provided for fixtures (see ``parse_seq``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

MASK64 = (1 << 64) - 1


class Bank(str, Enum):
    GP = "gp"
    FP = "fp"


@dataclass(frozen=True, order=True)
class Register:
    bank: Bank
    idx: int

    def __post_init__(self):
        if not 0 <= self.idx < 16:
            raise ValueError(f"register index out of range: {self.idx}")

    def __str__(self) -> str:
        if self.bank is Bank.FP:
            return f"%xmm{self.idx}"
        return "%" + GP_NAMES[self.idx]


GP_NAMES = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
            "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]


def gp(i: int) -> Register:
    return Register(Bank.GP, i)


def fp(i: int) -> Register:
    return Register(Bank.FP, i)


RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = (gp(i) for i in range(8))
R8, R9, R10, R11, R12, R13, R14, R15 = (gp(i) for i in range(8, 16))
XMM0, XMM1 = fp(0), fp(1)


class OpKind(str, Enum):
    ALU_ADD = "ALU_ADD"
    ALU_SUB = "ALU_SUB"
    LOAD = "LOAD"
    STORE = "STORE"
    FP_MOVAPD = "FP_MOVAPD"
    FP_ADDPD = "FP_ADDPD"
    FP_MULPD = "FP_MULPD"
    CPUID = "CPUID"
    BRANCH_COND = "BRANCH_COND"
    BRANCH_INDIRECT = "BRANCH_INDIRECT"
    BOUND_CHECK = "BOUND_CHECK"
    REG_PRIV_READ = "REG_PRIV_READ"
    # descriptor load into a segment register; result is the segment base
    SEG_LOAD = "SEG_LOAD"


FP_KINDS = frozenset({OpKind.FP_MOVAPD, OpKind.FP_ADDPD, OpKind.FP_MULPD})
ALU_KINDS = frozenset({OpKind.ALU_ADD, OpKind.ALU_SUB})
MEM_KINDS = frozenset({OpKind.LOAD, OpKind.STORE})
BRANCH_KINDS = frozenset({OpKind.BRANCH_COND, OpKind.BRANCH_INDIRECT})

# privileged register codes for REG_PRIV_READ.imm
PRIV_CR4 = 4
PRIV_MSR_1A2 = 0x1A2


@dataclass(frozen=True)
class MemOperand:
    base: Optional[Register] = None
    index: Optional[Register] = None
    scale: int = 1
    displacement: int = 0
    segment: str = "DS"

    def __post_init__(self):
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"bad scale {self.scale}")

    def registers(self) -> tuple[Register, ...]:
        return tuple(r for r in (self.base, self.index) if r is not None)

    def __str__(self) -> str:
        inner = ""
        if self.base is not None or self.index is not None:
            inner = "(" + (str(self.base) if self.base is not None else "")
            if self.index is not None:
                inner += f",{self.index},{self.scale}"
            inner += ")"
        disp = hex(self.displacement) if self.displacement or not inner else ""
        prefix = f"%{self.segment.lower()}:" if self.segment != "DS" else ""
        return f"{prefix}{disp}{inner}"


@dataclass(frozen=True)
class BranchMeta:
    """Branch targets.

    ``predicted_target`` is the label the front end follows (None means
    fall-through). ``target`` is the taken label of a conditional branch. For
    an indirect branch the actual target index is read from ``srcs[0]``.
    """

    predicted_target: Optional[str] = None
    target: Optional[str] = None


@dataclass(frozen=True)
class MicroOp:
    kind: OpKind
    srcs: tuple[Register, ...] = ()
    dst: Optional[Register] = None
    mem: Optional[MemOperand] = None
    imm: Optional[int] = None
    branch: Optional[BranchMeta] = None
    segment: Optional[str] = None  # SEG_LOAD target register
    text: str = field(default="", compare=False)

    def __post_init__(self):
        k = self.kind
        if len(self.srcs) > 2:
            raise ValueError("at most two source registers")
        if k in MEM_KINDS and self.mem is None:
            raise ValueError(f"{k.value} needs a memory operand")
        if k not in MEM_KINDS and self.mem is not None:
            raise ValueError(f"{k.value} cannot access memory")
        if k is OpKind.CPUID and (self.srcs or self.dst is not None):
            raise ValueError("CPUID takes no operands")
        if k in BRANCH_KINDS and self.branch is None:
            raise ValueError("branch needs branch metadata")
        if k is OpKind.STORE and not self.srcs and self.imm is None:
            raise ValueError("STORE needs a source register or immediate")
        if k is OpKind.SEG_LOAD and (self.imm is None or self.segment is None):
            raise ValueError("SEG_LOAD needs a selector and a target segment")

    def reads(self) -> tuple[Register, ...]:
        """All registers read, including address registers."""
        regs = list(self.srcs)
        if self.mem is not None:
            regs.extend(self.mem.registers())
        return tuple(dict.fromkeys(regs))

    def __str__(self) -> str:
        return self.text or format_op(self)


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class InstrSeq:
    ops: tuple[MicroOp, ...]
    labels: Mapping[str, int] = field(default_factory=dict)
    live_ins: frozenset[Register] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "labels", dict(self.labels))
        object.__setattr__(self, "live_ins", frozenset(self.live_ins))
        n = len(self.ops)
        for name, idx in self.labels.items():
            if not 0 <= idx <= n:
                raise SequenceError(f"label {name!r} points outside the sequence")
        for i, op in enumerate(self.ops):
            if op.branch is None:
                continue
            for lab in (op.branch.predicted_target, op.branch.target):
                if lab is None:
                    continue
                if lab not in self.labels:
                    raise SequenceError(f"op {i}: unknown label {lab!r}")
                if self.labels[lab] <= i:
                    raise SequenceError(f"op {i}: backward branch to {lab!r}")

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __getitem__(self, i):
        return self.ops[i]

    def target_index(self, label: Optional[str], fallthrough: int) -> int:
        return fallthrough if label is None else self.labels[label]


def make_seq(ops: Sequence[MicroOp], labels: Optional[Mapping[str, int]] = None,
             live_ins=()) -> InstrSeq:
    return InstrSeq(tuple(ops), dict(labels or {}), frozenset(live_ins))


@dataclass(frozen=True)
class DependencyGraph:
    """Per-op producers: ``producers[j]`` maps each register op j reads to the
    index of the latest earlier writer (None for a live-in). ``barrier[j]``
    lists extra ordering edges introduced by CPUID."""

    producers: tuple[dict[Register, Optional[int]], ...]
    barrier: tuple[frozenset[int], ...]

    def deps(self, j: int) -> frozenset[int]:
        regs = {p for p in self.producers[j].values() if p is not None}
        return frozenset(regs) | self.barrier[j]

    def edges(self):
        for j in range(len(self.producers)):
            for i in sorted(self.deps(j)):
                yield i, j

    def path_length(self, i: int, j: int) -> int:
        """Longest edge count of a dependency path from i to j (-1 if none)."""
        best = {i: 0}
        for k in range(i + 1, j + 1):
            cands = [best[d] + 1 for d in self.deps(k) if d in best]
            if cands:
                best[k] = max(cands)
        return best.get(j, -1)


def build_dependency_graph(seq: InstrSeq) -> DependencyGraph:
    if not len(seq):
        raise SequenceError("empty sequence")
    last_writer: dict[Register, int] = {}
    producers = []
    barrier = []
    last_cpuid: Optional[int] = None
    missing: list[str] = []
    for j, op in enumerate(seq.ops):
        prod = {}
        for r in op.reads():
            if r in last_writer:
                prod[r] = last_writer[r]
            elif r in seq.live_ins:
                prod[r] = None
            else:
                missing.append(f"{r} (op {j})")
        producers.append(prod)
        if op.kind is OpKind.CPUID:
            barrier.append(frozenset(range(j)))
            last_cpuid = j
        elif last_cpuid is not None:
            barrier.append(frozenset({last_cpuid}))
        else:
            barrier.append(frozenset())
        if op.dst is not None:
            last_writer[op.dst] = j
    if missing:
        raise SequenceError("registers read before written and not live-in: "
                            + ", ".join(missing))
    return DependencyGraph(tuple(producers), tuple(barrier))


def effective_gadget_after_cpuid(seq: InstrSeq) -> InstrSeq:
    """Suffix of ``seq`` after its last CPUID (the whole sequence if none)."""
    cut = 0
    for i, op in enumerate(seq.ops):
        if op.kind is OpKind.CPUID:
            cut = i + 1
    labels = {k: v - cut for k, v in seq.labels.items() if v >= cut}
    return InstrSeq(seq.ops[cut:], labels, seq.live_ins)


# ---------------------------------------------------------------------------
# text format

_REG_RE = re.compile(r"%(\w+)")
_MEM_RE = re.compile(
    r"^(?:%(?P<seg>[cdefgs]s):)?(?P<disp>-?(?:0x[0-9a-fA-F]+|\d+))?"
    r"(?:\((?P<base>%\w+)?(?:,(?P<index>%\w+)(?:,(?P<scale>[1248]))?)?\))?$")


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_register(tok: str) -> Register:
    name = tok.strip().lstrip("%").lower()
    if name in GP_NAMES:
        return gp(GP_NAMES.index(name))
    m = re.fullmatch(r"xmm(\d+)", name) or re.fullmatch(r"fp(\d+)", name)
    if m:
        return fp(int(m.group(1)))
    m = re.fullmatch(r"gp(\d+)", name)
    if m:
        return gp(int(m.group(1)))
    raise ValueError(f"unknown register {tok!r}")


def _parse_int(tok: str) -> int:
    return int(tok.strip().lstrip("$"), 0)


def _parse_mem(tok: str) -> MemOperand:
    m = _MEM_RE.match(tok.replace(" ", ""))
    if not m or not (m.group("disp") or m.group("base") or m.group("index")):
        raise ValueError(f"bad memory operand {tok!r}")
    return MemOperand(
        base=parse_register(m.group("base")) if m.group("base") else None,
        index=parse_register(m.group("index")) if m.group("index") else None,
        scale=int(m.group("scale") or 1),
        displacement=int(m.group("disp"), 0) if m.group("disp") else 0,
        segment=(m.group("seg") or "ds").upper())


def _split_operands(rest: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _is_reg(tok: str) -> bool:
    return tok.startswith("%") and ":" not in tok and "(" not in tok


def parse_op(line: str) -> MicroOp:
    text = line.strip()
    predict = None
    m = re.search(r"\[predict=(\w+)\]\s*$", text)
    if m:
        predict = m.group(1)
        text = text[: m.start()].strip()
    parts = text.split(None, 1)
    mnem = parts[0].lower()
    ops = _split_operands(parts[1]) if len(parts) > 1 else []

    if mnem == "cpuid":
        return MicroOp(OpKind.CPUID, text=line.strip())
    if mnem in ("add", "sub"):
        kind = OpKind.ALU_ADD if mnem == "add" else OpKind.ALU_SUB
        if len(ops) == 2:
            src, dst = ops
            d = parse_register(dst)
            if src.startswith("$"):
                return MicroOp(kind, (d,), d, imm=_parse_int(src), text=line.strip())
            return MicroOp(kind, (d, parse_register(src)), d, text=line.strip())
        if len(ops) == 3:
            src, a, dst = ops
            if src.startswith("$"):
                return MicroOp(kind, (parse_register(a),), parse_register(dst),
                               imm=_parse_int(src), text=line.strip())
            return MicroOp(kind, (parse_register(a), parse_register(src)),
                           parse_register(dst), text=line.strip())
        raise ValueError(f"{mnem} takes 2 or 3 operands")
    if mnem in ("movapd", "addpd", "mulpd"):
        src, dst = (parse_register(t) for t in ops)
        if mnem == "movapd":
            return MicroOp(OpKind.FP_MOVAPD, (src,), dst, text=line.strip())
        kind = OpKind.FP_ADDPD if mnem == "addpd" else OpKind.FP_MULPD
        return MicroOp(kind, (dst, src), dst, text=line.strip())
    if mnem in ("movq", "mov"):
        src, dst = ops
        if src.lower() == "%cr4":
            return MicroOp(OpKind.REG_PRIV_READ, (), parse_register(dst),
                           imm=PRIV_CR4, text=line.strip())
        if _is_reg(src) and _is_reg(dst):
            s = parse_register(src)
            if s.bank is Bank.FP:
                return MicroOp(OpKind.FP_MOVAPD, (s,), parse_register(dst),
                               text=line.strip())
            return MicroOp(OpKind.ALU_ADD, (s,), parse_register(dst), imm=0,
                           text=line.strip())
        if _is_reg(dst):
            return MicroOp(OpKind.LOAD, (), parse_register(dst), mem=_parse_mem(src),
                           text=line.strip())
        mem = _parse_mem(dst)
        if src.startswith("$"):
            return MicroOp(OpKind.STORE, (), None, mem=mem, imm=_parse_int(src),
                           text=line.strip())
        return MicroOp(OpKind.STORE, (parse_register(src),), None, mem=mem,
                       text=line.strip())
    if mnem == "movw":
        sel, seg = ops[0], ops[1]
        return MicroOp(OpKind.SEG_LOAD, (), parse_register(ops[2]) if len(ops) > 2 else RDI,
                       imm=_parse_int(sel), segment=seg.lstrip("%").upper(),
                       text=line.strip())
    if mnem == "rdmsr":
        code, dst = ops
        return MicroOp(OpKind.REG_PRIV_READ, (), parse_register(dst),
                       imm=_parse_int(code), text=line.strip())
    if mnem == "bound":
        idx, lim = ops
        return MicroOp(OpKind.BOUND_CHECK, (parse_register(idx),), None,
                       imm=_parse_int(lim), text=line.strip())
    if mnem == "jnz":
        cond, target = ops
        pred = None if predict in (None, "fallthrough") else (
            target if predict == "taken" else predict)
        return MicroOp(OpKind.BRANCH_COND, (parse_register(cond),),
                       branch=BranchMeta(predicted_target=pred, target=target),
                       text=line.strip())
    if mnem == "jmp":
        (tgt,) = ops
        pred = None if predict in (None, "fallthrough") else predict
        return MicroOp(OpKind.BRANCH_INDIRECT, (parse_register(tgt.lstrip("*")),),
                       branch=BranchMeta(predicted_target=pred), text=line.strip())
    raise ValueError(f"unknown mnemonic {mnem!r}")


def parse_seq(source: str) -> InstrSeq:
    """Parse the text fixture format.

    One micro-op per line, source operands first. ``label:`` lines define
    labels; ``.livein %rax, %rbx`` declares live-in registers; ``#`` and
    ``//`` start comments.
    """
    ops: list[MicroOp] = []
    labels: dict[str, int] = {}
    live: set[Register] = set()
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = re.split(r"#|//", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        try:
            if line.endswith(":") and " " not in line:
                labels[line[:-1]] = len(ops)
            elif line.startswith(".livein"):
                for tok in line[len(".livein"):].split(","):
                    if tok.strip():
                        live.add(parse_register(tok))
            else:
                ops.append(parse_op(line))
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
    try:
        return InstrSeq(tuple(ops), labels, frozenset(live))
    except SequenceError as exc:
        raise ParseError(0, str(exc)) from None


def format_op(op: MicroOp) -> str:
    k = op.kind
    if k is OpKind.CPUID:
        return "cpuid"
    if k in ALU_KINDS:
        m = "add" if k is OpKind.ALU_ADD else "sub"
        if op.imm is not None:
            if op.srcs[0] == op.dst:
                return f"{m} ${op.imm:#x}, {op.dst}"
            return f"{m} ${op.imm:#x}, {op.srcs[0]}, {op.dst}"
        if op.srcs[0] == op.dst:
            return f"{m} {op.srcs[1]}, {op.dst}"
        return f"{m} {op.srcs[1]}, {op.srcs[0]}, {op.dst}"
    if k is OpKind.FP_MOVAPD:
        return f"movapd {op.srcs[0]}, {op.dst}"
    if k in (OpKind.FP_ADDPD, OpKind.FP_MULPD):
        m = "addpd" if k is OpKind.FP_ADDPD else "mulpd"
        return f"{m} {op.srcs[1]}, {op.dst}"
    if k is OpKind.LOAD:
        return f"movq {op.mem}, {op.dst}"
    if k is OpKind.STORE:
        src = f"${op.imm:#x}" if not op.srcs else str(op.srcs[0])
        return f"movq {src}, {op.mem}"
    if k is OpKind.REG_PRIV_READ:
        if op.imm == PRIV_CR4:
            return f"movq %cr4, {op.dst}"
        return f"rdmsr ${op.imm:#x}, {op.dst}"
    if k is OpKind.SEG_LOAD:
        return f"movw ${op.imm:#x}, %{op.segment.lower()}, {op.dst}"
    if k is OpKind.BOUND_CHECK:
        return f"bound {op.srcs[0]}, ${op.imm:#x}"
    if k is OpKind.BRANCH_COND:
        pred = op.branch.predicted_target
        tag = "" if pred is None else (" [predict=taken]" if pred == op.branch.target
                                       else f" [predict={pred}]")
        return f"jnz {op.srcs[0]}, {op.branch.target}{tag}"
    if k is OpKind.BRANCH_INDIRECT:
        pred = op.branch.predicted_target
        return f"jmp *{op.srcs[0]}" + (f" [predict={pred}]" if pred else "")
    raise AssertionError(k)


def format_seq(seq: InstrSeq) -> str:
    by_index: dict[int, list[str]] = {}
    for name, idx in seq.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines = []
    if seq.live_ins:
        lines.append(".livein " + ", ".join(str(r) for r in sorted(seq.live_ins)))
    for i in range(len(seq.ops) + 1):
        for name in sorted(by_index.get(i, [])):
            lines.append(f"{name}:")
        if i < len(seq.ops):
            lines.append("    " + format_op(seq.ops[i]))
    return "\n".join(lines) + "\n"
