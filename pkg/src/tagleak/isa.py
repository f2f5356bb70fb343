"""Mini instruction set, gadget DSL assembler/disassembler and validator.

DSL grammar, one statement per line (``;`` starts a comment)::

    label:
    nop | isb | sb | halt
    mov xN, #imm
    orr xD, xA, xB
    eor xD, xA, xB
    ldr xD, [xA]
    str xS, [xA]
    beqz xC, label
    jmp label

A label may share a line with an instruction (``L0: beqz x1, L0``).
Registers are ``x0`` .. ``x28``; immediates are decimal or ``0x`` hex and
are normalised to unsigned 64-bit.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

NUM_REGS = 29
MASK64 = (1 << 64) - 1


class Opcode(enum.IntEnum):
    LOAD = 0
    STORE = 1
    ORR = 2
    EOR = 3
    MOV_IMM = 4
    NOP = 5
    ISB = 6
    SB = 7
    BRANCH_EQZ = 8
    JUMP = 9
    HALT = 10


MNEMONIC = {
    Opcode.LOAD: "ldr",
    Opcode.STORE: "str",
    Opcode.ORR: "orr",
    Opcode.EOR: "eor",
    Opcode.MOV_IMM: "mov",
    Opcode.NOP: "nop",
    Opcode.ISB: "isb",
    Opcode.SB: "sb",
    Opcode.BRANCH_EQZ: "beqz",
    Opcode.JUMP: "jmp",
    Opcode.HALT: "halt",
}
_BY_MNEMONIC = {v: k for k, v in MNEMONIC.items()}

# opcode -> (has dst, number of srcs, has imm, has target)
_SHAPE = {
    Opcode.LOAD: (True, 1, False, False),
    Opcode.STORE: (False, 2, False, False),
    Opcode.ORR: (True, 2, False, False),
    Opcode.EOR: (True, 2, False, False),
    Opcode.MOV_IMM: (True, 0, True, False),
    Opcode.NOP: (False, 0, False, False),
    Opcode.ISB: (False, 0, False, False),
    Opcode.SB: (False, 0, False, False),
    Opcode.BRANCH_EQZ: (False, 1, False, True),
    Opcode.JUMP: (False, 0, False, True),
    Opcode.HALT: (False, 0, False, False),
}

MEMORY_OPS = frozenset({Opcode.LOAD, Opcode.STORE})
BARRIERS = frozenset({Opcode.ISB, Opcode.SB})


class AssemblyError(ValueError):
    pass


class AssemblySyntaxError(AssemblyError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnresolvedLabel(AssemblyError):
    def __init__(self, name: str):
        super().__init__(f"unresolved label {name!r}")
        self.name = name


class DuplicateLabel(AssemblyError):
    def __init__(self, name: str):
        super().__init__(f"duplicate label {name!r}")
        self.name = name


def check_register(index: int) -> int:
    if not isinstance(index, int) or isinstance(index, bool) or not 0 <= index < NUM_REGS:
        raise ValueError(f"register index out of range: {index!r}")
    return index


@dataclass(frozen=True)
class Instruction:
    """One instruction.

    For ``STORE`` the sources are ``(data, address)``; for ``LOAD`` the single
    source is the address register and ``dst`` receives the loaded value.
    """

    opcode: Opcode
    dst: int | None = None
    srcs: tuple[int, ...] = ()
    imm: int | None = None
    target: str | None = None

    def __post_init__(self):
        if self.dst is not None:
            check_register(self.dst)
        for r in self.srcs:
            check_register(r)

    @property
    def is_memory(self) -> bool:
        return self.opcode in MEMORY_OPS

    @property
    def address_reg(self) -> int | None:
        if self.opcode is Opcode.LOAD:
            return self.srcs[0]
        if self.opcode is Opcode.STORE:
            return self.srcs[1]
        return None

    def text(self) -> str:
        op = self.opcode
        m = MNEMONIC[op]
        if op is Opcode.LOAD:
            return f"{m} x{self.dst}, [x{self.srcs[0]}]"
        if op is Opcode.STORE:
            return f"{m} x{self.srcs[0]}, [x{self.srcs[1]}]"
        if op in (Opcode.ORR, Opcode.EOR):
            return f"{m} x{self.dst}, x{self.srcs[0]}, x{self.srcs[1]}"
        if op is Opcode.MOV_IMM:
            return f"{m} x{self.dst}, #{self.imm:#x}"
        if op is Opcode.BRANCH_EQZ:
            return f"{m} x{self.srcs[0]}, {self.target}"
        if op is Opcode.JUMP:
            return f"{m} {self.target}"
        return m


# Convenience constructors, used heavily by the gadget builders and fuzzer.
def ldr(dst: int, addr: int) -> Instruction:
    return Instruction(Opcode.LOAD, dst, (addr,))


def str_(data: int, addr: int) -> Instruction:
    return Instruction(Opcode.STORE, None, (data, addr))


def orr(dst: int, a: int, b: int) -> Instruction:
    return Instruction(Opcode.ORR, dst, (a, b))


def eor(dst: int, a: int, b: int) -> Instruction:
    return Instruction(Opcode.EOR, dst, (a, b))


def mov(dst: int, imm: int) -> Instruction:
    return Instruction(Opcode.MOV_IMM, dst, (), imm & MASK64)


def beqz(cond: int, target: str) -> Instruction:
    return Instruction(Opcode.BRANCH_EQZ, None, (cond,), None, target)


def jmp(target: str) -> Instruction:
    return Instruction(Opcode.JUMP, target=target)


NOP = Instruction(Opcode.NOP)
ISB = Instruction(Opcode.ISB)
SB = Instruction(Opcode.SB)
HALT = Instruction(Opcode.HALT)


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    labels: Mapping[str, int] = field(default_factory=dict)
    entry: int = 0

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "labels", dict(self.labels))

    def __len__(self) -> int:
        return len(self.instructions)

    def __hash__(self) -> int:
        return hash(self.key)

    @cached_property
    def key(self) -> tuple:
        """Hashable identity; the prefetcher uses it as the code-site key."""
        return (self.instructions, tuple(sorted(self.labels.items())), self.entry)

    @cached_property
    def site(self) -> int:
        return hash(self.key)

    @cached_property
    def compiled(self) -> tuple[tuple, ...]:
        """Flat tuples ``(opcode, dst, src0, src1, imm, target_index)``."""
        out = []
        for ins in self.instructions:
            s = ins.srcs
            out.append((
                int(ins.opcode),
                ins.dst,
                s[0] if len(s) > 0 else None,
                s[1] if len(s) > 1 else None,
                ins.imm,
                self.labels.get(ins.target) if ins.target is not None else None,
            ))
        return tuple(out)

    def label_at(self, index: int) -> list[str]:
        return sorted(k for k, v in self.labels.items() if v == index)

    def insert(self, index: int, new: Iterable[Instruction]) -> "Program":
        """Insert instructions before ``index``; labels at or after it shift."""
        new = tuple(new)
        n = len(new)
        instrs = self.instructions[:index] + new + self.instructions[index:]
        labels = {k: (v + n if v >= index else v) for k, v in self.labels.items()}
        entry = self.entry + n if self.entry > index else self.entry
        return Program(instrs, labels, entry)


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    index: int | None
    message: str


def validate(program: Program) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    n = len(program.instructions)
    for name, idx in sorted(program.labels.items()):
        if not isinstance(idx, int) or not 0 <= idx <= n:
            diags.append(Diagnostic("LabelOutOfRange", None, f"label {name!r} -> {idx!r}"))
        if not _LABEL_RE.fullmatch(name):
            diags.append(Diagnostic("BadLabelName", None, f"label {name!r}"))
    if n == 0:
        if program.entry != 0:
            diags.append(Diagnostic("EntryOutOfRange", None, f"entry {program.entry}"))
    elif not 0 <= program.entry < n:
        diags.append(Diagnostic("EntryOutOfRange", None, f"entry {program.entry}"))
    for i, ins in enumerate(program.instructions):
        op = ins.opcode
        if not isinstance(op, Opcode):
            diags.append(Diagnostic("UnknownOpcode", i, f"opcode {op!r}"))
            continue
        has_dst, nsrc, has_imm, has_target = _SHAPE[op]
        ok = (
            (ins.dst is not None) == has_dst
            and len(ins.srcs) == nsrc
            and (ins.imm is not None) == has_imm
            and (ins.target is not None) == has_target
        )
        if has_imm and ins.imm is not None and not 0 <= ins.imm <= MASK64:
            ok = False
        if not ok:
            diags.append(Diagnostic("BadOperands", i, f"{MNEMONIC[op]} operands"))
        if has_target and ins.target is not None and ins.target not in program.labels:
            diags.append(Diagnostic("UnresolvedLabel", i, f"label {ins.target!r}"))
    return diags


_LABEL_RE = re.compile(r"[A-Za-z_.][A-Za-z0-9_.]*")
_REG = r"x(\d{1,2})"
_IMM = r"#(-?(?:0x[0-9a-fA-F]+|\d+))"
_PATTERNS = {
    "ldr": re.compile(rf"{_REG}\s*,\s*\[\s*{_REG}\s*\]"),
    "str": re.compile(rf"{_REG}\s*,\s*\[\s*{_REG}\s*\]"),
    "orr": re.compile(rf"{_REG}\s*,\s*{_REG}\s*,\s*{_REG}"),
    "eor": re.compile(rf"{_REG}\s*,\s*{_REG}\s*,\s*{_REG}"),
    "mov": re.compile(rf"{_REG}\s*,\s*{_IMM}"),
    "beqz": re.compile(rf"{_REG}\s*,\s*({_LABEL_RE.pattern})"),
    "jmp": re.compile(rf"({_LABEL_RE.pattern})"),
}
_NULLARY = {"nop": NOP, "isb": ISB, "sb": SB, "halt": HALT}


def _reg(text: str, lineno: int) -> int:
    r = int(text)
    if r >= NUM_REGS:
        raise AssemblySyntaxError(lineno, f"register x{r} out of range x0-x{NUM_REGS - 1}")
    return r


def _parse_instruction(body: str, lineno: int) -> Instruction:
    parts = body.split(None, 1)
    m = parts[0].lower()
    rest = parts[1].strip() if len(parts) > 1 else ""
    if m in _NULLARY:
        if rest:
            raise AssemblySyntaxError(lineno, f"{m} takes no operands")
        return _NULLARY[m]
    pat = _PATTERNS.get(m)
    if pat is None:
        raise AssemblySyntaxError(lineno, f"unknown mnemonic {m!r}")
    match = pat.fullmatch(rest)
    if match is None:
        raise AssemblySyntaxError(lineno, f"malformed operands for {m}: {rest!r}")
    g = match.groups()
    if m == "ldr":
        return ldr(_reg(g[0], lineno), _reg(g[1], lineno))
    if m == "str":
        return str_(_reg(g[0], lineno), _reg(g[1], lineno))
    if m in ("orr", "eor"):
        fn = orr if m == "orr" else eor
        return fn(_reg(g[0], lineno), _reg(g[1], lineno), _reg(g[2], lineno))
    if m == "mov":
        imm = int(g[1], 0)
        if not -(1 << 63) <= imm <= MASK64:
            raise AssemblySyntaxError(lineno, f"immediate out of 64-bit range: {g[1]}")
        return mov(_reg(g[0], lineno), imm)
    if m == "beqz":
        return beqz(_reg(g[0], lineno), g[1])
    return jmp(g[0])


def assemble(text: str) -> Program:
    instructions: list[Instruction] = []
    labels: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        while line:
            head, sep, tail = line.partition(":")
            if sep and _LABEL_RE.fullmatch(head.strip()):
                name = head.strip()
                if name in labels:
                    raise DuplicateLabel(name)
                labels[name] = len(instructions)
                line = tail.strip()
                continue
            if sep:
                raise AssemblySyntaxError(lineno, f"bad label {head.strip()!r}")
            instructions.append(_parse_instruction(line, lineno))
            break
    for ins in instructions:
        if ins.target is not None and ins.target not in labels:
            raise UnresolvedLabel(ins.target)
    return Program(tuple(instructions), labels)


def disassemble(program: Program) -> str:
    by_index: dict[int, list[str]] = {}
    for name, idx in program.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines = []
    for i, ins in enumerate(program.instructions):
        for name in sorted(by_index.get(i, ())):
            lines.append(f"{name}:")
        lines.append(f"    {ins.text()}")
    for name in sorted(by_index.get(len(program.instructions), ())):
        lines.append(f"{name}:")
    return "\n".join(lines) + "\n"
