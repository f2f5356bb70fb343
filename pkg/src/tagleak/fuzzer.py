"""Template-based differential fuzzer for speculative tag-leakage gadgets.

Each test case fills the CHECK and TEST blocks of a fixed harness::

    ldr xC, [xC]        ; cond_ptr -> condition value
    beqz xC, skip
    check:  ...
    test:   ...
    skip:   halt

and is executed twice, with the guess pointer carrying the correct and a wrong
tag.  A trial trains the branch three times with the condition set, flushes
the 4 KB probe region, evicts the condition line and runs once with the
condition cleared.  The cached state of every probe line is recorded per
trial; lines whose history differs between the two executions form the
differential signature.
"""
from __future__ import annotations

import json
import random
from array import array
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

from . import isa
from .gadgets import derive_seed
from .isa import Instruction, Opcode, Program
from .speccore import Core, CoreProfile, ExecutionTrace, RunEnvironment
from .tagmem import CacheModel, TaggedMemory, TaggedPointer

COND_ADDR = 0x20000
COND_TAG = 0x1
TARGET_BASE = 0x30000
TARGET_SIZE = 0x40
PROBE_BASE = 0x40000
PROBE_SIZE = 0x1000
PROBE_TAG = 0x5
PROBE_STRIDE = 128
LINE = 64
PROBE_LINES = tuple(range(PROBE_BASE, PROBE_BASE + PROBE_SIZE, LINE))

ALPHABET = (Opcode.LOAD, Opcode.STORE, Opcode.EOR, Opcode.ORR, Opcode.NOP, Opcode.ISB)
# insertion weights for the six opcodes above
OPCODE_WEIGHTS = (0.40, 0.15, 0.06, 0.20, 0.12, 0.07)


def probe_pointer(index: int) -> int:
    """Tagged pointer to the ``index``-th 128-byte slot of the probe region."""
    return TaggedPointer.make(PROBE_BASE + PROBE_STRIDE * (index % (PROBE_SIZE // PROBE_STRIDE)), PROBE_TAG).raw


_PROBE_SLOTS = PROBE_SIZE // PROBE_STRIDE


@lru_cache(maxsize=256)
def _memory_image(mem_seed: int, target_tag: int) -> tuple[bytes, bytes]:
    """Target and probe region contents: a mix of tagged pointers and random words."""
    rng = random.Random(mem_seed)
    target = array("Q")
    for _ in range(TARGET_SIZE // 8):
        if rng.random() < 0.5:
            target.append(TaggedPointer.make(TARGET_BASE + 8 * rng.randrange(TARGET_SIZE // 8), target_tag).raw)
        else:
            target.append(probe_pointer(rng.randrange(_PROBE_SLOTS)))
    n = PROBE_SIZE // 8
    probe = array("Q", rng.getrandbits(64 * n).to_bytes(8 * n, "little"))
    choose = rng.getrandbits(n)
    slots = rng.getrandbits(5 * n)
    for i in range(n):
        if choose >> i & 1:
            probe[i] = probe_pointer(slots >> (5 * i) & 31)
    return target.tobytes(), probe.tobytes()


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # keep pytest from collecting it

    check: tuple[Instruction, ...]
    test: tuple[Instruction, ...]
    cond_reg: int
    guess_reg: int
    registers: tuple[int, ...]
    mem_seed: int
    target_tag: int

    def __post_init__(self):
        if self.cond_reg == self.guess_reg:
            raise ValueError("cond and guess registers must differ")
        if len(self.registers) != isa.NUM_REGS:
            raise ValueError("registers must hold one value per architectural register")

    @cached_property
    def program(self) -> Program:
        head = (isa.ldr(self.cond_reg, self.cond_reg), isa.beqz(self.cond_reg, "skip"))
        body = head + self.check + self.test + (isa.HALT,)
        labels = {"check": 2, "test": 2 + len(self.check), "skip": 2 + len(self.check) + len(self.test)}
        return Program(body, labels)

    @property
    def guess_ptr(self) -> int:
        return TaggedPointer.make(TARGET_BASE, self.target_tag).raw

    @property
    def wrong_tag(self) -> int:
        return (self.target_tag + 1) & 0xF

    def initial_registers(self, guess_tag: int) -> dict[int, int]:
        regs = dict(enumerate(self.registers))
        regs[self.cond_reg] = TaggedPointer.make(COND_ADDR, COND_TAG).raw
        regs[self.guess_reg] = TaggedPointer.make(TARGET_BASE, guess_tag).raw
        return regs

    def build_memory(self) -> TaggedMemory:
        target, probe = _memory_image(self.mem_seed, self.target_tag)
        mem = TaggedMemory()
        mem.map(COND_ADDR, LINE, COND_TAG)
        mem.map(TARGET_BASE, TARGET_SIZE, self.target_tag)
        mem.map(PROBE_BASE, PROBE_SIZE, PROBE_TAG)
        mem.write_bytes(TARGET_BASE, target)
        mem.write_bytes(PROBE_BASE, probe)
        return mem

    def with_blocks(self, check, test) -> "TestCase":
        return replace(self, check=tuple(check), test=tuple(test))

    def dsl(self) -> str:
        return isa.disassemble(self.program)

    def to_dict(self) -> dict:
        return {
            "program": self.dsl(),
            "check_len": len(self.check),
            "cond_reg": self.cond_reg,
            "guess_reg": self.guess_reg,
            "registers": [f"{v:#x}" for v in self.registers],
            "mem_seed": self.mem_seed,
            "target_tag": self.target_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestCase":
        program = isa.assemble(d["program"])
        n = d["check_len"]
        body = program.instructions[2:-1]
        return cls(tuple(body[:n]), tuple(body[n:]), d["cond_reg"], d["guess_reg"],
                   tuple(int(v, 16) for v in d["registers"]), d["mem_seed"], d["target_tag"])


def random_testcase(rng: random.Random, check=(), test=()) -> TestCase:
    cond, guess = rng.sample(range(isa.NUM_REGS), 2)
    regs = []
    for _ in range(isa.NUM_REGS):
        if rng.random() < 0.75:
            regs.append(probe_pointer(rng.randrange(PROBE_SIZE // PROBE_STRIDE)))
        else:
            regs.append(rng.getrandbits(64))
    return TestCase(tuple(check), tuple(test), cond, guess, tuple(regs),
                    rng.getrandbits(32), rng.randrange(16))


def seed_corpus() -> list[tuple[tuple[Instruction, ...], tuple[Instruction, ...]]]:
    """Bare template plus one single-instruction CHECK block per opcode.

    Register operands of the single-instruction entries are placeholders and
    get rebound to the test case's guess register when used.
    """
    singles = [isa.ldr(0, 1), isa.str_(0, 1), isa.eor(0, 1, 1), isa.orr(0, 1, 1), isa.NOP, isa.ISB]
    return [((), ())] + [((ins,), ()) for ins in singles]


def _rebind(ins: Instruction, tc: TestCase, rng: random.Random) -> Instruction:
    """Point a corpus placeholder at the test case's guess register."""
    op = ins.opcode
    other = _pick_free(tc, rng)
    if op is Opcode.LOAD:
        return isa.ldr(other, tc.guess_reg)
    if op is Opcode.STORE:
        return isa.str_(other, tc.guess_reg)
    if op in (Opcode.ORR, Opcode.EOR):
        return Instruction(op, other, (tc.guess_reg, tc.guess_reg))
    return ins


def _pick_free(tc: TestCase, rng: random.Random) -> int:
    while True:
        r = rng.randrange(isa.NUM_REGS)
        if r not in (tc.cond_reg, tc.guess_reg):
            return r


def _prev_dst(seq: list[Instruction], pos: int) -> int | None:
    for ins in reversed(seq[:pos]):
        if ins.dst is not None:
            return ins.dst
    return None


def random_instruction(tc: TestCase, seq: list[Instruction], pos: int, rng: random.Random) -> Instruction:
    """Draw one alphabet instruction with operands biased towards dependencies."""
    op = rng.choices(ALPHABET, OPCODE_WEIGHTS)[0]
    prev = _prev_dst(seq, pos)

    def source() -> int:
        u = rng.random()
        if prev is not None and u < 0.45:
            return prev
        if u < 0.7:
            return tc.guess_reg
        return rng.randrange(isa.NUM_REGS)

    def dest(src: int | None = None) -> int:
        if src is not None and src != tc.guess_reg and src != tc.cond_reg and rng.random() < 0.4:
            return src
        return _pick_free(tc, rng)

    if op is Opcode.LOAD:
        a = source()
        return isa.ldr(dest(a), a)
    if op is Opcode.STORE:
        a = source()
        data = rng.randrange(isa.NUM_REGS) if rng.random() < 0.7 else (prev if prev is not None else a)
        return isa.str_(data, a)
    if op in (Opcode.ORR, Opcode.EOR):
        a = source()
        b = a if rng.random() < 0.6 else rng.randrange(isa.NUM_REGS)
        return Instruction(op, dest(a), (a, b))
    return isa.NOP if op is Opcode.NOP else isa.ISB


def mutate(tc: TestCase, rng: random.Random) -> TestCase:
    """Apply exactly one insert, delete or replace to the CHECK or TEST block."""
    blocks = [list(tc.check), list(tc.test)]
    which = rng.randrange(2)
    block = blocks[which]
    kind = rng.choices(("insert", "delete", "replace"), (0.6, 0.2, 0.2))[0]
    if not block:
        kind = "insert"
    seq = blocks[0] + blocks[1]
    offset = 0 if which == 0 else len(blocks[0])
    if kind == "insert":
        pos = rng.randrange(len(block) + 1)
        block.insert(pos, random_instruction(tc, seq, offset + pos, rng))
    elif kind == "delete":
        del block[rng.randrange(len(block))]
    else:
        pos = rng.randrange(len(block))
        block[pos] = random_instruction(tc, seq, offset + pos, rng)
    return tc.with_blocks(blocks[0], blocks[1])


# -- differential execution ---------------------------------------------------

class _Execution:
    """One side of the differential run, advanced one trial at a time."""

    def __init__(self, tc: TestCase, profile: CoreProfile, guess_tag: int, memory: TaggedMemory):
        self.tc = tc
        self.program = tc.program
        self.core = Core(profile)
        self.cache = CacheModel()
        self.env = RunEnvironment(memory, self.cache)
        self.train_regs = tc.initial_registers(tc.target_tag)
        self.spec_regs = tc.initial_registers(guess_tag)
        self.history: list[int] = []
        self.traces: list[ExecutionTrace] = []
        self.faulted = False

    def step(self, keep_trace: bool = False) -> ExecutionTrace | None:
        mem = self.env.memory
        mem.write64(COND_ADDR, 1)
        self.env.registers = self.train_regs
        for _ in range(3):
            if self.core.run(self.program, self.env, learn=True).faulted:
                self.faulted = True
                return None
        cache = self.cache
        for line in PROBE_LINES:
            cache.flush(line)
        cache.flush(COND_ADDR)
        mem.write64(COND_ADDR, 0)
        self.env.registers = self.spec_regs
        trace = self.core.run(self.program, self.env)
        mask = 0
        for i, line in enumerate(PROBE_LINES):
            if cache.is_cached(line):
                mask |= 1 << i
        self.history.append(mask)
        if keep_trace:
            self.traces.append(trace)
        return trace


def _interesting(trace: ExecutionTrace) -> bool:
    return any(e[1] == "wpe" or e[1] == "forward_blocked" for e in trace.events)


@dataclass
class Differential:
    signature: frozenset[int]
    correct: list[int]
    wrong: list[int]
    wrong_traces: list[ExecutionTrace] = field(default_factory=list)


def run_differential(tc: TestCase, profile: CoreProfile, reps: int = 12, prefilter: bool = True,
                     keep_traces: bool = False) -> Differential | None:
    """Full differential record, or None when the case faults or is filtered out.

    The prefilter drops a case when neither execution's first trial shows a
    counted wrong-path event or a blocked forward, the only tag-dependent
    behaviours of the core.
    """
    mem = tc.build_memory()
    right = _Execution(tc, profile, tc.target_tag, mem.copy())
    wrong = _Execution(tc, profile, tc.wrong_tag, mem)
    t_right = right.step()
    if t_right is None:
        return None
    t_wrong = wrong.step(keep_traces)
    if t_wrong is None:
        return None
    if prefilter and not (_interesting(t_right) or _interesting(t_wrong)):
        return None
    for _ in range(reps - 1):
        if right.step() is None or wrong.step(keep_traces) is None:
            return None
    diff = 0
    lines = set()
    for a, b in zip(right.history, wrong.history):
        diff = a ^ b
        for i in range(len(PROBE_LINES)):
            if diff >> i & 1:
                lines.add(PROBE_LINES[i])
    return Differential(frozenset(lines), right.history, wrong.history, wrong.traces)


def execute_differential(tc: TestCase, core: CoreProfile | Core, reps: int = 12,
                         prefilter: bool = True) -> frozenset[int] | None:
    """Probe lines whose cached state differs between correct- and wrong-tag runs, else None."""
    profile = core.profile if isinstance(core, Core) else core
    d = run_differential(tc, profile, reps, prefilter)
    if d is None or not d.signature:
        return None
    return d.signature


def minimize(tc: TestCase, profile: CoreProfile, signature: frozenset[int], reps: int = 12) -> TestCase:
    """Greedy single-instruction removal while the signature is preserved."""
    changed = True
    while changed:
        changed = False
        for which in (0, 1):
            i = 0
            while i < len((tc.check, tc.test)[which]):
                blocks = [list(tc.check), list(tc.test)]
                del blocks[which][i]
                cand = tc.with_blocks(*blocks)
                if execute_differential(cand, profile, reps) == signature:
                    tc = cand
                    changed = True
                else:
                    i += 1
    return tc


# -- classification --------------------------------------------------------------

def classify(tc: TestCase, profile: CoreProfile, reps: int = 12) -> dict:
    """Describe which gadget family a candidate belongs to, from its traces."""
    d = run_differential(tc, profile, reps, prefilter=False, keep_traces=True)
    info = {"v1": False, "v2": False, "guess_mismatches": 0, "far_access_cycles": None}
    if d is None:
        return info
    trace = d.wrong_traces[0]
    guess_addr = TARGET_BASE
    mism = [e[0] for e in trace.events
            if e[1] == "tag" and e[2] // 16 == guess_addr // 16 and e[3].startswith("MISMATCH")]
    info["guess_mismatches"] = len(mism)
    if len(mism) >= 2:
        second = sorted(mism)[1]
        probe = [e[0] for e in trace.events
                 if e[1] == "tag" and PROBE_BASE <= e[2] < PROBE_BASE + PROBE_SIZE]
        if probe:
            far = max(probe) - second
            info["far_access_cycles"] = far
            has_wpe = any(e[1] == "wpe" for e in trace.events)
            info["v1"] = has_wpe and far >= profile.shrink_latency
    info["v2"] = any(e[1] == "forward_blocked" for e in trace.events)
    return info


# -- campaigns ---------------------------------------------------------------------

@dataclass
class Candidate:
    iteration: int
    seed: int
    testcase: TestCase
    signature: frozenset[int]
    family: dict

    def to_dict(self) -> dict:
        d = {"iteration": self.iteration, "seed": self.seed,
             "signature": [f"{a:#x}" for a in sorted(self.signature)]}
        d.update({k: v for k, v in self.family.items()})
        d["testcase"] = self.testcase.to_dict()
        return d


@dataclass
class CampaignReport:
    seed: int
    iterations: int
    profile: str
    candidates: list[Candidate] = field(default_factory=list)
    raw_hits: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "iterations": self.iterations, "profile": self.profile,
                "raw_hits": self.raw_hits, "candidates": [c.to_dict() for c in self.candidates]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def families(self) -> dict[str, int]:
        return {"v1": sum(c.family.get("v1", False) for c in self.candidates),
                "v2": sum(c.family.get("v2", False) for c in self.candidates)}


def generate(seed: int, iteration: int, max_mutations: int = 24) -> tuple[int, TestCase]:
    """The test case a campaign evaluates at ``iteration``."""
    it_seed = derive_seed(seed, "fuzz", iteration)
    rng = random.Random(it_seed)
    check, test = rng.choice(seed_corpus())
    tc = random_testcase(rng)
    tc = tc.with_blocks([_rebind(i, tc, rng) for i in check], test)
    for _ in range(rng.randint(1, max_mutations)):
        tc = mutate(tc, rng)
    return it_seed, tc


def campaign(seed: int, budget_iterations: int, core: CoreProfile | Core, reps: int = 12,
             max_mutations: int = 24, max_candidates: int | None = None,
             prefilter: bool = True) -> CampaignReport:
    if budget_iterations < 1:
        raise ValueError("budget must be >= 1")
    profile = core.profile if isinstance(core, Core) else core
    report = CampaignReport(seed, budget_iterations, profile.name)
    seen: set[str] = set()
    for i in range(budget_iterations):
        it_seed, tc = generate(seed, i, max_mutations)
        sig = execute_differential(tc, profile, reps, prefilter)
        if sig is None:
            continue
        report.raw_hits += 1
        small = minimize(tc, profile, sig, reps)
        key = small.dsl()
        if key in seen:
            continue
        seen.add(key)
        report.candidates.append(Candidate(i, it_seed, small, sig, classify(small, profile, reps)))
        if max_candidates is not None and len(report.candidates) >= max_candidates:
            break
    return report
