"""Gadget builders, the trial protocol, sweeps, ablations, tag leakage and mitigations.

Register conventions shared by all builders::

    x0  cond_ptr           x3  loaded condition
    x1  guess_ptr          x4  CHECK destination / forwarded pointer
    x2  test_ptr           x5  TEST destination
    x6..x10 linked-list variant registers
    x26 SLIDE/WINDOW dependent filler chain, x27/x28 independent fillers

Builders mark block boundaries with labels (``window``, ``check``, ``gap``,
``stlf_load``, ``test``, ``skip``, ``slide``), which is what
:func:`apply_mitigation` keys on, so the shape survives a DSL round trip.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from . import isa
from .isa import Instruction, Program
from .speccore import Core, CoreProfile, ExecutionTrace, MteMode, RunEnvironment
from .tagmem import CacheModel, TaggedMemory, TaggedPointer, Timer, timed_access

CSV_SCHEMA = "# tagleak-curve v1: axis,series,rate,trials,seed"


class InvalidParams(ValueError):
    pass


class UnrecognizedShape(ValueError):
    pass


class AmbiguousLeak(RuntimeError):
    def __init__(self, best: int, runner_up: int, gap: float, tolerance: float):
        super().__init__(f"top candidates {best:#x} and {runner_up:#x} differ by {gap:.4g} "
                         f"(< tolerance {tolerance:.4g}); raise trials_per_guess")
        self.best = best
        self.runner_up = runner_up
        self.gap = gap
        self.tolerance = tolerance


class TestKind(enum.Enum):
    __test__ = False  # keep pytest from collecting it

    INDEP_LD = "INDEP_LD"
    INDEP_ST = "INDEP_ST"
    DEP_LD = "DEP_LD"
    DEP_ST = "DEP_ST"

    @property
    def dependent(self) -> bool:
        return self in (TestKind.DEP_LD, TestKind.DEP_ST)

    @property
    def is_store(self) -> bool:
        return self in (TestKind.INDEP_ST, TestKind.DEP_ST)


class FillerOp(enum.Enum):
    ORR_DEP = "ORR_DEP"
    ORR_INDEP = "ORR_INDEP"
    NOP = "NOP"


class GadgetKind(enum.Enum):
    TEMPLATE = "template"
    V1 = "v1"
    V2 = "v2"
    V1_LIST_IN_BRANCH = "v1_list_in_branch"
    V1_LIST_MERGED = "v1_list_merged"


class Variant(enum.Enum):
    LIST_IN_BRANCH = "LIST_IN_BRANCH"
    LIST_MERGED = "LIST_MERGED"


class Outcome(enum.Enum):
    HIT = "HIT"
    MISS = "MISS"


@dataclass(frozen=True)
class GadgetParams:
    len_check: int = 2
    len_gap: int = 10
    slide: int = 0
    window: int = 0
    test_kind: TestKind = TestKind.INDEP_LD
    filler_op: FillerOp = FillerOp.ORR_DEP
    # GAP filler; the dependent form chains on the TEST address register
    gap_op: FillerOp = FillerOp.ORR_DEP

    def __post_init__(self):
        for name in ("len_check", "len_gap", "slide", "window"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise InvalidParams(f"{name} must be a non-negative integer, got {v!r}")
        if isinstance(self.test_kind, str):
            object.__setattr__(self, "test_kind", TestKind(self.test_kind))
        if isinstance(self.filler_op, str):
            object.__setattr__(self, "filler_op", FillerOp(self.filler_op))
        if isinstance(self.gap_op, str):
            object.__setattr__(self, "gap_op", FillerOp(self.gap_op))


@dataclass(frozen=True)
class TemplateBindings:
    cond_ptr: TaggedPointer
    guess_ptr: TaggedPointer
    test_ptr: TaggedPointer

    def registers(self, guess_tag: int | None = None, test_ptr: TaggedPointer | None = None) -> dict[int, int]:
        guess = self.guess_ptr if guess_tag is None else self.guess_ptr.with_tag(guess_tag)
        test = self.test_ptr if test_ptr is None else test_ptr
        return {0: self.cond_ptr.raw, 1: guess.raw, 2: test.raw}

    def validate(self, mem: TaggedMemory) -> None:
        for name in ("cond_ptr", "test_ptr"):
            p = getattr(self, name)
            if mem.check_tag(p).name != "MATCH":
                raise InvalidParams(f"{name} {p!r} must be mapped with a matching tag")
        if not mem.is_mapped(self.guess_ptr.addr):
            raise InvalidParams("guess_ptr target must be mapped")


# Memory layout; every pointer lands in its own cache set.
REGION_BASE = 0x10000
REGION_SIZE = 0x4000
REGION_TAG = 0x3
COND_ADDR = 0x10000
TARGET_ADDR = 0x11040
TEST_ADDR = 0x12080
ALT_TEST_ADDR = 0x12100
NODE_ADDRS = (0x13140, 0x13180, 0x131C0, 0x13200)
DUMMY_ADDR = 0x13240


def _filler(op: FillerOp) -> Instruction:
    if op is FillerOp.ORR_DEP:
        return isa.orr(26, 26, 26)
    if op is FillerOp.ORR_INDEP:
        return isa.orr(27, 28, 28)
    return isa.NOP


def _gap_filler(op: FillerOp, reg: int) -> Instruction:
    if op is FillerOp.ORR_DEP:
        return isa.orr(reg, reg, reg)
    return _filler(op)


class _Builder:
    def __init__(self):
        self.instrs: list[Instruction] = []
        self.labels: dict[str, int] = {}

    def label(self, name: str) -> None:
        self.labels[name] = len(self.instrs)

    def emit(self, *ins: Instruction) -> None:
        self.instrs.extend(ins)

    def program(self) -> Program:
        return Program(tuple(self.instrs), self.labels)


def _test_instruction(kind: TestKind) -> Instruction:
    addr = 4 if kind.dependent else 2
    return isa.str_(5, addr) if kind.is_store else isa.ldr(5, addr)


def build_template(params: GadgetParams, bindings: TemplateBindings | None = None) -> Program:
    """BR, optional WINDOW, CHECK, GAP and TEST; the false path skips to ``halt``."""
    if params.len_check < 1:
        raise InvalidParams("len_check must be >= 1")
    b = _Builder()
    b.emit(isa.ldr(3, 0), isa.beqz(3, "skip"))
    b.label("window")
    b.emit(*[_filler(params.filler_op)] * params.window)
    b.label("check")
    b.emit(*[isa.ldr(4, 1)] * params.len_check)
    b.label("gap")
    chain_reg = 4 if params.test_kind.dependent else 2
    b.emit(*[_gap_filler(params.gap_op, chain_reg)] * params.len_gap)
    b.label("test")
    b.emit(_test_instruction(params.test_kind))
    b.label("skip")
    b.emit(isa.HALT)
    return b.program()


def build_tiktag_v1(params: GadgetParams, bindings: TemplateBindings | None = None) -> Program:
    if params.len_check < 2:
        raise InvalidParams("v1 gadget needs len_check >= 2")
    if params.test_kind.dependent:
        raise InvalidParams("v1 gadget uses an independent TEST access")
    return build_template(params, bindings)


def build_tiktag_v2(params: GadgetParams, bindings: TemplateBindings | None = None) -> Program:
    if not 0 <= params.len_gap <= 8:
        raise InvalidParams("v2 gadget needs len_gap in [0, 8]")
    if params.test_kind is not TestKind.DEP_LD:
        raise InvalidParams("v2 gadget needs test_kind DEP_LD")
    b = _Builder()
    b.label("slide")
    b.emit(*[_filler(params.filler_op)] * params.slide)
    b.emit(isa.ldr(3, 0), isa.beqz(3, "skip"))
    b.label("check")
    b.emit(isa.str_(2, 1))
    b.label("gap")
    b.emit(*[_filler(params.filler_op)] * params.len_gap)
    b.label("stlf_load")
    b.emit(isa.ldr(4, 1))
    b.label("test")
    b.emit(isa.ldr(5, 4))
    b.label("skip")
    b.emit(isa.HALT)
    return b.program()


def build_tiktag_v1_variant(which: Variant, bindings: TemplateBindings | None = None,
                            params: GadgetParams | None = None) -> Program:
    """Linked-list variants: ptr3 is dereferenced inside the branch or at the merge point."""
    which = Variant(which)
    params = params or GadgetParams()
    if params.len_check < 2:
        raise InvalidParams("variants need len_check >= 2")
    b = _Builder()
    b.emit(isa.ldr(7, 6), isa.ldr(8, 7))  # walk node0 -> node1 -> node2
    b.emit(isa.ldr(3, 0), isa.beqz(3, "skip"))
    b.label("check")
    b.emit(*[isa.ldr(4, 1)] * params.len_check)
    b.label("gap")
    b.emit(*[_gap_filler(params.gap_op, 8)] * params.len_gap)
    b.emit(isa.ldr(9, 8))  # ptr3
    if which is Variant.LIST_IN_BRANCH:
        b.label("test")
        b.emit(isa.ldr(10, 9))
        b.label("skip")
        b.emit(isa.HALT)
    else:
        b.label("skip")
        b.label("test")
        b.emit(isa.ldr(10, 9), isa.HALT)
    return b.program()


@dataclass
class GadgetSetup:
    """A program plus the memory image and pointers the trial protocol needs."""

    kind: GadgetKind
    program: Program
    memory: TaggedMemory
    bindings: TemplateBindings
    target_tag: int
    probe: TaggedPointer
    train_test_ptr: TaggedPointer
    extra_registers: dict[int, int] = field(default_factory=dict)

    def registers(self, guess_tag: int, training: bool) -> dict[int, int]:
        regs = dict(self.extra_registers)
        regs.update(self.bindings.registers(
            guess_tag, self.train_test_ptr if training else self.bindings.test_ptr))
        return regs


def make_memory(target_tag: int, target_addr: int = TARGET_ADDR) -> tuple[TaggedMemory, TemplateBindings]:
    if not 0 <= target_tag <= 0xF:
        raise InvalidParams("target tag must be in [0, 15]")
    mem = TaggedMemory()
    mem.map(REGION_BASE, REGION_SIZE, REGION_TAG)
    if not REGION_BASE <= target_addr < REGION_BASE + REGION_SIZE:
        raise InvalidParams("target address outside the gadget region")
    mem.set_tag(target_addr, target_tag)
    bindings = TemplateBindings(
        cond_ptr=TaggedPointer.make(COND_ADDR, REGION_TAG),
        guess_ptr=TaggedPointer.make(target_addr, target_tag),
        test_ptr=TaggedPointer.make(TEST_ADDR, REGION_TAG),
    )
    # the target word holds test_ptr so dependent TEST accesses reach the probe
    mem.write64(target_addr, bindings.test_ptr.raw)
    return mem, bindings


def make_setup(kind: GadgetKind | str, params: GadgetParams | None = None, target_tag: int = 0x9,
               vary_pattern: bool = False, target_addr: int = TARGET_ADDR) -> GadgetSetup:
    """Build a gadget with its memory image.

    ``vary_pattern`` trains on one test line and measures another, which
    defeats the prefetcher (the NO_DP ablation).
    """
    kind = GadgetKind(kind)
    params = params or (GadgetParams(len_gap=0, test_kind=TestKind.DEP_LD, slide=0)
                        if kind is GadgetKind.V2 else GadgetParams())
    mem, bindings = make_memory(target_tag, target_addr)
    extra: dict[int, int] = {}
    probe = bindings.test_ptr
    train_test = bindings.test_ptr
    if kind is GadgetKind.TEMPLATE:
        program = build_template(params, bindings)
    elif kind is GadgetKind.V1:
        program = build_tiktag_v1(params, bindings)
    elif kind is GadgetKind.V2:
        program = build_tiktag_v2(params, bindings)
    else:
        which = Variant.LIST_IN_BRANCH if kind is GadgetKind.V1_LIST_IN_BRANCH else Variant.LIST_MERGED
        program = build_tiktag_v1_variant(which, bindings, params)
        nodes = [TaggedPointer.make(a, REGION_TAG) for a in NODE_ADDRS]
        for cur, nxt in zip(nodes, nodes[1:]):
            mem.write64(cur.addr, nxt.raw)
        extra = {6: nodes[0].raw, 9: TaggedPointer.make(DUMMY_ADDR, REGION_TAG).raw}
        probe = nodes[3]
        train_test = bindings.test_ptr
    if vary_pattern:
        if kind not in (GadgetKind.TEMPLATE, GadgetKind.V1) or params.test_kind.dependent:
            raise InvalidParams("pattern variation applies to independent v1/template TEST only")
        alt = TaggedPointer.make(ALT_TEST_ADDR, REGION_TAG)
        bindings = replace(bindings, test_ptr=alt)
        probe = alt
    bindings.validate(mem)
    return GadgetSetup(kind, program, mem, bindings, target_tag, probe, train_test, extra)


@dataclass
class TrialResult:
    outcome: Outcome
    reading: float
    trace: ExecutionTrace

    @property
    def hit(self) -> bool:
        return self.outcome is Outcome.HIT


class GadgetLab:
    """Runs the train / flush / measure / probe protocol against one gadget."""

    def __init__(self, setup: GadgetSetup, core: Core, timer: Timer | None = None,
                 p_evict: float = 1.0, noise_sigma: float = 0.0, seed: int = 0,
                 train_reps: int = 3, cache: CacheModel | None = None):
        if not 0.0 <= p_evict <= 1.0:
            raise InvalidParams("p_evict must lie in [0, 1]")
        if noise_sigma < 0:
            raise InvalidParams("noise_sigma must be >= 0")
        self.setup = setup
        self.core = core
        self.timer = timer or Timer()
        self.p_evict = p_evict
        self.noise_sigma = noise_sigma
        self.rng = random.Random(seed)
        self.train_reps = train_reps
        self.cache = cache or CacheModel()
        self.env = RunEnvironment(setup.memory, self.cache)

    def run_trial(self, guess_tag: int) -> TrialResult:
        s = self.setup
        mem = s.memory
        cond = s.bindings.cond_ptr.addr
        mem.write64(cond, 1)
        self.env.registers = s.registers(s.target_tag, training=True)
        self.core.train(s.program, self.env, self.train_reps)
        self.cache.flush(s.probe.addr)
        self.cache.evict(cond, self.p_evict, self.rng)
        mem.write64(cond, 0)
        self.env.registers = s.registers(guess_tag, training=False)
        trace = self.core.run(s.program, self.env)
        reading = timed_access(self.cache, mem, s.probe, self.timer, self.noise_sigma, self.rng)
        hit = self.timer.is_hit(reading)
        return TrialResult(Outcome.HIT if hit else Outcome.MISS, reading, trace)

    def hit_rate(self, guess_tag: int, trials: int) -> float:
        if trials < 1:
            raise InvalidParams("trials must be >= 1")
        return sum(self.run_trial(guess_tag).hit for _ in range(trials)) / trials

    def latency_spread(self) -> float:
        return self.timer.read(self.cache.miss_latency) - self.timer.read(self.cache.hit_latency)

    def leak_tag(self, trials_per_guess: int = 256) -> int:
        """Brute-force Tg in 0..15; the lowest mean probe latency wins."""
        if trials_per_guess < 1:
            raise InvalidParams("trials_per_guess must be >= 1")
        means = []
        for guess in range(16):
            total = 0.0
            for _ in range(trials_per_guess):
                total += self.run_trial(guess).reading
            means.append(total / trials_per_guess)
        order = sorted(range(16), key=lambda g: (means[g], g))
        best, second = order[0], order[1]
        gap = means[second] - means[best]
        tolerance = 0.5 * self.latency_spread() / trials_per_guess
        if gap < tolerance:
            raise AmbiguousLeak(best, second, gap, tolerance)
        return best


def run_trial(program: Program, bindings: TemplateBindings, guess_tag: int, core: Core,
              mode: MteMode | str | None = None, memory: TaggedMemory | None = None,
              target_tag: int | None = None) -> Outcome:
    """One protocol trial on a bare program (fresh cache, noiseless, p_evict=1)."""
    if mode is not None and MteMode(mode) is not core.profile.mte_mode:
        core.profile = core.profile.replace(mte_mode=MteMode(mode))
    if memory is None:
        memory, made = make_memory(bindings.guess_ptr.tag, bindings.guess_ptr.addr)
        bindings = made if made.guess_ptr.addr == bindings.guess_ptr.addr else bindings
    tm = memory.get_tag(bindings.guess_ptr.addr) if target_tag is None else target_tag
    setup = GadgetSetup(GadgetKind.TEMPLATE, program, memory, bindings, tm, bindings.test_ptr,
                        bindings.test_ptr)
    return GadgetLab(setup, core).run_trial(guess_tag).outcome


# -- sweeps -----------------------------------------------------------------

def derive_seed(seed: int, *parts) -> int:
    text = "|".join([str(seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class CurvePoint:
    axis: str
    series: str
    hits: int
    trials: int
    seed: int

    @property
    def rate(self) -> float:
        return self.hits / self.trials


@dataclass
class HitRateCurve:
    name: str
    points: list[CurvePoint] = field(default_factory=list)

    def rate(self, axis: str, series: str) -> float:
        for p in self.points:
            if p.axis == axis and p.series == series:
                return p.rate
        raise KeyError((axis, series))

    def separation(self, axis: str) -> float:
        return abs(self.rate(axis, "match") - self.rate(axis, "mismatch"))

    def axes(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in self.points:
            seen.setdefault(p.axis)
        return list(seen)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "series", "rate", "trials", "seed"])
        for p in self.points:
            w.writerow([p.axis, p.series, f"{p.rate:.6f}", p.trials, p.seed])
        return buf.getvalue()

    def to_json(self) -> str:
        summary = {
            "name": self.name,
            "points": [
                {"axis": p.axis, "series": p.series, "rate": round(p.rate, 6),
                 "hits": p.hits, "trials": p.trials, "seed": p.seed}
                for p in self.points
            ],
            "separation": {a: round(self.separation(a), 6) for a in self.axes()
                           if {"match", "mismatch"} <= {p.series for p in self.points if p.axis == a}},
        }
        return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def axis_label(overrides: dict) -> str:
    return ";".join(f"{k}={v.value if isinstance(v, enum.Enum) else v}" for k, v in overrides.items())


def measure_point(kind: GadgetKind | str, params: GadgetParams, profile: CoreProfile, guess: str,
                  trials: int, seed: int, target_tag: int = 0x9, timer: Timer | None = None,
                  p_evict: float = 1.0, noise_sigma: float = 0.0, vary_pattern: bool = False,
                  mitigation: "Mitigation | None" = None) -> int:
    """Hit count of ``trials`` trials on a fresh core; ``guess`` is 'match' or 'mismatch'."""
    setup = make_setup(kind, params, target_tag, vary_pattern=vary_pattern)
    if mitigation is not None:
        setup.program = apply_mitigation(setup.program, mitigation)
    lab = GadgetLab(setup, Core(profile), timer, p_evict, noise_sigma, seed)
    tag = target_tag if guess == "match" else (target_tag + 1) & 0xF
    return sum(lab.run_trial(tag).hit for _ in range(trials))


def _point(args) -> int:
    kind, params, profile, s, trials, point_seed, lab_kwargs = args
    return measure_point(kind, params, profile, s, trials, point_seed, **lab_kwargs)


def sweep(kind: GadgetKind | str, base: GadgetParams, grid: Sequence[dict], trials: int,
          profile: CoreProfile, seed: int = 0, name: str = "sweep",
          series: Iterable[str] = ("match", "mismatch"), workers: int = 1,
          **lab_kwargs) -> HitRateCurve:
    """Evaluate each grid point (overrides of ``base``) for each series on a fresh core.

    Points carry their own derived seeds, so ``workers > 1`` gives identical output.
    """
    if not grid:
        raise InvalidParams("grid must be non-empty")
    jobs, labels = [], []
    for overrides in grid:
        params = replace(base, **overrides)
        axis = axis_label(overrides)
        for s in series:
            point_seed = derive_seed(seed, name, axis, s)
            jobs.append((kind, params, profile, s, trials, point_seed, lab_kwargs))
            labels.append((axis, s, point_seed))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(_point, jobs))
    else:
        hits = [_point(j) for j in jobs]
    curve = HitRateCurve(name)
    for (axis, s, point_seed), h in zip(labels, hits):
        curve.points.append(CurvePoint(axis, s, h, trials, point_seed))
    return curve


# -- ablation -----------------------------------------------------------------

class Ablation(enum.Enum):
    BASELINE = "BASELINE"
    NO_SE = "NO_SE"
    NO_SE_NO_DP = "NO_SE_NO_DP"
    NO_DP = "NO_DP"


def classify_rate(rate: float) -> str:
    if rate >= 0.98:
        return "cached"
    if rate <= 0.02:
        return "uncached"
    return "periodic"


def ablation(config: Ablation | str, trials: int, profile: CoreProfile, seed: int = 0,
             params: GadgetParams | None = None, **lab_kwargs) -> dict:
    """Len(CHECK)=2 INDEP_LD gadget with speculative TEST and/or prefetch pattern removed."""
    config = Ablation(config)
    params = params or GadgetParams(len_check=2, len_gap=10, test_kind=TestKind.INDEP_LD)
    no_se = config in (Ablation.NO_SE, Ablation.NO_SE_NO_DP)
    no_dp = config in (Ablation.NO_DP, Ablation.NO_SE_NO_DP)
    mitigation = Mitigation.SB_BEFORE_TEST() if no_se else None
    out = {"config": config.value}
    for s in ("match", "mismatch"):
        point_seed = derive_seed(seed, "ablation", config.value, s)
        hits = measure_point(GadgetKind.V1, params, profile, s, trials, point_seed,
                             vary_pattern=no_dp, mitigation=mitigation, **lab_kwargs)
        out[s] = {"rate": hits / trials, "class": classify_rate(hits / trials),
                  "trials": trials, "seed": point_seed}
    return out


def ablation_table(trials: int, profile: CoreProfile, seed: int = 0, **kw) -> list[dict]:
    return [ablation(c, trials, profile, seed, **kw) for c in Ablation]


# -- tag leakage ----------------------------------------------------------------

def leak_tag(target_tag: int, kind: GadgetKind | str, core: Core, trials_per_guess: int = 256,
             params: GadgetParams | None = None, timer: Timer | None = None,
             p_evict: float = 1.0, noise_sigma: float = 0.0, seed: int = 0,
             target_addr: int = TARGET_ADDR) -> int:
    """Recover the tag of ``target_addr`` through the given gadget.

    ``target_tag`` only seeds the simulated memory; the oracle itself sees
    nothing but probe latencies.
    """
    setup = make_setup(kind, params, target_tag, target_addr=target_addr)
    lab = GadgetLab(setup, core, timer, p_evict, noise_sigma, seed)
    return lab.leak_tag(trials_per_guess)


# -- mitigations ----------------------------------------------------------------

class MitigationKind(enum.Enum):
    SB_BEFORE_TEST = "SB_BEFORE_TEST"
    SB_BEFORE_CHECK = "SB_BEFORE_CHECK"
    PAD_WINDOW = "PAD_WINDOW"
    PAD_STLF_GAP = "PAD_STLF_GAP"


@dataclass(frozen=True)
class Mitigation:
    kind: MitigationKind
    n: int = 0

    @classmethod
    def SB_BEFORE_TEST(cls) -> "Mitigation":
        return cls(MitigationKind.SB_BEFORE_TEST)

    @classmethod
    def SB_BEFORE_CHECK(cls) -> "Mitigation":
        return cls(MitigationKind.SB_BEFORE_CHECK)

    @classmethod
    def PAD_WINDOW(cls, n: int) -> "Mitigation":
        return cls(MitigationKind.PAD_WINDOW, n)

    @classmethod
    def PAD_STLF_GAP(cls, n: int) -> "Mitigation":
        return cls(MitigationKind.PAD_STLF_GAP, n)

    @classmethod
    def parse(cls, text: str) -> "Mitigation":
        """``SB_BEFORE_TEST`` or ``PAD_WINDOW(30)``."""
        text = text.strip()
        name, _, rest = text.partition("(")
        kind = MitigationKind(name.strip().upper())
        n = int(rest.rstrip(")")) if rest else 0
        return cls(kind, n)

    def __str__(self) -> str:
        if self.kind in (MitigationKind.PAD_WINDOW, MitigationKind.PAD_STLF_GAP):
            return f"{self.kind.value}({self.n})"
        return self.kind.value


_INSERT_AT = {
    MitigationKind.SB_BEFORE_TEST: "test",
    MitigationKind.SB_BEFORE_CHECK: "check",
    MitigationKind.PAD_WINDOW: "check",
    MitigationKind.PAD_STLF_GAP: "stlf_load",
}


def apply_mitigation(program: Program, mitigation: Mitigation) -> Program:
    label = _INSERT_AT[mitigation.kind]
    if label not in program.labels or "skip" not in program.labels:
        raise UnrecognizedShape(f"program has no {label!r} block for {mitigation}")
    if mitigation.kind in (MitigationKind.PAD_WINDOW, MitigationKind.PAD_STLF_GAP):
        if mitigation.n < 0:
            raise InvalidParams("padding must be >= 0")
        new = [isa.NOP] * mitigation.n
    else:
        new = [isa.SB]
    return program.insert(program.labels[label], new)
