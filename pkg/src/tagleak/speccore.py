"""Speculative out-of-order core model with MTE tag checks.

Timing model
------------
* Dispatch is positional: the k-th dynamic instruction after a redirect
  dispatches at ``base + k // dispatch_width``.
* Issue is in order with stall-on-use, at most ``dispatch_width`` per cycle.
  ALU ops take 1 cycle, loads take the cache hit/miss latency, forwarded
  loads ``forward_latency``.
* A conditional branch does not block issue.  It resolves one cycle after
  its condition register becomes ready.  On a misprediction the predicted
  path runs speculatively until dispatch or issue reaches the resolve cycle,
  or until a barrier, ``halt`` or another conditional branch.
* Values that never arrive (blocked forwards, unmapped or suppressed loads)
  are modelled as ready at infinity, so in-order issue stops there.

Wrong-path events
-----------------
A speculative tag-check fault (MISMATCH or UNMAPPED) whose dispatch cycle is
within ``wpe_window_cycles`` of the mispredicted branch is a wrong-path event.
Events only drain the confidence counter once at least ``min_wpe_events`` of
them are seen for the same branch.  When the counter hits zero, speculative
fills and prefetches are suppressed from ``shrink_latency`` cycles later
until the end of the run, and the counter is refilled.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Mapping

from .isa import NUM_REGS, Opcode, Program
from .tagmem import (ADDR_MASK, MASK64, TAG_SHIFT, CacheModel, SimulationError,
                     TaggedMemory)

INF = float("inf")

_LOAD = int(Opcode.LOAD)
_STORE = int(Opcode.STORE)
_ORR = int(Opcode.ORR)
_EOR = int(Opcode.EOR)
_MOV = int(Opcode.MOV_IMM)
_NOP = int(Opcode.NOP)
_ISB = int(Opcode.ISB)
_SB = int(Opcode.SB)
_BEQZ = int(Opcode.BRANCH_EQZ)
_JMP = int(Opcode.JUMP)
_HALT = int(Opcode.HALT)


class SimLimitExceeded(SimulationError):
    pass


class MteMode(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class CoreProfile:
    name: str
    dispatch_width: int = 6
    wpe_window_cycles: int = 5
    confidence_budget: int = 12
    min_wpe_events: int = 2
    shrink_latency: int = 10
    v1_shrink_enabled: bool = True
    stlf_gating_enabled: bool = False
    prefetcher_enabled: bool = True
    prefetch_delay: int = 10
    mte_mode: MteMode = MteMode.SYNC
    always_forward_stlf: bool = False
    ignore_tcf_for_speculation: bool = False
    redirect_penalty: int = 1
    forward_latency: int = 1
    max_steps: int = 100_000

    def __post_init__(self):
        if self.dispatch_width < 1:
            raise ValueError("dispatch_width must be >= 1")
        if self.confidence_budget < 1 or self.min_wpe_events < 1:
            raise ValueError("confidence_budget and min_wpe_events must be >= 1")
        if self.wpe_window_cycles < 0 or self.shrink_latency < 0 or self.prefetch_delay < 0:
            raise ValueError("cycle counts must be non-negative")
        if isinstance(self.mte_mode, str):
            object.__setattr__(self, "mte_mode", MteMode(self.mte_mode.lower()))

    def replace(self, **changes) -> "CoreProfile":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mte_mode"] = self.mte_mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoreProfile":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown profile keys: {sorted(unknown)}")
        return cls(**d)


X3LIKE = CoreProfile("x3like", dispatch_width=6, v1_shrink_enabled=True,
                     stlf_gating_enabled=False, prefetcher_enabled=True)
A715LIKE = CoreProfile("a715like", dispatch_width=5, v1_shrink_enabled=False,
                       stlf_gating_enabled=True, prefetcher_enabled=False)
PROFILES = {"x3like": X3LIKE, "a715like": A715LIKE}


def get_profile(name: str) -> CoreProfile:
    try:
        return PROFILES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown core profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class RunEnvironment:
    memory: TaggedMemory
    cache: CacheModel
    registers: Mapping[int, int] = field(default_factory=dict)


@dataclass
class ExecutionTrace:
    registers: list[int]
    events: list[tuple]
    issues: list[tuple[int, float, bool]]
    faults: list[tuple[int, int, str]]
    deferred_faults: list[tuple[int, int, str]]
    cycles: float
    suppressed: bool = False

    @property
    def faulted(self) -> bool:
        return bool(self.faults)

    def events_of(self, kind: str) -> list[tuple]:
        return [e for e in self.events if e[1] == kind]

    def dump(self) -> str:
        """One event per line: cycle, kind, address, detail."""
        out = []
        for cycle, kind, addr, detail in self.events:
            a = "-" if addr is None else f"{addr:#x}"
            out.append(f"{cycle} {kind} {a} {detail}")
        return "\n".join(out) + ("\n" if out else "")


class BranchPredictor:
    """One bit of last outcome per branch site, defaulting to not-taken."""

    def __init__(self):
        self.table: dict[tuple[int, int], bool] = {}

    def predict(self, site: int, pc: int) -> bool:
        return self.table.get((site, pc), False)

    def update(self, site: int, pc: int, taken: bool) -> None:
        self.table[(site, pc)] = taken


class Prefetcher:
    """Replays the line sequence of the last learning run of a code site."""

    def __init__(self):
        self.patterns: dict[int, tuple[int, ...]] = {}

    def pattern(self, site: int) -> tuple[int, ...]:
        return self.patterns.get(site, ())


class Core:
    def __init__(self, profile: CoreProfile):
        self.profile = profile
        self.predictor = BranchPredictor()
        self.prefetcher = Prefetcher()
        self.confidence = profile.confidence_budget

    def reset_speculation(self) -> None:
        self.confidence = self.profile.confidence_budget

    def train(self, program: Program, env: RunEnvironment, repetitions: int = 3) -> BranchPredictor:
        for _ in range(repetitions):
            self.run(program, env, learn=True)
        return self.predictor

    def run(self, program: Program, env: RunEnvironment, learn: bool = False) -> ExecutionTrace:
        p = self.profile
        code = program.compiled
        n = len(code)
        site = program.site
        mem = env.memory
        cache = env.cache
        hit_lat = cache.hit_latency
        shift = cache._shift
        W = p.dispatch_width
        sync = p.mte_mode is MteMode.SYNC
        bp = self.predictor.table

        regs = [0] * NUM_REGS
        ready = [0] * NUM_REGS
        for r, v in env.registers.items():
            regs[r] = v & MASK64

        events: list[tuple] = []
        issues: list[tuple] = []
        faults: list[tuple] = []
        deferred: list[tuple] = []
        learned: list[int] = []

        pattern = self.prefetcher.patterns.get(site, ()) if p.prefetcher_enabled else ()
        # cursor < 0 means the pattern diverged for this run
        state = {"cursor": 0 if pattern else -1, "suppress_at": INF}
        prefetches: list[tuple[float, int]] = []

        def observe_load(line: int, t: float) -> None:
            c = state["cursor"]
            if c < 0:
                return
            if pattern[c] == line:
                c += 1
                if c < len(pattern):
                    prefetches.append((t + p.prefetch_delay, pattern[c]))
                    state["cursor"] = c
                else:
                    state["cursor"] = -1
            else:
                state["cursor"] = -1

        pc = program.entry
        k = 0
        base_k = 0
        base_cycle = 0
        last_issue = 0
        n_at_last = 0
        end = 0
        steps = 0
        max_steps = p.max_steps

        while pc < n:
            steps += 1
            if steps > max_steps:
                raise SimLimitExceeded(f"exceeded {max_steps} committed instructions")
            op, dst, s0, s1, imm, tgt = code[pc]
            d = base_cycle + (k - base_k) // W
            t = d if d > last_issue else last_issue
            if op == _LOAD or op == _ORR or op == _EOR:
                if ready[s0] > t:
                    t = ready[s0]
                if s1 is not None and ready[s1] > t:
                    t = ready[s1]
            elif op == _STORE:
                if ready[s0] > t:
                    t = ready[s0]
                if ready[s1] > t:
                    t = ready[s1]
            if t == last_issue:
                if n_at_last >= W:
                    t += 1
                    n_at_last = 1
                else:
                    n_at_last += 1
            else:
                n_at_last = 1
            last_issue = t
            issues.append((pc, t, False))
            k += 1

            if op == _LOAD:
                raw = regs[s0]
                addr = raw & ADDR_MASK
                res = _check(mem, raw)
                if res == 2:
                    faults.append((pc, addr, "UNMAPPED"))
                    events.append((t, "fault", addr, "UNMAPPED"))
                    break
                if res == 1:
                    if sync:
                        faults.append((pc, addr, "MISMATCH"))
                        events.append((t, "fault", addr, "MISMATCH"))
                        break
                    deferred.append((pc, addr, "MISMATCH"))
                    events.append((t, "deferred_fault", addr, "MISMATCH"))
                lat = cache.access(addr)
                if lat != hit_lat:
                    events.append((t, "fill", addr, "load"))
                regs[dst] = mem.read64(addr)
                ready[dst] = t + lat
                if t + lat > end:
                    end = t + lat
                line = addr >> shift
                if learn:
                    learned.append(line)
                if pattern:
                    observe_load(line, t)
                pc += 1
            elif op == _STORE:
                raw = regs[s1]
                addr = raw & ADDR_MASK
                res = _check(mem, raw)
                if res == 2:
                    faults.append((pc, addr, "UNMAPPED"))
                    events.append((t, "fault", addr, "UNMAPPED"))
                    break
                if res == 1:
                    if sync:
                        faults.append((pc, addr, "MISMATCH"))
                        events.append((t, "fault", addr, "MISMATCH"))
                        break
                    deferred.append((pc, addr, "MISMATCH"))
                    events.append((t, "deferred_fault", addr, "MISMATCH"))
                if cache.access(addr) != hit_lat:
                    events.append((t, "fill", addr, "store"))
                mem.write64(addr, regs[s0])
                if t + 1 > end:
                    end = t + 1
                pc += 1
            elif op == _ORR or op == _EOR:
                regs[dst] = (regs[s0] | regs[s1]) if op == _ORR else (regs[s0] ^ regs[s1])
                ready[dst] = t + 1
                if t + 1 > end:
                    end = t + 1
                pc += 1
            elif op == _MOV:
                regs[dst] = imm
                ready[dst] = t + 1
                pc += 1
            elif op == _BEQZ:
                taken = regs[s0] == 0
                key = (site, pc)
                predicted = bp.get(key, False)
                resolve = max(d, ready[s0]) + 1
                bp[key] = taken
                if predicted != taken:
                    spc = tgt if predicted else pc + 1
                    self._speculate(code, n, spc, k, base_k, base_cycle, d, resolve, last_issue,
                                    n_at_last, regs[:], ready[:], mem, cache, state, observe_load,
                                    pattern, events, issues)
                    events.append((resolve, "squash", None, f"pc={pc}"))
                    base_cycle = resolve + p.redirect_penalty
                    base_k = k
                    if resolve > end:
                        end = resolve
                pc = tgt if taken else pc + 1
            elif op == _JMP:
                pc = tgt
            elif op == _HALT:
                break
            else:
                pc += 1
            if t > end:
                end = t

        suppress_at = state["suppress_at"]
        for cycle, line in sorted(prefetches):
            if cycle >= suppress_at:
                events.append((cycle, "prefetch_suppressed", line << shift, ""))
            elif mem.is_mapped(line << shift):
                cache.fill_line(line)
                events.append((cycle, "prefetch", line << shift, ""))
        if learn and p.prefetcher_enabled:
            self.prefetcher.patterns[site] = tuple(learned)
        return ExecutionTrace(regs, events, issues, faults, deferred, end,
                              suppressed=suppress_at != INF)

    def _speculate(self, code, n, pc, k, base_k, base_cycle, branch_d, resolve, last_issue,
                   n_at_last, regs, ready, mem, cache, state, observe_load, pattern, events,
                   issues) -> None:
        p = self.profile
        W = p.dispatch_width
        hit_lat = cache.hit_latency
        miss_lat = cache.miss_latency
        shift = cache._shift
        count_wpe = p.v1_shrink_enabled and not p.ignore_tcf_for_speculation
        window = p.wpe_window_cycles
        gating = p.stlf_gating_enabled and not p.always_forward_stlf
        store_buffer: list[tuple[int, int, int]] = []
        n_events = 0

        def wrong_path_event(t: float, addr: int) -> None:
            nonlocal n_events
            n_events += 1
            if n_events < p.min_wpe_events:
                return
            drain = p.min_wpe_events if n_events == p.min_wpe_events else 1
            events.append((t, "wpe", addr, f"drain={drain}"))
            for _ in range(drain):
                self.confidence -= 1
                if self.confidence <= 0:
                    self.confidence = p.confidence_budget
                    at = t + p.shrink_latency
                    if at < state["suppress_at"]:
                        state["suppress_at"] = at
                        events.append((t, "suppress", None, f"from={at}"))

        while pc < n:
            op, dst, s0, s1, imm, tgt = code[pc]
            d = base_cycle + (k - base_k) // W
            if d >= resolve:
                break
            if op == _SB or op == _ISB or op == _HALT or op == _BEQZ:
                break
            if op == _JMP:
                k += 1
                pc = tgt
                continue
            t = d if d > last_issue else last_issue
            if op == _LOAD or op == _ORR or op == _EOR:
                if ready[s0] > t:
                    t = ready[s0]
                if s1 is not None and ready[s1] > t:
                    t = ready[s1]
            elif op == _STORE:
                if ready[s0] > t:
                    t = ready[s0]
                if ready[s1] > t:
                    t = ready[s1]
            if t == last_issue and n_at_last >= W:
                t += 1
            if t >= resolve:
                break
            if t == last_issue:
                n_at_last += 1
            else:
                n_at_last = 1
            last_issue = t
            issues.append((pc, t, True))
            k += 1
            suppress_at = state["suppress_at"]

            if op == _LOAD:
                raw = regs[s0]
                addr = raw & ADDR_MASK
                fwd = None
                for entry in reversed(store_buffer):
                    if entry[0] == addr:
                        fwd = entry
                        break
                if fwd is not None:
                    if gating and fwd[2] == d:
                        res = _check(mem, raw)
                        events.append((t, "tag", addr, _RESULT[res] + ":spec"))
                        if res == 0:
                            regs[dst] = fwd[1]
                            ready[dst] = t + p.forward_latency
                            events.append((t, "forward", addr, "checked"))
                        else:
                            ready[dst] = INF
                            events.append((t, "forward_blocked", addr, _RESULT[res]))
                            if count_wpe and d - branch_d < window:
                                wrong_path_event(t, addr)
                    else:
                        regs[dst] = fwd[1]
                        ready[dst] = t + p.forward_latency
                        events.append((t, "forward", addr, "unchecked"))
                    pc += 1
                    continue
                res = _check(mem, raw)
                events.append((t, "tag", addr, _RESULT[res] + ":spec"))
                if res:
                    if count_wpe and d - branch_d < window:
                        wrong_path_event(t, addr)
                    suppress_at = state["suppress_at"]
                    if res == 2:
                        ready[dst] = INF
                        pc += 1
                        continue
                line = addr >> shift
                if cache.is_cached(addr):
                    cache.fill_line(line)
                    regs[dst] = mem.read64(addr)
                    ready[dst] = t + hit_lat
                elif t >= suppress_at:
                    ready[dst] = INF
                    events.append((t, "fill_suppressed", addr, "load"))
                else:
                    cache.fill_line(line)
                    events.append((t, "fill", addr, "spec_load"))
                    regs[dst] = mem.read64(addr)
                    ready[dst] = t + miss_lat
                if pattern:
                    observe_load(line, t)
                pc += 1
            elif op == _STORE:
                raw = regs[s1]
                addr = raw & ADDR_MASK
                res = _check(mem, raw)
                events.append((t, "tag", addr, _RESULT[res] + ":spec"))
                if res:
                    if count_wpe and d - branch_d < window:
                        wrong_path_event(t, addr)
                    suppress_at = state["suppress_at"]
                    if res == 2:
                        pc += 1
                        continue
                if cache.is_cached(addr):
                    cache.fill_line(addr >> shift)
                elif t >= suppress_at:
                    events.append((t, "fill_suppressed", addr, "store"))
                else:
                    cache.fill_line(addr >> shift)
                    events.append((t, "fill", addr, "spec_store"))
                store_buffer.append((addr, regs[s0], d))
                pc += 1
            elif op == _ORR or op == _EOR:
                regs[dst] = (regs[s0] | regs[s1]) if op == _ORR else (regs[s0] ^ regs[s1])
                ready[dst] = t + 1
                pc += 1
            elif op == _MOV:
                regs[dst] = imm
                ready[dst] = t + 1
                pc += 1
            else:
                pc += 1


_RESULT = ("MATCH", "MISMATCH", "UNMAPPED")


def _check(mem: TaggedMemory, raw: int) -> int:
    """0 match, 1 mismatch, 2 unmapped; a fast path for the hot loop."""
    addr = raw & ADDR_MASK
    r = mem._find(addr)
    if r is None or addr + 8 > r.end:
        return 2
    return 0 if r.tags[(addr - r.base) >> 4] == (raw >> TAG_SHIFT) & 0xF else 1
