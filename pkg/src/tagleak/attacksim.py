"""Allocator tag policies and MTE-bypass attack loops driven by a tag leakage oracle.

Tag policies (alloc / reuse / release):

=================  ===========================  ==========  ==================================
policy             fresh allocation             reuse       release
=================  ===========================  ==========  ==================================
SCUDO              uniform 0x0-0xf              keep tag    uniform, never the previous tag
SCUDO odd_even     uniform within slot parity   keep tag    same, within the slot parity
PARTITION_ALLOC    uniform 0x1-0xf              keep tag    increment, 0xf wraps to 0x1
KERNEL             uniform 0x0-0xe              uniform     reserved tag 0xf
=================  ===========================  ==========  ==================================
"""
from __future__ import annotations

import enum
import json
import random
from dataclasses import asdict, dataclass, field

from . import isa
from .gadgets import AmbiguousLeak, GadgetKind, derive_seed, leak_tag
from .speccore import A715LIKE, X3LIKE, Core, MteMode, RunEnvironment
from .tagmem import CacheModel, TaggedMemory, TaggedPointer

ARENA_BASE = 0x100000
KERNEL_FREE_TAG = 0xF


class AttackError(RuntimeError):
    pass


class DoubleFree(AttackError):
    pass


class InvalidPointer(AttackError):
    pass


class RetriesExhausted(AttackError):
    def __init__(self, stats: "AttackStats"):
        super().__init__(f"no tag match after {stats.attempts} attempts")
        self.stats = stats


class DeterministicallyImpossible(AttackError):
    pass


class PolicyKind(enum.Enum):
    SCUDO = "scudo"
    PARTITION_ALLOC = "partition_alloc"
    KERNEL = "kernel"


@dataclass(frozen=True)
class TagPolicy:
    kind: PolicyKind
    odd_even: bool = False

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", PolicyKind(self.kind.lower()))
        if self.odd_even and self.kind is not PolicyKind.SCUDO:
            raise ValueError("odd_even applies to SCUDO only")

    def candidates(self, slot: int) -> range | list[int]:
        """Tags a fresh allocation in ``slot`` may receive."""
        if self.kind is PolicyKind.PARTITION_ALLOC:
            return range(0x1, 0x10)
        if self.kind is PolicyKind.KERNEL:
            return range(0x0, 0xF)
        if self.odd_even:
            return list(range(slot & 1, 16, 2))
        return range(0x0, 0x10)

    def alloc_tag(self, slot: int, rng: random.Random) -> int:
        return rng.choice(self.candidates(slot))

    def reuse_tag(self, slot: int, current: int, rng: random.Random) -> int:
        if self.kind is PolicyKind.KERNEL:
            return rng.choice(self.candidates(slot))
        return current

    def release_tag(self, slot: int, previous: int, rng: random.Random) -> int:
        if self.kind is PolicyKind.PARTITION_ALLOC:
            return 0x1 if previous >= 0xF else previous + 1
        if self.kind is PolicyKind.KERNEL:
            return KERNEL_FREE_TAG
        return rng.choice([t for t in self.candidates(slot) if t != previous])

    @property
    def entropy(self) -> int:
        return len(self.candidates(0))

    def adjacent_can_match(self) -> bool:
        return not self.odd_even

    def __str__(self) -> str:
        return self.kind.value + ("+odd_even" if self.odd_even else "")


SCUDO = TagPolicy(PolicyKind.SCUDO)
SCUDO_ODD_EVEN = TagPolicy(PolicyKind.SCUDO, odd_even=True)
PARTITION_ALLOC = TagPolicy(PolicyKind.PARTITION_ALLOC)
KERNEL = TagPolicy(PolicyKind.KERNEL)


class HeapModel:
    """Fixed-size slots laid out sequentially in one tagged arena, LIFO reuse."""

    def __init__(self, policy: TagPolicy, rng: random.Random, slot_size: int = 64,
                 num_slots: int = 16, base: int = ARENA_BASE):
        if slot_size % 16 or slot_size <= 0:
            raise ValueError("slot size must be a positive multiple of 16")
        self.policy = policy
        self.rng = rng
        self.slot_size = slot_size
        self.num_slots = num_slots
        self.base = base
        self.memory = TaggedMemory()
        self.memory.map(base, slot_size * num_slots)
        self.live: dict[int, int] = {}  # slot -> tag handed out
        self.free_list: list[int] = []
        self.used: set[int] = set()
        self.next_slot = 0

    def slot_addr(self, slot: int) -> int:
        return self.base + slot * self.slot_size

    def slot_of(self, ptr: TaggedPointer) -> int:
        off = ptr.addr - self.base
        if off < 0 or off % self.slot_size or off >= self.slot_size * self.num_slots:
            raise InvalidPointer(f"{ptr!r} is not a slot start")
        return off // self.slot_size

    def tag_of(self, slot: int) -> int:
        return self.memory.get_tag(self.slot_addr(slot))

    def _retag(self, slot: int, tag: int) -> None:
        self.memory.set_tags(self.slot_addr(slot), self.slot_size, tag)

    def alloc(self, size: int | None = None) -> TaggedPointer:
        if size is not None and not 0 < size <= self.slot_size:
            raise ValueError(f"size must be in (0, {self.slot_size}]")
        if self.free_list:
            slot = self.free_list.pop()
            tag = self.policy.reuse_tag(slot, self.tag_of(slot), self.rng)
        elif self.next_slot < self.num_slots:
            slot = self.next_slot
            self.next_slot += 1
            tag = self.policy.alloc_tag(slot, self.rng)
        else:
            raise MemoryError("arena exhausted")
        self._retag(slot, tag)
        self.live[slot] = tag
        self.used.add(slot)
        return TaggedPointer.make(self.slot_addr(slot), tag)

    def release(self, ptr: TaggedPointer) -> None:
        slot = self.slot_of(ptr)
        if slot not in self.live:
            if slot in self.used:
                raise DoubleFree(f"slot {slot} already free")
            raise InvalidPointer(f"slot {slot} was never allocated")
        if self.live[slot] != ptr.tag:
            raise InvalidPointer(f"pointer tag {ptr.tag:#x} does not own slot {slot}")
        del self.live[slot]
        self._retag(slot, self.policy.release_tag(slot, self.tag_of(slot), self.rng))
        self.free_list.append(slot)


def alloc(heap: HeapModel, policy: TagPolicy | None = None, size: int | None = None) -> TaggedPointer:
    if policy is not None and policy != heap.policy:
        raise ValueError("heap was built for a different policy")
    return heap.alloc(size)


def release(heap: HeapModel, policy: TagPolicy | None, ptr: TaggedPointer) -> None:
    if policy is not None and policy != heap.policy:
        raise ValueError("heap was built for a different policy")
    heap.release(ptr)


# -- oracle ---------------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    """Tag leakage oracle.

    ``mode='model'`` answers with the true tag with probability ``accuracy``
    and a uniformly drawn wrong tag otherwise.  ``mode='gadget'`` runs the
    simulated gadget against the real tag each time (slow, exact).
    """

    gadget: str = "v2"
    trials_per_guess: int = 256
    accuracy: float = 1.0
    mode: str = "model"
    confirm: bool = True
    p_evict: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in (0, 1]")
        if self.mode not in ("model", "gadget"):
            raise ValueError("mode must be 'model' or 'gadget'")
        GadgetKind(self.gadget)

    @property
    def cost_per_leak(self) -> int:
        return 16 * self.trials_per_guess


class Oracle:
    def __init__(self, config: OracleConfig, rng: random.Random):
        self.config = config
        self.rng = rng
        self.queries = 0

    def leak(self, memory: TaggedMemory, addr: int) -> int | None:
        """Leaked tag of the granule at ``addr``; None when the gadget is ambiguous."""
        self.queries += 1
        true_tag = memory.get_tag(addr)
        c = self.config
        if c.mode == "model":
            if self.rng.random() < c.accuracy:
                return true_tag
            return self.rng.choice([t for t in range(16) if t != true_tag])
        kind = GadgetKind(c.gadget)
        profile = A715LIKE if kind is GadgetKind.V2 else X3LIKE
        try:
            return leak_tag(true_tag, kind, Core(profile), c.trials_per_guess, p_evict=c.p_evict,
                            noise_sigma=c.noise_sigma, seed=self.rng.getrandbits(63))
        except AmbiguousLeak:
            return None


def calibrate(config: OracleConfig, runs: int = 32, seed: int = 0) -> OracleConfig:
    """Measure gadget-mode accuracy and return an equivalent model-mode config."""
    rng = random.Random(seed)
    oracle = Oracle(replace_config(config, mode="gadget"), rng)
    mem = TaggedMemory()
    mem.map(ARENA_BASE, 16)
    correct = 0
    for i in range(runs):
        tag = i % 16
        mem.set_tag(ARENA_BASE, tag)
        correct += oracle.leak(mem, ARENA_BASE) == tag
    # keep accuracy strictly positive so the config stays valid
    return replace_config(config, mode="model", accuracy=max(correct, 1) / runs)


def replace_config(config: OracleConfig, **changes) -> OracleConfig:
    d = asdict(config)
    d.update(changes)
    return OracleConfig(**d)


def success_probability(accuracy: float, policy: TagPolicy, confirm: bool = True) -> float:
    """Probability that an unbounded UAF loop ends in a fault-free write (analytic).

    The slot is either in state M (its tag equals the dangling pointer's) or N.
    A round in M is accepted with probability tp, a round in N is wrongly
    accepted with probability fp; a rejected round releases and reallocates,
    moving to M with probability ``to_m[state]``.  Confirmation squares both
    acceptance probabilities because the two leaks are independent.
    """
    a = accuracy
    tp, fp = a, (1 - a) / 15
    if confirm:
        tp, fp = tp * tp, fp * fp
    k = policy.entropy
    if policy.kind is PolicyKind.KERNEL:
        start_m, m_to_m, n_to_m = 1 / k, 1 / k, 1 / k
    elif policy.kind is PolicyKind.PARTITION_ALLOC:
        raise ValueError("increment release is deterministic; simulate instead")
    else:
        # release never repeats the previous tag and draws from the k-1 others
        start_m, m_to_m, n_to_m = 0.0, 0.0, 1 / (k - 1)
    # S_M = tp + (1-tp) * (m_to_m S_M + (1-m_to_m) S_N)
    # S_N = (1-fp) * (n_to_m S_M + (1-n_to_m) S_N)
    a11 = 1 - (1 - tp) * m_to_m
    a12 = -(1 - tp) * (1 - m_to_m)
    a21 = -(1 - fp) * n_to_m
    a22 = 1 - (1 - fp) * (1 - n_to_m)
    det = a11 * a22 - a12 * a21
    s_m = (tp * a22) / det
    s_n = (-a21 * tp) / det
    return start_m * s_m + (1 - start_m) * s_n


# -- attack loops -------------------------------------------------------------------

@dataclass
class AttackStats:
    success: bool
    attempts: int
    queries: int
    gadget_runs: int
    tag_faults: int
    policy: str = ""
    seed: int = 0
    leaks_ok: int = 0

    @property
    def retries(self) -> int:
        return max(0, self.attempts - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retries"] = self.retries
        return d


def corrupt(memory: TaggedMemory, ptr: TaggedPointer, value: int = 0x4141414141414141,
            mode: MteMode = MteMode.SYNC) -> bool:
    """Architectural write through ``ptr`` on the core; True when no tag fault occurred."""
    program = isa.Program((isa.str_(1, 0), isa.HALT))
    core = Core(X3LIKE.replace(mte_mode=mode))
    env = RunEnvironment(memory, CacheModel(), {0: ptr.raw, 1: value})
    trace = core.run(program, env)
    return not trace.faults and not trace.deferred_faults


def _confirmed(oracle: Oracle, memory: TaggedMemory, addr: int, expected: int) -> bool:
    if oracle.leak(memory, addr) != expected:
        return False
    if oracle.config.confirm:
        return oracle.leak(memory, addr) == expected
    return True


def bypass_uaf(policy: TagPolicy, oracle_config: OracleConfig, max_retries: int = 1000,
               seed: int = 0, force_match: bool = False) -> AttackStats:
    """Reallocate the freed slot until the dangling pointer's tag matches, then write.

    ``force_match`` restores the victim's tag right after the release, so a
    keep-on-reuse policy hands the slot back with a matching tag at once.
    """
    rng = random.Random(seed)
    heap = HeapModel(policy, rng)
    oracle = Oracle(oracle_config, random.Random(derive_seed(seed, "oracle")))
    victim = heap.alloc()
    dangling = victim
    slot = heap.slot_of(victim)
    heap.release(victim)
    if force_match:
        heap._retag(slot, dangling.tag)
    attempts = 0
    while attempts < max_retries:
        attempts += 1
        target = heap.alloc()
        if heap.slot_of(target) != slot:
            raise AttackError("allocator did not reuse the freed slot")
        if _confirmed(oracle, heap.memory, target.addr, dangling.tag):
            ok = corrupt(heap.memory, dangling)
            return _stats(ok, attempts, oracle, policy, seed)
        heap.release(target)
    raise RetriesExhausted(_stats(False, attempts, oracle, policy, seed))


def bypass_overflow(policy: TagPolicy, oracle_config: OracleConfig, max_retries: int = 1000,
                    seed: int = 0) -> AttackStats:
    """Leak the tags of two adjacent objects; reallocate the target until they match."""
    if not policy.adjacent_can_match():
        raise DeterministicallyImpossible(
            f"{policy}: adjacent slots always differ in tag parity, a linear overflow always faults")
    rng = random.Random(seed)
    heap = HeapModel(policy, rng)
    oracle = Oracle(oracle_config, random.Random(derive_seed(seed, "oracle")))
    vuln = heap.alloc()
    target = heap.alloc()
    attempts = 0
    while attempts < max_retries:
        attempts += 1
        tv = oracle.leak(heap.memory, vuln.addr)
        tt = oracle.leak(heap.memory, target.addr)
        if tv is not None and tv == tt:
            if not oracle.config.confirm or oracle.leak(heap.memory, target.addr) == tv:
                # vuln_ptr walks past its object into the adjacent target
                overflow = TaggedPointer.make(target.addr, vuln.tag)
                ok = corrupt(heap.memory, overflow)
                return _stats(ok, attempts, oracle, policy, seed)
        heap.release(target)
        target = heap.alloc()
    raise RetriesExhausted(_stats(False, attempts, oracle, policy, seed))


def _stats(ok: bool, attempts: int, oracle: Oracle, policy: TagPolicy, seed: int) -> AttackStats:
    return AttackStats(success=ok, attempts=attempts, queries=oracle.queries,
                       gadget_runs=oracle.queries * oracle.config.cost_per_leak,
                       tag_faults=0 if ok else 1, policy=str(policy), seed=seed)


def leak_only(policy: TagPolicy, oracle_config: OracleConfig, runs: int = 100,
              seed: int = 0) -> AttackStats:
    """Allocate objects and leak each tag once; counts correct leaks."""
    rng = random.Random(seed)
    heap = HeapModel(policy, rng, num_slots=max(runs, 1))
    oracle = Oracle(oracle_config, random.Random(derive_seed(seed, "oracle")))
    correct = 0
    for _ in range(runs):
        ptr = heap.alloc()
        correct += oracle.leak(heap.memory, ptr.addr) == ptr.tag
    return AttackStats(success=correct == runs, attempts=runs, queries=oracle.queries,
                       gadget_runs=oracle.queries * oracle_config.cost_per_leak, tag_faults=0,
                       policy=str(policy), seed=seed, leaks_ok=correct)


@dataclass
class AttackSummary:
    attack: str
    policy: str
    runs: int
    successes: int = 0
    failures: int = 0
    exhausted: int = 0
    mean_attempts: float = 0.0
    mean_queries: float = 0.0
    tag_faults_on_success: int = 0
    impossible: bool = False
    results: list[dict] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.runs if self.runs else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["success_rate"] = self.success_rate
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        head = "# tagleak-attack v1\nattack,policy,runs,successes,failures,exhausted,mean_attempts,mean_queries,impossible\n"
        return head + (f"{self.attack},{self.policy},{self.runs},{self.successes},{self.failures},"
                       f"{self.exhausted},{self.mean_attempts:.4f},{self.mean_queries:.4f},"
                       f"{str(self.impossible).lower()}\n")


def run_attacks(attack: str, policy: TagPolicy, oracle_config: OracleConfig, runs: int,
                seed: int = 0, max_retries: int = 1000, keep_results: bool = False) -> AttackSummary:
    """Aggregate ``runs`` independent attack loops with per-run derived seeds."""
    fn = {"uaf": bypass_uaf, "overflow": bypass_overflow}[attack]
    summary = AttackSummary(attack, str(policy), runs)
    attempts = []
    queries = []
    for i in range(runs):
        run_seed = derive_seed(seed, attack, str(policy), i)
        try:
            stats = fn(policy, oracle_config, max_retries, run_seed)
        except DeterministicallyImpossible:
            summary.impossible = True
            return summary
        except RetriesExhausted as exc:
            summary.exhausted += 1
            stats = exc.stats
        else:
            if stats.success:
                summary.successes += 1
            else:
                summary.failures += 1
        attempts.append(stats.attempts)
        queries.append(stats.queries)
        if keep_results:
            summary.results.append(stats.to_dict())
    summary.mean_attempts = sum(attempts) / len(attempts)
    summary.mean_queries = sum(queries) / len(queries)
    return summary
