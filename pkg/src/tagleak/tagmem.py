"""Tagged memory, tagged pointers, a set-associative cache and timers.

Memory image text format (``dump``/``load``)::

    # tagmem v1
    region 0x10000 0x4000
    0x10000 3 00000000000000000000000000000000
    0x10010 3 ...

Each ``region`` line opens a mapped range (base, size; both 16-byte aligned)
and is followed by one line per 16-byte granule: address, tag (hex digit)
and the 16 data bytes as hex.
"""
from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass

GRANULE = 16
LINE = 64
ADDR_MASK = (1 << 56) - 1
TAG_SHIFT = 56
MASK64 = (1 << 64) - 1


class SimulationError(RuntimeError):
    """Base class for errors raised while simulating."""


class UnmappedAddress(SimulationError):
    def __init__(self, addr: int):
        super().__init__(f"unmapped address {addr:#x}")
        self.addr = addr


class TagFault(SimulationError):
    def __init__(self, addr: int, ptr_tag: int, mem_tag: int):
        super().__init__(f"tag check fault at {addr:#x}: pointer tag {ptr_tag:#x}, memory tag {mem_tag:#x}")
        self.addr = addr
        self.ptr_tag = ptr_tag
        self.mem_tag = mem_tag


class TagCheck(enum.Enum):
    MATCH = "MATCH"
    MISMATCH = "MISMATCH"
    UNMAPPED = "UNMAPPED"


@dataclass(frozen=True)
class TaggedPointer:
    raw: int

    def __post_init__(self):
        if not 0 <= self.raw <= MASK64:
            raise ValueError(f"pointer out of 64-bit range: {self.raw:#x}")

    @classmethod
    def make(cls, addr: int, tag: int) -> "TaggedPointer":
        return cls(((tag & 0xF) << TAG_SHIFT) | (addr & ADDR_MASK))

    @property
    def addr(self) -> int:
        return self.raw & ADDR_MASK

    @property
    def tag(self) -> int:
        return (self.raw >> TAG_SHIFT) & 0xF

    def with_tag(self, tag: int) -> "TaggedPointer":
        if not 0 <= tag <= 0xF:
            raise ValueError(f"tag out of range: {tag}")
        return TaggedPointer((tag << TAG_SHIFT) | (self.raw & ~(0xFF << TAG_SHIFT) & MASK64))

    def __int__(self) -> int:
        return self.raw

    def __repr__(self) -> str:
        return f"TaggedPointer({self.raw:#018x})"


def with_tag(p: TaggedPointer, tag: int) -> TaggedPointer:
    return p.with_tag(tag)


class _Region:
    __slots__ = ("base", "size", "end", "data", "tags")

    def __init__(self, base: int, size: int):
        self.base = base
        self.size = size
        self.end = base + size
        self.data = bytearray(size)
        self.tags = bytearray(size // GRANULE)


class TaggedMemory:
    """Byte-addressable memory over mapped regions with a 4-bit tag per granule."""

    def __init__(self):
        self._regions: list[_Region] = []
        self._last: _Region | None = None

    def map(self, base: int, size: int, tag: int = 0) -> None:
        if base % GRANULE or size % GRANULE or size <= 0:
            raise ValueError("regions must be non-empty and granule aligned")
        if base < 0 or base + size > ADDR_MASK + 1:
            raise ValueError("region outside the 56-bit address space")
        for r in self._regions:
            if base < r.end and r.base < base + size:
                raise ValueError(f"region {base:#x}+{size:#x} overlaps {r.base:#x}")
        region = _Region(base, size)
        if tag:
            region.tags[:] = bytes([tag & 0xF]) * len(region.tags)
        self._regions.append(region)
        self._regions.sort(key=lambda r: r.base)

    @property
    def regions(self) -> list[tuple[int, int]]:
        return [(r.base, r.size) for r in self._regions]

    def _find(self, addr: int) -> _Region | None:
        r = self._last
        if r is not None and r.base <= addr < r.end:
            return r
        for r in self._regions:
            if r.base <= addr < r.end:
                self._last = r
                return r
        return None

    def is_mapped(self, addr: int) -> bool:
        return self._find(addr & ADDR_MASK) is not None

    def _region(self, addr: int) -> _Region:
        r = self._find(addr)
        if r is None:
            raise UnmappedAddress(addr)
        return r

    def set_tag(self, addr: int, tag: int) -> None:
        if not 0 <= tag <= 0xF:
            raise ValueError(f"tag out of range: {tag}")
        addr &= ADDR_MASK
        r = self._region(addr)
        r.tags[(addr - r.base) // GRANULE] = tag

    def set_tags(self, addr: int, size: int, tag: int) -> None:
        """Tag every granule overlapping ``[addr, addr+size)``."""
        start = (addr & ADDR_MASK) & ~(GRANULE - 1)
        for g in range(start, (addr & ADDR_MASK) + size, GRANULE):
            self.set_tag(g, tag)

    def get_tag(self, addr: int) -> int:
        addr &= ADDR_MASK
        r = self._region(addr)
        return r.tags[(addr - r.base) // GRANULE]

    def check_tag(self, ptr: TaggedPointer | int) -> TagCheck:
        raw = int(ptr)
        addr = raw & ADDR_MASK
        r = self._find(addr)
        if r is None:
            return TagCheck.UNMAPPED
        if r.tags[(addr - r.base) // GRANULE] == (raw >> TAG_SHIFT) & 0xF:
            return TagCheck.MATCH
        return TagCheck.MISMATCH

    def read64(self, addr: int) -> int:
        addr &= ADDR_MASK
        r = self._region(addr)
        if addr + 8 > r.end:
            raise UnmappedAddress(addr + 8)
        off = addr - r.base
        return int.from_bytes(r.data[off:off + 8], "little")

    def write64(self, addr: int, value: int) -> None:
        addr &= ADDR_MASK
        r = self._region(addr)
        if addr + 8 > r.end:
            raise UnmappedAddress(addr + 8)
        off = addr - r.base
        r.data[off:off + 8] = (value & MASK64).to_bytes(8, "little")

    def read_bytes(self, addr: int, size: int) -> bytes:
        addr &= ADDR_MASK
        r = self._region(addr)
        if addr + size > r.end:
            raise UnmappedAddress(addr + size)
        return bytes(r.data[addr - r.base:addr - r.base + size])

    def write_bytes(self, addr: int, data: bytes) -> None:
        addr &= ADDR_MASK
        r = self._region(addr)
        if addr + len(data) > r.end:
            raise UnmappedAddress(addr + len(data))
        r.data[addr - r.base:addr - r.base + len(data)] = data

    def copy(self) -> "TaggedMemory":
        other = TaggedMemory()
        for r in self._regions:
            c = _Region(r.base, r.size)
            c.data[:] = r.data
            c.tags[:] = r.tags
            other._regions.append(c)
        return other

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaggedMemory):
            return NotImplemented
        return [(r.base, r.size, r.data, r.tags) for r in self._regions] == [
            (r.base, r.size, r.data, r.tags) for r in other._regions
        ]

    def dump(self) -> str:
        lines = ["# tagmem v1"]
        for r in self._regions:
            lines.append(f"region {r.base:#x} {r.size:#x}")
            for i in range(0, r.size, GRANULE):
                lines.append(f"{r.base + i:#x} {r.tags[i // GRANULE]:x} {r.data[i:i + GRANULE].hex()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> "TaggedMemory":
        mem = cls()
        current: _Region | None = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "region":
                    base, size = int(parts[1], 16), int(parts[2], 16)
                    mem.map(base, size)
                    current = mem._find(base)
                    continue
                addr, tag, data = int(parts[0], 16), int(parts[1], 16), bytes.fromhex(parts[2])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed memory image line") from exc
            if current is None or not current.base <= addr < current.end or len(data) != GRANULE:
                raise ValueError(f"line {lineno}: granule outside its region")
            if addr % GRANULE or tag > 0xF:
                raise ValueError(f"line {lineno}: bad granule address or tag")
            off = addr - current.base
            current.data[off:off + GRANULE] = data
            current.tags[off // GRANULE] = tag
        return mem


class CacheModel:
    """Set-associative LRU cache holding line addresses only."""

    def __init__(self, lines: int = 256, ways: int = 4, hit_latency: int = 4,
                 miss_latency: int = 100, threshold: int = 35, line_size: int = LINE):
        if lines % ways:
            raise ValueError("lines must be a multiple of ways")
        self.ways = ways
        self.num_sets = lines // ways
        self.hit_latency = hit_latency
        self.miss_latency = miss_latency
        self.threshold = threshold
        self.line_size = line_size
        self._shift = line_size.bit_length() - 1
        self._sets: list[list[int]] = [[] for _ in range(self.num_sets)]

    def line_of(self, addr: int) -> int:
        return (addr & ADDR_MASK) >> self._shift

    def is_cached(self, addr: int) -> bool:
        line = (addr & ADDR_MASK) >> self._shift
        return line in self._sets[line % self.num_sets]

    def fill(self, addr: int) -> int | None:
        """Insert or refresh the line; returns the evicted line address, if any."""
        return self.fill_line((addr & ADDR_MASK) >> self._shift)

    def fill_line(self, line: int) -> int | None:
        s = self._sets[line % self.num_sets]
        if line in s:
            s.remove(line)
            s.append(line)
            return None
        s.append(line)
        if len(s) > self.ways:
            return s.pop(0) << self._shift
        return None

    def access(self, addr: int) -> int:
        """Access latency in cycles; fills the line."""
        line = (addr & ADDR_MASK) >> self._shift
        s = self._sets[line % self.num_sets]
        if line in s:
            s.remove(line)
            s.append(line)
            return self.hit_latency
        self.fill_line(line)
        return self.miss_latency

    def flush(self, addr: int) -> None:
        line = (addr & ADDR_MASK) >> self._shift
        s = self._sets[line % self.num_sets]
        if line in s:
            s.remove(line)

    def evict(self, addr: int, p_evict: float, rng: random.Random) -> bool:
        if not 0.0 <= p_evict <= 1.0:
            raise ValueError("p_evict must lie in [0, 1]")
        if rng.random() < p_evict:
            self.flush(addr)
            return True
        return False

    def flush_all(self) -> None:
        for s in self._sets:
            s.clear()

    def cached_lines(self) -> list[int]:
        return sorted(line << self._shift for s in self._sets for line in s)


class TimerKind(enum.Enum):
    PHYSICAL = "physical"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class Timer:
    kind: TimerKind = TimerKind.PHYSICAL
    ratio: int = 100
    threshold_cycles: int = 35
    threshold_ticks: float = 1.0

    def read(self, cycles: float) -> float:
        if self.kind is TimerKind.PHYSICAL:
            return cycles
        return math.floor(cycles / self.ratio)

    def is_hit(self, reading: float) -> bool:
        if self.kind is TimerKind.PHYSICAL:
            return reading <= self.threshold_cycles
        return reading < self.threshold_ticks


def timed_access(cache: CacheModel, mem: TaggedMemory, ptr: TaggedPointer | int, timer: Timer,
                 noise_sigma: float = 0.0, rng: random.Random | None = None) -> float:
    """Attacker probe: timer reading of one access to ``ptr``; fills the line."""
    raw = int(ptr)
    result = mem.check_tag(raw)
    if result is TagCheck.UNMAPPED:
        raise UnmappedAddress(raw & ADDR_MASK)
    if result is TagCheck.MISMATCH:
        raise TagFault(raw & ADDR_MASK, (raw >> TAG_SHIFT) & 0xF, mem.get_tag(raw))
    latency = cache.access(raw)
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        latency = max(1.0, latency + rng.gauss(0.0, noise_sigma))
    return timer.read(latency)
