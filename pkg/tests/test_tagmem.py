import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagleak.tagmem import (CacheModel, TagCheck, TaggedMemory, TaggedPointer, TagFault, Timer,
                            TimerKind, UnmappedAddress, timed_access)


@pytest.fixture
def mem():
    m = TaggedMemory()
    m.map(0x1000, 0x1000)
    return m


def test_same_granule(mem):
    mem.set_tag(0x1000, 0x7)
    assert mem.get_tag(0x1008) == 0x7


def test_granule_boundary(mem):
    before = mem.get_tag(0x1010)
    mem.set_tag(0x1000, 0x7)
    assert mem.get_tag(0x1010) == before


def test_tag_read_back_sweep(mem):
    # Write a distinct tag pattern per pass and read every granule back.
    for shift in range(16):
        expect = {}
        for i, g in enumerate(range(0x1000, 0x2000, 16)):
            t = (i + shift) % 16
            mem.set_tag(g, t)
            expect[g] = t
        assert all(mem.get_tag(g + off) == t for g, t in expect.items() for off in (0, 15))


def test_check_tag(mem):
    mem.set_tag(0x1200, 0x9)
    assert mem.check_tag(TaggedPointer.make(0x1200, 0x9)) is TagCheck.MATCH
    assert mem.check_tag(TaggedPointer.make(0x1200, 0x9 ^ 1)) is TagCheck.MISMATCH
    assert mem.check_tag(TaggedPointer.make(0x9000, 0x9)) is TagCheck.UNMAPPED


@given(st.integers(0x1000, 0x1FFF), st.integers(0, 15))
def test_tag_round_trip(addr, tag):
    m = TaggedMemory()
    m.map(0x1000, 0x1000)
    m.set_tag(addr, tag)
    assert m.check_tag(TaggedPointer.make(addr, tag)) is TagCheck.MATCH


def test_map_rejects_overlap_and_misalignment(mem):
    with pytest.raises(ValueError):
        mem.map(0x1800, 0x100)
    with pytest.raises(ValueError):
        mem.map(0x3008, 0x10)


def test_data_and_dump_round_trip(mem):
    mem.write64(0x1010, 0xDEADBEEF)
    mem.set_tags(0x1040, 0x40, 0xA)
    back = TaggedMemory.load(mem.dump())
    assert back == mem
    assert back.read64(0x1010) == 0xDEADBEEF
    with pytest.raises(UnmappedAddress):
        mem.read64(0x1FFC)


def test_flush_then_uncached():
    c = CacheModel()
    c.fill(0x4000)
    assert c.is_cached(0x4000)
    c.flush(0x4000)
    assert not c.is_cached(0x4000)


def test_eviction_rate_monte_carlo():
    c = CacheModel()
    rng = random.Random(5)
    evicted = 0
    for _ in range(10_000):
        c.fill(0x4000)
        evicted += c.evict(0x4000, 0.8, rng)
    assert abs(evicted / 10_000 - 0.8) <= 0.02


def test_lru_set_conflict():
    c = CacheModel(lines=8, ways=2)
    stride = c.line_size * (8 // 2)
    for i in range(3):
        c.fill(i * stride)
    assert not c.is_cached(0)
    assert c.is_cached(stride) and c.is_cached(2 * stride)


def _probe(cached, timer):
    m = TaggedMemory()
    m.map(0x1000, 0x1000, tag=3)
    c = CacheModel()
    if cached:
        c.fill(0x1000)
    return timed_access(c, m, TaggedPointer.make(0x1000, 3), timer)


def test_physical_timer():
    t = Timer()
    assert _probe(True, t) <= 35 and t.is_hit(_probe(True, t))
    assert _probe(False, t) > 35 and not t.is_hit(_probe(False, t))


def test_virtual_timer():
    t = Timer(TimerKind.VIRTUAL)
    assert _probe(True, t) == 0 and t.is_hit(0)
    assert _probe(False, t) >= 1 and not t.is_hit(_probe(False, t))


def test_timer_classifications_agree():
    phys, virt = Timer(), Timer(TimerKind.VIRTUAL)
    for cycles in (1, 4, 35, 99, 100, 250):
        if cycles <= 35 or cycles >= 100:
            assert phys.is_hit(phys.read(cycles)) == virt.is_hit(virt.read(cycles))


def test_timed_access_faults():
    m = TaggedMemory()
    m.map(0x1000, 0x100, tag=3)
    c = CacheModel()
    with pytest.raises(TagFault):
        timed_access(c, m, TaggedPointer.make(0x1000, 4), Timer())
    with pytest.raises(UnmappedAddress):
        timed_access(c, m, TaggedPointer.make(0x8000, 3), Timer())


def test_noise_is_seeded():
    m = TaggedMemory()
    m.map(0x1000, 0x100)
    a = [timed_access(CacheModel(), m, 0x1000, Timer(), 5.0, random.Random(1)) for _ in range(3)]
    b = [timed_access(CacheModel(), m, 0x1000, Timer(), 5.0, random.Random(1)) for _ in range(3)]
    assert a == b and all(x >= 1 for x in a)
