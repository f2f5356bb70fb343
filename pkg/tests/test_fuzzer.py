import json
import random

import pytest

from tagleak import isa
from tagleak.fuzzer import (PROBE_BASE, TestCase, campaign, classify, execute_differential,
                            generate, mutate, probe_pointer, random_testcase, run_differential)
from tagleak.speccore import A715LIKE, X3LIKE

DISABLED = X3LIKE.replace(name="disabled", v1_shrink_enabled=False, stlf_gating_enabled=False,
                          prefetcher_enabled=False)


def _case(check, test, **regs):
    rng = random.Random(0)
    base = random_testcase(rng)
    values = list(base.registers)
    for name, v in regs.items():
        values[int(name[1:])] = v
    return TestCase(tuple(check), tuple(test), 1, 2, tuple(values), 7, 0x9)


def _v1_case():
    check = [isa.ldr(3, 2), isa.ldr(4, 2)]
    test = [isa.orr(5, 5, 5)] * 10 + [isa.ldr(6, 5)]
    return _case(check, test, x5=probe_pointer(3))


def test_mutate_insert_into_empty_block():
    tc = _case([], [])
    rng = random.Random(1)
    while True:
        out = mutate(tc, rng)
        if len(out.check) == 1:
            break
        assert len(out.test) == 1
    assert out.test == ()


def test_mutate_delete_on_single_instruction():
    tc = _case([isa.NOP], [])
    rng = random.Random(2)
    for _ in range(200):
        out = mutate(tc, rng)
        if len(out.check) == 0 and out.test == ():
            return
    pytest.fail("delete never emptied the block")


def test_mutations_stay_valid():
    rng = random.Random(3)
    tc = random_testcase(rng)
    for i in range(10_000):
        tc = mutate(tc, rng)
        assert isa.validate(tc.program) == []
        if i % 50 == 49:
            tc = random_testcase(rng)


def test_mutate_changes_one_instruction():
    rng = random.Random(4)
    tc = _v1_case()
    for _ in range(300):
        out = mutate(tc, rng)
        before = len(tc.check) + len(tc.test)
        after = len(out.check) + len(out.test)
        assert abs(after - before) <= 1


def test_hand_built_v1_leaks_at_test_line():
    tc = _v1_case()
    sig = execute_differential(tc, X3LIKE)
    assert sig is not None
    assert (probe_pointer(3) & 0xFFFFFFFFFFFFFF) // 64 * 64 in sig
    info = classify(tc, X3LIKE)
    assert info["v1"] and info["guess_mismatches"] >= 2


def test_single_load_is_silent():
    tc = _case([isa.ldr(3, 2)], [isa.orr(5, 5, 5)] * 10 + [isa.ldr(6, 5)], x5=probe_pointer(3))
    assert execute_differential(tc, X3LIKE) is None
    assert execute_differential(tc, X3LIKE, prefilter=False) is None


def test_pure_alu_is_silent():
    tc = _case([isa.orr(3, 4, 4), isa.NOP], [isa.eor(5, 6, 7), isa.NOP])
    assert execute_differential(tc, X3LIKE, prefilter=False) is None


def test_disabled_mechanisms_hand_case_silent():
    assert execute_differential(_v1_case(), DISABLED, prefilter=False) is None


def test_testcase_dict_round_trip():
    _, tc = generate(5, 17)
    back = TestCase.from_dict(json.loads(json.dumps(tc.to_dict())))
    assert back == tc


def test_generate_is_deterministic():
    assert generate(9, 3) == generate(9, 3)
    assert generate(9, 3) != generate(9, 4)


def test_campaign_candidates_are_sound():
    report = campaign(1, 1500, A715LIKE)
    assert report.candidates
    for c in report.candidates:
        again = run_differential(c.testcase, A715LIKE, prefilter=False)
        assert again is not None and again.signature == c.signature
        assert all(PROBE_BASE <= a < PROBE_BASE + 0x1000 for a in c.signature)
    assert report.families()["v2"] >= 1


def test_campaign_report_is_reproducible():
    a = campaign(2, 300, X3LIKE).to_json()
    b = campaign(2, 300, X3LIKE).to_json()
    assert a == b


def test_campaign_budget_validation():
    with pytest.raises(ValueError):
        campaign(0, 0, X3LIKE)
