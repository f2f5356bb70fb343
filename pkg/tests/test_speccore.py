import pytest

from tagleak import isa
from tagleak.gadgets import GadgetLab, GadgetParams, TestKind, make_setup
from tagleak.isa import assemble
from tagleak.speccore import (A715LIKE, X3LIKE, Core, CoreProfile, MteMode, RunEnvironment,
                              SimLimitExceeded, get_profile)
from tagleak.tagmem import CacheModel, TaggedMemory, TaggedPointer


def _env(tag=3):
    m = TaggedMemory()
    m.map(0x1000, 0x1000, tag=tag)
    return RunEnvironment(m, CacheModel())


BRANCHY = assemble("ldr x1, [x1]\nbeqz x1, out\nnop\nout: halt")


@pytest.mark.parametrize("value, taken", [(0, True), (1, False)])
def test_predictor_learns_direction(value, taken):
    env = _env()
    env.memory.write64(0x1000, value)
    env.registers = {1: int(TaggedPointer.make(0x1000, 3))}
    core = Core(X3LIKE)
    bp = core.train(BRANCHY, env, 3)
    assert bp.predict(BRANCHY.site, 1) is taken


def _v1_lab(profile=X3LIKE, **kw):
    setup = make_setup("v1", GadgetParams(len_check=2, len_gap=10, **kw))
    return GadgetLab(setup, Core(profile))


def test_trained_v1_speculates_check():
    lab = _v1_lab()
    res = lab.run_trial(lab.setup.target_tag ^ 1)
    prog = lab.setup.program
    check = prog.labels["check"]
    spec_pcs = {pc for pc, _, spec in res.trace.issues if spec}
    assert {check, check + 1} <= spec_pcs
    assert not res.trace.faulted
    assert res.trace.events_of("squash")


def test_committed_load_match_and_sync_fault():
    env = _env()
    prog = assemble("ldr x2, [x1]\nhalt")
    env.registers = {1: int(TaggedPointer.make(0x1100, 3))}
    tr = Core(X3LIKE).run(prog, env)
    assert not tr.faulted and env.cache.is_cached(0x1100)
    env.registers = {1: int(TaggedPointer.make(0x1100, 4))}
    tr = Core(X3LIKE).run(prog, env)
    assert tr.faults and tr.faults[0][0] == 0


def test_async_mismatch_is_deferred():
    env = _env()
    prog = assemble("ldr x2, [x1]\nhalt")
    env.registers = {1: int(TaggedPointer.make(0x1100, 4))}
    tr = Core(X3LIKE.replace(mte_mode=MteMode.ASYNC)).run(prog, env)
    assert not tr.faults and tr.deferred_faults


def test_unmapped_faults_in_both_modes():
    prog = assemble("ldr x2, [x1]\nhalt")
    for mode in MteMode:
        env = _env()
        env.registers = {1: 0x9000}
        tr = Core(X3LIKE.replace(mte_mode=mode)).run(prog, env)
        assert tr.faults and tr.faults[0][2] == "UNMAPPED"


def test_five_of_six_mismatch_trials_hit():
    lab = _v1_lab()
    wrong = lab.setup.target_tag ^ 1
    lab.run_trial(lab.setup.target_tag)
    outcomes = [lab.run_trial(wrong).hit for _ in range(36)]
    for k in range(0, 36, 6):
        assert outcomes[k:k + 6].count(False) == 1


def test_reset_restores_budget_and_clears_suppression():
    lab = _v1_lab()
    wrong = lab.setup.target_tag ^ 1
    for _ in range(12):
        lab.run_trial(wrong)
        assert 0 <= lab.core.confidence <= X3LIKE.confidence_budget
    lab.core.reset_speculation()
    assert lab.core.confidence == X3LIKE.confidence_budget
    res = lab.run_trial(wrong)
    assert not res.trace.suppressed


def test_reset_between_trials_removes_periodicity():
    plain, reset = _v1_lab(), _v1_lab()
    wrong = plain.setup.target_tag ^ 1
    a, b = [], []
    for _ in range(12):
        a.append(plain.run_trial(wrong).hit)
        reset.core.reset_speculation()
        b.append(reset.run_trial(wrong).hit)
    assert a != b
    assert a.count(False) == 2 and all(b)


def test_determinism():
    runs = []
    for _ in range(2):
        lab = _v1_lab()
        runs.append([lab.run_trial(lab.setup.target_tag ^ 1).trace.dump() for _ in range(8)])
    assert runs[0] == runs[1]


def test_speculation_is_architecturally_transparent():
    # Final registers and memory do not depend on what the wrong path touched.
    lab_a, lab_b = _v1_lab(), _v1_lab()
    ra = lab_a.run_trial(lab_a.setup.target_tag)
    rb = lab_b.run_trial(lab_b.setup.target_tag ^ 1)
    assert ra.trace.registers[3:] == rb.trace.registers[3:]
    assert lab_a.setup.memory == lab_b.setup.memory


def test_wrong_path_unmapped_matches_mismatch():
    # An unmapped guess pointer behaves like a tag mismatch for the leak.
    setup = make_setup("v1", GadgetParams(len_check=2, len_gap=10))
    lab = GadgetLab(setup, Core(X3LIKE))
    setup.bindings = type(setup.bindings)(setup.bindings.cond_ptr,
                                          TaggedPointer.make(0x7F0000, 0),
                                          setup.bindings.test_ptr)
    rates = [lab.run_trial(0).hit for _ in range(60)]
    assert rates.count(False) == 10


def test_stlf_group_law():
    # Different dispatch groups always forward, so the TEST line is cached.
    for slide in range(A715LIKE.dispatch_width):
        setup = make_setup("v2", GadgetParams(len_gap=4, slide=slide, test_kind=TestKind.DEP_LD))
        lab = GadgetLab(setup, Core(A715LIKE))
        assert all(lab.run_trial(setup.target_tag ^ 1).hit for _ in range(5))


def test_profile_dict_round_trip_and_lookup():
    d = X3LIKE.to_dict()
    assert CoreProfile.from_dict({**d, "mte_mode": MteMode(d["mte_mode"])}) == X3LIKE
    with pytest.raises(ValueError):
        CoreProfile.from_dict({"name": "x", "bogus": 1})
    assert get_profile("A715LIKE") is A715LIKE
    with pytest.raises(ValueError):
        get_profile("m1")


def test_step_limit():
    env = _env()
    prog = isa.Program((isa.jmp("top"),), {"top": 0})
    with pytest.raises(SimLimitExceeded):
        Core(X3LIKE.replace(max_steps=50)).run(prog, env)

