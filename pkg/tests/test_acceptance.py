"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line that is printed in the terminal summary.  Tolerances are fixed here and
never adjusted to fit results.  Total runtime is several minutes.
"""
import random
import subprocess
import sys

from tagleak.attacksim import KERNEL, SCUDO, SCUDO_ODD_EVEN, OracleConfig, run_attacks
from tagleak.cli import FIXES, HARDWARE_FIXES, MITIGATION_PAIRS, separation
from tagleak.fuzzer import campaign, generate
from tagleak.gadgets import (Ablation, AmbiguousLeak, FillerOp, GadgetLab, GadgetParams,
                             TestKind, ablation, leak_tag, make_setup, measure_point)
from tagleak.isa import assemble, disassemble
from tagleak.speccore import A715LIKE, X3LIKE, Core, MteMode

TRIALS = 1000
SEED = 20240601


def _record(log, n, ok, detail):
    log.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def _rates(kind, params, profile, trials=TRIALS, seed=SEED, **kw):
    return tuple(measure_point(kind, params, profile, s, trials, seed, **kw) / trials
                 for s in ("match", "mismatch"))


def _check_to_test_cycles(kind, params):
    """Cycles from the first speculative tag fault to the TEST issue."""
    setup = make_setup(kind, params)
    trace = GadgetLab(setup, Core(X3LIKE)).run_trial(setup.target_tag ^ 1).trace
    test_pc = setup.program.labels["test"]
    test_issue = min(c for pc, c, _ in trace.issues if pc == test_pc)
    first_fault = min(e[0] for e in trace.events if e[1] == "tag" and e[3].startswith("MISMATCH"))
    return test_issue - first_fault


def test_criterion_1_len_check_curves(acceptance_log):
    panels = [(1, TestKind.INDEP_LD), (2, TestKind.INDEP_LD), (4, TestKind.INDEP_LD),
              (8, TestKind.INDEP_ST)]
    rates = {}
    for length, tk in panels:
        kind = "template" if length == 1 else "v1"
        for gap in range(41):
            p = GadgetParams(len_check=length, len_gap=gap, test_kind=tk)
            rates[length, gap] = _rates(kind, p, X3LIKE) + (_check_to_test_cycles(kind, p),)
    problems = []
    for gap in range(41):
        m, mm, _ = rates[1, gap]
        if abs(m - mm) >= 0.02:
            problems.append(f"(a) Len1 gap{gap} sep {abs(m - mm):.3f}")
    targets = {2: 5 / 6, 4: 2 / 3, 8: 1 / 3}
    for length, want in targets.items():
        for gap in range(10, 41):
            m, mm, _ = rates[length, gap]
            if abs(mm - want) > 0.05:
                problems.append(f"Len{length} gap{gap} mismatch {mm:.3f} vs {want:.3f}")
            if m < 0.98:
                problems.append(f"Len{length} gap{gap} match {m:.3f}")
    for (length, gap), (m, mm, cycles) in rates.items():
        if cycles < 10 and abs(m - mm) >= 0.02:
            problems.append(f"(e) Len{length} gap{gap} ({cycles} cycles) sep {abs(m - mm):.3f}")
    ok = _record(acceptance_log, 1, not problems,
                 f"{len(rates)} points x {TRIALS} trials; Len2 gap10 mismatch "
                 f"{rates[2, 10][1]:.3f}, Len4 {rates[4, 10][1]:.3f}, Len8/ST {rates[8, 10][1]:.3f}"
                 + (f"; problems: {problems[:5]}" if problems else ""))
    assert ok, problems


def test_criterion_2_ablation_truth_table(acceptance_log):
    expected = {"BASELINE": ("cached", "periodic"), "NO_SE": ("cached", "periodic"),
                "NO_SE_NO_DP": ("uncached", "uncached"), "NO_DP": ("cached", "periodic")}
    got = {}
    for mode in MteMode:
        profile = X3LIKE.replace(mte_mode=mode)
        for config in Ablation:
            row = ablation(config, TRIALS, profile, SEED)
            got[mode.value, config.value] = (row["match"]["class"], row["mismatch"]["class"])
    bad = {k: v for k, v in got.items() if v != expected[k[1]]}
    ok = _record(acceptance_log, 2, not bad,
                 "8 rows (4 configs x sync/async) match the truth table" if not bad else f"mismatched rows {bad}")
    assert ok


def test_criterion_3_v2_slide_gap(acceptance_log):
    problems = []
    counts = {}
    for gap in range(5):
        leaking = []
        for slide in range(40):
            p = GadgetParams(len_gap=gap, slide=slide, test_kind=TestKind.DEP_LD)
            m, mm = _rates("v2", p, A715LIKE)
            if m < 0.98:
                problems.append(f"gap{gap} slide{slide} match {m:.3f}")
            leaking.append(m - mm > 0.5)
        windows = {sum(leaking[i:i + 5]) for i in range(36)}
        counts[gap] = sorted(windows)
        if windows != {4 - gap}:
            problems.append(f"gap{gap} leaking per 5 slides {sorted(windows)} (want {4 - gap})")
    ok = _record(acceptance_log, 3, not problems,
                 f"leaking slides per 5 by gap: {counts}" + (f"; problems: {problems[:5]}" if problems else ""))
    assert ok, problems


def test_criterion_4_window(acceptance_log):
    problems = []
    present = {}
    for tk in (TestKind.INDEP_LD, TestKind.INDEP_ST):
        for filler in (FillerOp.ORR_DEP, FillerOp.NOP):
            seps = []
            for window in range(35):
                p = GadgetParams(len_check=2, len_gap=10, window=window, test_kind=tk,
                                 filler_op=filler)
                m, mm = _rates("v1", p, X3LIKE)
                seps.append(abs(m - mm))
            present[tk.value, filler.value] = max((w for w, s in enumerate(seps) if s >= 0.02), default=-1)
            if any(s < 0.1 for s in seps[:25]):
                problems.append(f"{tk.value}/{filler.value} weak leak below window 25")
            if any(s >= 0.02 for s in seps[30:]):
                problems.append(f"{tk.value}/{filler.value} leak at window >= 30")
    for tk in (TestKind.INDEP_LD, TestKind.INDEP_ST):
        if present[tk.value, "ORR_DEP"] != present[tk.value, "NOP"]:
            problems.append(f"{tk.value} cutoff depends on filler")
    ok = _record(acceptance_log, 4, not problems,
                 f"last leaking WINDOW per (TEST, filler): {present}" + (f"; problems: {problems}" if problems else ""))
    assert ok, problems


def test_criterion_5_oracle(acceptance_log):
    noiseless = {}
    for mode in MteMode:
        correct = 0
        for kind, base in (("v1", X3LIKE), ("v2", A715LIKE)):
            for tm in range(16):
                correct += leak_tag(tm, kind, Core(base.replace(mte_mode=mode))) == tm
        noiseless[mode.value] = correct
    rng = random.Random(SEED)
    noisy = 0
    for run in range(100):
        kind, base = (("v1", X3LIKE), ("v2", A715LIKE))[run % 2]
        tm = rng.randrange(16)
        try:
            got = leak_tag(tm, kind, Core(base), p_evict=0.8, noise_sigma=5.0,
                           seed=rng.getrandbits(63))
        except AmbiguousLeak:
            got = None
        noisy += got == tm
    ok = all(v == 32 for v in noiseless.values()) and noisy >= 95
    _record(acceptance_log, 5, ok,
            f"noiseless {noiseless} of 32 per mode; noisy (p_evict=0.8, sigma=5) {noisy}/100")
    assert ok


def test_criterion_6_fuzzer_rediscovery(acceptance_log):
    x3 = campaign(SEED, 50_000, X3LIKE)
    a715 = campaign(SEED, 50_000, A715LIKE)
    disabled = X3LIKE.replace(name="disabled", v1_shrink_enabled=False, stlf_gating_enabled=False)
    off = campaign(SEED, 50_000, disabled, prefilter=False)
    v1 = x3.families()["v1"]
    v2 = a715.families()["v2"]
    ok = v1 >= 1 and v2 >= 1 and not off.candidates
    _record(acceptance_log, 6, ok,
            f"x3like v1 candidates {v1} (of {len(x3.candidates)}), a715like v2 candidates {v2} "
            f"(of {len(a715.candidates)}), disabled {len(off.candidates)}")
    assert ok


def test_criterion_7_attack_statistics(acceptance_log):
    perfect = OracleConfig()
    means = {}
    faults = 0
    for name, attack, policy, k in (("uaf/scudo", "uaf", SCUDO, 16), ("uaf/kernel", "uaf", KERNEL, 15),
                                    ("overflow/scudo", "overflow", SCUDO, 16)):
        s = run_attacks(attack, policy, perfect, 1000, SEED)
        means[name] = (round(s.mean_attempts, 2), k, s.successes)
        faults += s.tag_faults_on_success
    odd = run_attacks("uaf", SCUDO_ODD_EVEN, perfect, 1000, SEED)
    ratio = odd.mean_attempts / means["uaf/scudo"][0]
    impossible = run_attacks("overflow", SCUDO_ODD_EVEN, perfect, 10, SEED).impossible
    ok = (all(abs(m - k) <= 0.1 * k and n == 1000 for m, k, n in means.values())
          and 0.4 <= ratio <= 0.6 and impossible and faults == 0)
    _record(acceptance_log, 7, ok,
            f"mean attempts {means}; odd_even ratio {ratio:.3f}; overflow+odd_even impossible "
            f"{impossible}; tag faults on success {faults}")
    assert ok


def test_criterion_8_mitigations(acceptance_log):
    rows = {}
    for name, (kind, params, mit) in MITIGATION_PAIRS.items():
        prof = A715LIKE if kind == "v2" else X3LIKE
        rows[name] = (separation(kind, params, prof, TRIALS, SEED),
                      separation(kind, params, prof, TRIALS, SEED, mit))
    for name, (kind, params, fix) in HARDWARE_FIXES.items():
        prof = A715LIKE if kind == "v2" else X3LIKE
        rows[name] = (separation(kind, params, prof, TRIALS, SEED),
                      separation(kind, params, prof.replace(**{FIXES[fix]: True}), TRIALS, SEED))
    ok = all(before >= 0.1 and after < 0.02 for before, after in rows.values())
    _record(acceptance_log, 8, ok,
            "separation before->after: " + ", ".join(f"{k} {b:.3f}->{a:.3f}" for k, (b, a) in rows.items()))
    assert ok


def _cli(*argv):
    res = subprocess.run([sys.executable, "-m", "tagleak", *argv], capture_output=True)
    assert res.returncode == 0, res.stderr
    return res.stdout


def test_criterion_9_determinism_and_round_trip(acceptance_log, tmp_path):
    cfg = tmp_path / "fig3.yaml"
    cfg.write_text("grid:\n  len_check: [2, 4]\n  len_gap: [0, 12]\n  test_kind: [INDEP_LD]\n")
    commands = [
        ("sweep", "--experiment", "fig3", "--config", str(cfg), "--trials", "200", "--seed", "7"),
        ("ablation", "--trials", "200", "--seed", "7", "--format", "json"),
        ("fuzz", "--budget", "400", "--seed", "7", "--profile", "a715like", "--format", "json"),
        ("attack", "--runs", "300", "--seed", "7", "--format", "json"),
        ("mitigate", "--trials", "100", "--seed", "7"),
    ]
    identical = all(_cli(*c) == _cli(*c) for c in commands)
    failures = 0
    for i in range(1000):
        prog = generate(SEED, i)[1].program
        failures += assemble(disassemble(prog)) != prog
    ok = identical and failures == 0
    _record(acceptance_log, 9, ok,
            f"{len(commands)} CLI commands byte-identical on rerun: {identical}; "
            f"round-trip failures {failures}/1000")
    assert ok
