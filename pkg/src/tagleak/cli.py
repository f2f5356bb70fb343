"""Command line experiment runner.

Subcommands: sweep, ablation, fuzz, attack, mitigate, list-experiments.
Settings come from an optional YAML file (``--config``) overridden by flags.
Exit codes: 0 ok, 2 configuration error, 3 simulation error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .attacksim import OracleConfig, TagPolicy, leak_only, run_attacks
from .fuzzer import campaign
from .gadgets import (Ablation, FillerOp, GadgetParams, HitRateCurve, InvalidParams,
                      Mitigation, TestKind, ablation, derive_seed, measure_point, sweep)
from .speccore import CoreProfile, MteMode, get_profile
from .tagmem import SimulationError, Timer, TimerKind

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Experiment:
    id: str
    source: str
    command: str
    description: str
    default_profile: str


EXPERIMENTS = {e.id: e for e in (
    Experiment("fig3", "Fig. 3", "sweep",
               "v1 gadget: hit rate vs GAP for Len(CHECK) 1/2/4/8, load and store TEST", "x3like"),
    Experiment("fig4", "Fig. 4", "ablation",
               "v1 gadget: ablation of speculative execution vs data prefetch", "x3like"),
    Experiment("fig5", "Fig. 5", "sweep",
               "v1 gadget: linked-list variants, TEST in branch vs at merge", "x3like"),
    Experiment("fig6", "Fig. 6", "sweep", "v2 gadget: hit rate over SLIDE x GAP", "a715like"),
    Experiment("fig8", "Fig. 8", "sweep",
               "v1 gadget: hit rate vs WINDOW, load/store TEST, ORR vs NOP filler", "x3like"),
    Experiment("table1", "Table 1", "attack",
               "allocator tag policies driving MTE-bypass retry statistics", "x3like"),
)}

CONFIG_KEYS = {
    "experiment", "profile", "trials", "seed", "mte_mode", "timer", "p_evict", "noise_sigma",
    "out", "format", "disable", "fix", "grid", "workers", "budget", "reps", "attack", "policy",
    "odd_even", "runs", "accuracy", "oracle_mode", "gadget", "confirm", "trials_per_guess",
    "max_retries", "pair",
}
DISABLE = {"v1_shrink": "v1_shrink_enabled", "stlf_gating": "stlf_gating_enabled",
           "prefetcher": "prefetcher_enabled"}
FIXES = {"ignore_tcf": "ignore_tcf_for_speculation", "always_forward_stlf": "always_forward_stlf"}

MITIGATION_PAIRS = {
    "v1_st_sb_test": ("v1", GadgetParams(len_check=2, len_gap=10, test_kind=TestKind.INDEP_ST),
                      Mitigation.SB_BEFORE_TEST()),
    "v1_ld_sb_check": ("v1", GadgetParams(len_check=2, len_gap=10, test_kind=TestKind.INDEP_LD),
                       Mitigation.SB_BEFORE_CHECK()),
    "v1_pad_window": ("v1", GadgetParams(len_check=2, len_gap=10, test_kind=TestKind.INDEP_LD),
                      Mitigation.PAD_WINDOW(30)),
    "v2_pad_stlf_gap": ("v2", GadgetParams(len_gap=0, test_kind=TestKind.DEP_LD),
                        Mitigation.PAD_STLF_GAP(4)),
    "v2_sb_check": ("v2", GadgetParams(len_gap=0, test_kind=TestKind.DEP_LD),
                    Mitigation.SB_BEFORE_CHECK()),
}
HARDWARE_FIXES = {
    "v1_ignore_tcf": ("v1", GadgetParams(len_check=2, len_gap=10), "ignore_tcf"),
    "v2_always_forward": ("v2", GadgetParams(len_gap=0, test_kind=TestKind.DEP_LD), "always_forward_stlf"),
}


def _grid(axes: dict[str, list]) -> list[dict]:
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def experiment_grid(exp_id: str) -> tuple[str, GadgetParams, dict[str, list]]:
    if exp_id == "fig3":
        return "v1", GadgetParams(), {"test_kind": [TestKind.INDEP_LD, TestKind.INDEP_ST],
                                      "len_check": [1, 2, 4, 8], "len_gap": list(range(41))}
    if exp_id == "fig5":
        return "variants", GadgetParams(), {"variant": ["v1_list_in_branch", "v1_list_merged"],
                                            "len_gap": [0, 5, 10, 20]}
    if exp_id == "fig6":
        return "v2", GadgetParams(len_gap=0, test_kind=TestKind.DEP_LD), {
            "len_gap": list(range(5)), "slide": list(range(40))}
    if exp_id == "fig8":
        return "v1", GadgetParams(len_check=2, len_gap=10), {
            "test_kind": [TestKind.INDEP_LD, TestKind.INDEP_ST],
            "filler_op": [FillerOp.ORR_DEP, FillerOp.NOP], "window": list(range(31))}
    raise ConfigError(f"experiment {exp_id!r} is not a sweep; see list-experiments")


def _coerce_axes(axes: dict) -> dict[str, list]:
    out = {}
    for k, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
        if k == "test_kind":
            values = [TestKind(v) if isinstance(v, str) else v for v in values]
        elif k in ("filler_op", "gap_op"):
            values = [FillerOp(v) if isinstance(v, str) else v for v in values]
        out[k] = values
    return out


def run_sweep(settings: dict, profile: CoreProfile) -> HitRateCurve:
    exp_id = settings["experiment"]
    kind, base, axes = experiment_grid(exp_id)
    if settings.get("grid"):
        axes = {**axes, **_coerce_axes(settings["grid"])}
    lab = _lab_kwargs(settings)
    trials = settings["trials"]
    seed = settings["seed"]
    curve = HitRateCurve(exp_id)
    for overrides in _grid(axes):
        overrides = dict(overrides)
        point_kind = kind
        if kind == "variants":
            point_kind = overrides.pop("variant")
        elif kind == "v1" and overrides.get("len_check", base.len_check) < 2:
            point_kind = "template"
        sub = sweep(point_kind, base, [overrides], trials, profile, seed,
                    name=f"{exp_id}:{point_kind}", workers=settings.get("workers", 1), **lab)
        for p in sub.points:
            label = f"kind={point_kind};{p.axis}" if kind == "variants" else p.axis
            curve.points.append(type(p)(label, p.series, p.hits, p.trials, p.seed))
    return curve


def _lab_kwargs(settings: dict) -> dict:
    return {"timer": Timer(TimerKind(settings["timer"])), "p_evict": settings["p_evict"],
            "noise_sigma": settings["noise_sigma"]}


def run_ablation(settings: dict, profile: CoreProfile) -> list[dict]:
    lab = _lab_kwargs(settings)
    return [ablation(c, settings["trials"], profile, settings["seed"], **lab) for c in Ablation]


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("# tagleak-ablation v1: config,series,rate,class,trials,seed\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "series", "rate", "class", "trials", "seed"])
    for r in rows:
        for s in ("match", "mismatch"):
            w.writerow([r["config"], s, f"{r[s]['rate']:.6f}", r[s]["class"], r[s]["trials"], r[s]["seed"]])
    return buf.getvalue()


def separation(kind: str, params: GadgetParams, profile: CoreProfile, trials: int, seed: int,
               mitigation: Mitigation | None = None, **lab) -> float:
    """Largest match/mismatch hit-rate gap; v2 is scanned over one SLIDE period."""
    slides = range(profile.dispatch_width) if kind == "v2" else [params.slide]
    worst = 0.0
    for s in slides:
        p = GadgetParams(**{**params.__dict__, "slide": s})
        rates = []
        for series in ("match", "mismatch"):
            point_seed = derive_seed(seed, "mitigate", kind, s, series, str(mitigation))
            rates.append(measure_point(kind, p, profile, series, trials, point_seed,
                                       mitigation=mitigation, **lab) / trials)
        worst = max(worst, abs(rates[0] - rates[1]))
    return worst


def run_mitigate(settings: dict, profile_override: CoreProfile | None) -> list[dict]:
    lab = _lab_kwargs(settings)
    trials, seed = settings["trials"], settings["seed"]
    rows = []
    pairs = MITIGATION_PAIRS
    if settings.get("pair"):
        if settings["pair"] not in MITIGATION_PAIRS and settings["pair"] not in HARDWARE_FIXES:
            raise ConfigError(f"unknown pair {settings['pair']!r}")
        pairs = {k: v for k, v in MITIGATION_PAIRS.items() if k == settings["pair"]}
    for name, (kind, params, mit) in pairs.items():
        prof = profile_override or _default_profile(kind, settings)
        rows.append({"pair": name, "gadget": kind, "mitigation": str(mit),
                     "before": separation(kind, params, prof, trials, seed, None, **lab),
                     "after": separation(kind, params, prof, trials, seed, mit, **lab)})
    fixes = HARDWARE_FIXES
    if settings.get("pair"):
        fixes = {k: v for k, v in HARDWARE_FIXES.items() if k == settings["pair"]}
    for name, (kind, params, fix) in fixes.items():
        prof = profile_override or _default_profile(kind, settings)
        fixed = prof.replace(**{FIXES[fix]: True})
        rows.append({"pair": name, "gadget": kind, "mitigation": fix,
                     "before": separation(kind, params, prof, trials, seed, None, **lab),
                     "after": separation(kind, params, fixed, trials, seed, None, **lab)})
    return rows


def _default_profile(kind: str, settings: dict) -> CoreProfile:
    return _apply_profile_flags(get_profile("a715like" if kind == "v2" else "x3like"), settings)


def _apply_profile_flags(profile: CoreProfile, settings: dict) -> CoreProfile:
    changes = {"mte_mode": MteMode(settings["mte_mode"])} if settings.get("mte_mode") else {}
    for d in settings.get("disable") or []:
        if d not in DISABLE:
            raise ConfigError(f"unknown mechanism {d!r}; choose from {sorted(DISABLE)}")
        changes[DISABLE[d]] = False
    for f in settings.get("fix") or []:
        if f not in FIXES:
            raise ConfigError(f"unknown fix {f!r}; choose from {sorted(FIXES)}")
        changes[FIXES[f]] = True
    return profile.replace(**changes) if changes else profile


def resolve_profile(settings: dict, fallback: str) -> CoreProfile:
    spec = settings.get("profile") or fallback
    if isinstance(spec, str):
        try:
            base = get_profile(spec)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    elif isinstance(spec, dict):
        spec = dict(spec)
        base_name = spec.pop("base", fallback)
        try:
            base = get_profile(base_name).replace(**spec) if spec else get_profile(base_name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad inline profile: {exc}") from None
    else:
        raise ConfigError("profile must be a name or a mapping")
    return _apply_profile_flags(base, settings)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("disable", "fix"):
        if key in data and isinstance(data[key], str):
            data[key] = [data[key]]
    return data


DEFAULTS = {"trials": 1000, "timer": "physical", "p_evict": 1.0, "noise_sigma": 0.0,
            "format": "csv", "workers": 1, "budget": 50_000, "reps": 12, "attack": "uaf",
            "policy": "scudo", "odd_even": False, "runs": 1000, "accuracy": 1.0,
            "oracle_mode": "model", "gadget": "v2", "confirm": True, "trials_per_guess": 256,
            "max_retries": 1000}


def merge_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    settings.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        if key in ("disable", "fix") and not value:
            continue
        settings[key] = value
    if settings.get("seed") is None:
        raise ConfigError("a seed is required (--seed or 'seed:' in the config)")
    try:
        settings["seed"] = int(settings["seed"])
        settings["trials"] = int(settings["trials"])
        settings["p_evict"] = float(settings["p_evict"])
        settings["noise_sigma"] = float(settings["noise_sigma"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric setting: {exc}") from None
    if settings["trials"] < 1:
        raise ConfigError("trials must be >= 1")
    if not 0.0 <= settings["p_evict"] <= 1.0:
        raise ConfigError("p_evict must lie in [0, 1]")
    if settings["noise_sigma"] < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if settings["timer"] not in ("physical", "virtual"):
        raise ConfigError("timer must be physical or virtual")
    if settings.get("mte_mode") not in (None, "sync", "async"):
        raise ConfigError("mte_mode must be sync or async")
    if settings["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    return settings


def emit(settings: dict, csv_text: str | None, json_text: str) -> None:
    primary = csv_text if settings["format"] == "csv" and csv_text is not None else json_text
    out = settings.get("out")
    if out is None:
        sys.stdout.write(primary)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(primary)
    if primary is csv_text:
        path.with_suffix(".json").write_text(json_text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_sweep(settings: dict) -> int:
    exp_id = settings.get("experiment")
    if exp_id not in EXPERIMENTS or EXPERIMENTS[exp_id].command != "sweep":
        raise ConfigError(f"sweep needs --experiment in {[e for e, x in EXPERIMENTS.items() if x.command == 'sweep']}")
    profile = resolve_profile(settings, EXPERIMENTS[exp_id].default_profile)
    curve = run_sweep(settings, profile)
    emit(settings, curve.to_csv(), curve.to_json())
    return EXIT_OK


def cmd_ablation(settings: dict) -> int:
    profile = resolve_profile(settings, "x3like")
    rows = run_ablation(settings, profile)
    emit(settings, ablation_csv(rows), _dumps({"experiment": "fig4", "profile": profile.name,
                                                "mte_mode": profile.mte_mode.value, "rows": rows}))
    return EXIT_OK


def cmd_fuzz(settings: dict) -> int:
    profile = resolve_profile(settings, "x3like")
    report = campaign(settings["seed"], int(settings["budget"]), profile, reps=int(settings["reps"]))
    buf = io.StringIO()
    buf.write("# tagleak-fuzz v1: iteration,seed,v1,v2,signature\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "seed", "v1", "v2", "signature"])
    for c in report.candidates:
        w.writerow([c.iteration, c.seed, int(c.family["v1"]), int(c.family["v2"]),
                    " ".join(f"{a:#x}" for a in sorted(c.signature))])
    emit(settings, buf.getvalue(), report.to_json())
    return EXIT_OK


def cmd_attack(settings: dict) -> int:
    try:
        policy = TagPolicy(settings["policy"], bool(settings["odd_even"]))
        oracle = OracleConfig(gadget=settings["gadget"], trials_per_guess=int(settings["trials_per_guess"]),
                              accuracy=float(settings["accuracy"]), mode=settings["oracle_mode"],
                              confirm=bool(settings["confirm"]), p_evict=settings["p_evict"],
                              noise_sigma=settings["noise_sigma"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    runs = int(settings["runs"])
    if settings["attack"] == "leak":
        stats = leak_only(policy, oracle, runs, settings["seed"])
        text = _dumps({"attack": "leak", **stats.to_dict()})
        head = "# tagleak-leak v1\npolicy,runs,correct\n"
        emit(settings, f"{head}{policy},{runs},{stats.leaks_ok}\n", text)
        return EXIT_OK
    if settings["attack"] not in ("uaf", "overflow"):
        raise ConfigError("attack must be uaf, overflow or leak")
    summary = run_attacks(settings["attack"], policy, oracle, runs, settings["seed"],
                          int(settings["max_retries"]))
    emit(settings, summary.to_csv(), summary.to_json())
    return EXIT_OK


def cmd_mitigate(settings: dict) -> int:
    override = resolve_profile(settings, "x3like") if settings.get("profile") else None
    rows = run_mitigate(settings, override)
    buf = io.StringIO()
    buf.write("# tagleak-mitigate v1: pair,gadget,mitigation,before,after\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "gadget", "mitigation", "before", "after"])
    for r in rows:
        w.writerow([r["pair"], r["gadget"], r["mitigation"], f"{r['before']:.6f}", f"{r['after']:.6f}"])
    emit(settings, buf.getvalue(), _dumps({"rows": rows}))
    return EXIT_OK


def cmd_list(settings: dict | None = None) -> int:
    for e in EXPERIMENTS.values():
        print(f"{e.id:8s} {e.source:8s} {e.command:9s} {e.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with settings; flags override it")
    common.add_argument("--profile", help="core profile: x3like or a715like")
    common.add_argument("--trials", type=int, help="trials per point (default 1000)")
    common.add_argument("--seed", type=int, help="master seed (required)")
    common.add_argument("--mte-mode", dest="mte_mode", choices=["sync", "async"])
    common.add_argument("--timer", choices=["physical", "virtual"])
    common.add_argument("--p-evict", dest="p_evict", type=float)
    common.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    common.add_argument("--out", help="output file; CSV output also writes a .json summary")
    common.add_argument("--format", choices=["csv", "json"])
    common.add_argument("--disable", action="append", choices=sorted(DISABLE), default=[],
                        help="turn a leak mechanism off (repeatable)")
    common.add_argument("--fix", action="append", choices=sorted(FIXES), default=[],
                        help="enable a hardware fix (repeatable)")

    parser = argparse.ArgumentParser(prog="tagleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", parents=[common], help="hit-rate sweeps (fig3, fig5, fig6, fig8)")
    p.add_argument("--experiment", choices=[e for e, x in EXPERIMENTS.items() if x.command == "sweep"])
    p.add_argument("--workers", type=int, help="worker processes for grid points")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", parents=[common], help="speculation/prefetch ablation table (fig4)")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("fuzz", parents=[common], help="differential fuzzing campaign")
    p.add_argument("--budget", type=int, help="iterations (default 50000)")
    p.add_argument("--reps", type=int, help="trials per differential execution (default 12)")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("attack", parents=[common], help="allocator bypass attack loops (table1)")
    p.add_argument("--attack", choices=["uaf", "overflow", "leak"])
    p.add_argument("--policy", choices=["scudo", "partition_alloc", "kernel"])
    p.add_argument("--odd-even", dest="odd_even", action="store_true", default=None)
    p.add_argument("--runs", type=int)
    p.add_argument("--accuracy", type=float, help="model-oracle per-leak accuracy")
    p.add_argument("--oracle-mode", dest="oracle_mode", choices=["model", "gadget"])
    p.add_argument("--gadget", choices=["v1", "v2"])
    p.add_argument("--trials-per-guess", dest="trials_per_guess", type=int)
    p.add_argument("--no-confirm", dest="confirm", action="store_false", default=None)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("mitigate", parents=[common], help="separation before/after each mitigation")
    p.add_argument("--pair", choices=sorted([*MITIGATION_PAIRS, *HARDWARE_FIXES]))
    p.set_defaults(func=cmd_mitigate)

    p = sub.add_parser("list-experiments", help="experiment ids and the figure/table each reproduces")
    p.set_defaults(func=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-experiments":
        return cmd_list()
    try:
        settings = merge_settings(args)
        return args.func(settings)
    except (ConfigError, InvalidParams) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
