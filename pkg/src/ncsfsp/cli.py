"""Command-line front end.

Exit codes: 0 success, 2 timing validation failure, 3 malformed config,
4 filter/predictor design failure, 5 stability not certified.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import _accel, plots
from .compensator import MODES, DesignError
from .config import ConfigError, RunConfig, load_config
from .design import (
    Design, design, load_design, simulate, stability, sub_seed, validate, write_json,
)
from .sim import write_trajectories

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_DESIGN, EXIT_UNCERTIFIED = 0, 2, 3, 4, 5

log = logging.getLogger("ncsfsp")

# Targets of the two-vehicle CACC case study: (label, key, target, low, high).
# Bands are absolute; a missing high means "greater than low".
CASE_STUDY_TARGETS = [
    ("MSS spectral radius", "radius", 0.856, 0.80, 0.92),
    ("mean ratio, no compensation", "none.mean", 9.27, 9.27 * 0.75, 9.27 * 1.25),
    ("mean ratio, FSP", "fsp.mean", 1.23, 1.23 * 0.85, 1.23 * 1.15),
    ("mean ratio, 3SFSP", "3sfsp.mean", 1.37, 1.37 * 0.85, 1.37 * 1.15),
    ("worst ratio, no compensation", "none.max", 407.0, 100.0, None),
    ("worst ratio, FSP", "fsp.max", 4.10, 4.10 * 0.65, 4.10 * 1.35),
    ("worst ratio, 3SFSP", "3sfsp.max", 2.26, 2.26 * 0.65, 2.26 * 1.35),
    ("worst-case reduction 3SFSP vs FSP", "reduction", 0.45, 0.30, 0.60),
]


def shipped_config(name: str = "cacc.json") -> Path:
    return Path(str(resources.files("ncsfsp") / "configs" / name))


def _seed(args, cfg: RunConfig) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NCS_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"NCS_SEED must be an integer, got {env!r}") from None
    return None


def _load(args) -> RunConfig:
    path = args.config or shipped_config()
    cfg = load_config(path)
    mode = getattr(args, "mode", None)
    replicas = getattr(args, "replicas", None)
    seed = _seed(args, cfg)
    if seed is not None or replicas is not None or mode is not None:
        cfg = cfg.with_overrides(seed=seed, replicas=replicas, mode=mode)
    return cfg


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _banner(cfg_or_design) -> None:
    for line in cfg_or_design.assumptions:
        print(f"# assumption: {line}")


def _check_timing(cfg: RunConfig) -> int:
    rep = validate(cfg)
    if not rep.ok:
        for p in rep.problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _design_for(args, cfg: RunConfig, modes) -> Design:
    if getattr(args, "design", None):
        d = load_design(args.design)
        missing = [m for m in modes if m not in d.laws]
        if missing:
            raise DesignError(f"design report {args.design} has no law for {missing}")
        return d
    return design(cfg, modes)


# ----------------------------------------------------------------- commands

def cmd_validate(args) -> int:
    cfg = _load(args)
    rep = validate(cfg)
    if rep.ok:
        print(f"ok: {cfg.source}: schema valid, {rep.probe_steps}-step probe trace passes "
              f"all timing specifications, integer-delay bound {rep.max_delay}")
        return EXIT_OK
    for p in rep.problems:
        print(f"invalid: {p}")
    return EXIT_INVALID


def cmd_design(args) -> int:
    cfg = _load(args)
    if (rc := _check_timing(cfg)) != EXIT_OK:
        return rc
    out = _outdir(args, cfg)
    d = design(cfg, MODES)
    write_json(out / "design_report.json", d.report())
    _banner(cfg)
    print(f"delay-free loop spectral radius  {d.diagnostics['controller']['delay_free_spectral_radius']:.4f}")
    print(f"integer-delay bound              {d.max_delay}")
    for mode, c in d.compensators.items():
        rows = c.filter.diagnostics.get("rows", [])
        conds = ", ".join(f"{r['condition']:.3g}" for r in rows)
        print(f"{mode:6s} alpha {c.filter.alpha:.3g}  predictor order {c.predictor.order} "
              f"(from {c.full_order}), spectral radius {c.spectral_radius:.4f}, "
              f"max residue {c.filter.diagnostics.get('max_residue', 0):.2e}, conditioning [{conds}]")
    print(f"wrote {out / 'design_report.json'}")
    return EXIT_OK


def _run_stability(args, cfg: RunConfig, out: Path, d: Design | None = None):
    mode = args.mode or cfg.compensator.mode
    d = d or _design_for(args, cfg, [mode])
    samples = args.samples or cfg.stability_samples
    v = stability(d, mode, samples, sub_seed(cfg.seed, "stability"), cfg.memory_budget, cfg.n_eigenvalues)
    write_json(out / "stability.json", {"mode": mode, "assumptions": cfg.assumptions, **v.to_dict()})
    if "svg" in cfg.output.formats:
        plots.pole_diagram(v.eigenvalues, out / "poles.svg", v.spectral_radius,
                           f"Leading eigenvalues of E{{A (x) A}}, mode {mode}")
    print(f"mode {mode}: spectral radius {v.spectral_radius:.4f} (split halves "
          f"{v.split_radii[0]:.4f} / {v.split_radii[1]:.4f}, M = {v.samples}, "
          f"dim {v.dim}, {v.runtime_s:.1f} s) -> {v.verdict}")
    for note in v.notes:
        print(f"  note: {note}")
    return v


def cmd_stability(args) -> int:
    cfg = _load(args)
    if (rc := _check_timing(cfg)) != EXIT_OK:
        return rc
    _banner(cfg)
    v = _run_stability(args, cfg, _outdir(args, cfg))
    return EXIT_OK if v.stable else EXIT_UNCERTIFIED


def _emit_simulation(cfg: RunConfig, outcome, out: Path) -> None:
    summary = {"assumptions": cfg.assumptions, "scenario": outcome.scenario.to_dict(),
               "modes": outcome.summary()}
    write_json(out / "stats.json", summary)
    keep = range(min(cfg.output.trajectory_replicas, cfg.scenario.replicas))
    T = cfg.timing.sampling_period
    for mode, res in outcome.results.items():
        if "csv" in cfg.output.formats:
            write_trajectories(out / f"trajectories_{mode}.csv", res, keep)
        if "svg" in cfg.output.formats:
            st = outcome.stats[mode]
            t = np.arange(res.x.shape[1]) * T
            plots.envelope(t, st.mean, st.lower, st.upper, out / f"envelope_{mode}.svg",
                           ["spacing error", "velocity difference", "acceleration difference"]
                           if res.x.shape[2] == 3 else None, f"mode {mode}")
    ratios = {m: s.ratio.ratios for m, s in outcome.stats.items() if s.ratio is not None}
    if ratios and "svg" in cfg.output.formats:
        plots.ratio_boxplot(ratios, out / "ratios.svg")


def _print_stats(outcome) -> None:
    print(f"{'mode':8s} {'replicas':>8s} {'divergent':>9s} {'J mean':>10s} {'ratio mean':>10s} "
          f"{'ratio max':>10s} {'runtime':>8s}")
    for mode, st in outcome.stats.items():
        r = st.ratio
        rm = f"{r.mean:10.3f}" if r else f"{'n/a':>10s}"
        rx = f"{r.max:10.3f}" if r else f"{'n/a':>10s}"
        print(f"{mode:8s} {st.replicas:8d} {st.divergent:9d} {st.J_mean:10.3f} {rm} {rx} "
              f"{outcome.results[mode].runtime_s:7.1f}s")


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if (rc := _check_timing(cfg)) != EXIT_OK:
        return rc
    out = _outdir(args, cfg)
    modes = [cfg.compensator.mode]
    if "ideal" not in modes:
        modes.append("ideal")
    d = _design_for(args, cfg, modes)
    _banner(cfg)
    outcome = simulate(d, cfg.scenario, modes)
    _emit_simulation(cfg, outcome, out)
    _print_stats(outcome)
    return EXIT_OK


def _judge(value, low, high) -> bool:
    if value is None or not np.isfinite(value):
        return False
    return value > low if high is None else low <= value <= high


def cmd_reproduce(args) -> int:
    cfg = _load(args)
    if (rc := _check_timing(cfg)) != EXIT_OK:
        return rc
    out = _outdir(args, cfg)
    _banner(cfg)
    t0 = time.perf_counter()
    modes = ["none", "fsp", "3sfsp", "ideal"]
    d = _design_for(args, cfg, modes)
    args.mode = "3sfsp"
    v = _run_stability(args, cfg, out, d)
    values = {"radius": v.spectral_radius}
    if not args.stability_only:
        outcome = simulate(d, cfg.scenario, modes)
        _emit_simulation(cfg, outcome, out)
        _print_stats(outcome)
        for m in ("none", "fsp", "3sfsp"):
            r = outcome.stats[m].ratio
            if r is not None:
                values[f"{m}.mean"], values[f"{m}.max"] = r.mean, r.max
        if "fsp.max" in values and "3sfsp.max" in values:
            values["reduction"] = (values["fsp.max"] - values["3sfsp.max"]) / values["fsp.max"]
    rows = []
    print()
    print(f"{'quantity':36s} {'target':>8s} {'band':>17s} {'obtained':>9s}  result")
    for label, key, target, low, high in CASE_STUDY_TARGETS:
        if key not in values:
            continue
        val = values[key]
        ok = _judge(val, low, high)
        band = f"> {low:g}" if high is None else f"[{low:.3g}, {high:.3g}]"
        print(f"{label:36s} {target:8.3g} {band:>17s} {val:9.3f}  {'PASS' if ok else 'FAIL'}")
        rows.append({"quantity": label, "key": key, "target": target, "low": low, "high": high,
                     "value": val, "pass": ok})
    write_json(out / "reproduction.json", {"assumptions": cfg.assumptions, "rows": rows,
                                           "runtime_s": time.perf_counter() - t0})
    print(f"total runtime {time.perf_counter() - t0:.1f} s; artifacts in {out}")
    return EXIT_OK if v.stable else EXIT_UNCERTIFIED


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncsfsp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, replicas=False, mode=False, design_in=False):
        sp.add_argument("--config", type=Path, help="run configuration (default: shipped CACC config)")
        sp.add_argument("--seed", type=int, help="master seed (overrides NCS_SEED and the config)")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads for the compiled kernels")
        if replicas:
            sp.add_argument("--replicas", type=int, help="Monte-Carlo replicas per mode")
        if mode:
            sp.add_argument("--mode", choices=MODES, help="compensation mode")
        if design_in:
            sp.add_argument("--design", type=Path, help="reuse a design report instead of designing")

    common(sub.add_parser("validate", help="schema and timing-specification checks"))
    common(sub.add_parser("design", help="controller, filter and predictor design report"))
    sp = sub.add_parser("stability", help="mean-square stability certificate")
    common(sp, mode=True, design_in=True)
    sp.add_argument("--samples", type=int, help="Monte-Carlo draws of the closed-loop matrix")
    common(sub.add_parser("simulate", help="Monte-Carlo ensemble of one mode plus the ideal loop"),
           replicas=True, mode=True, design_in=True)
    sp = sub.add_parser("reproduce", help="full CACC case study with target comparison")
    common(sp, replicas=True, design_in=True)
    sp.add_argument("--samples", type=int, help="Monte-Carlo draws of the closed-loop matrix")
    sp.add_argument("--stability-only", action="store_true", help="skip the ensembles")
    return p


COMMANDS = {"validate": cmd_validate, "design": cmd_design, "stability": cmd_stability,
            "simulate": cmd_simulate, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    _accel.set_threads(args.threads)
    if args.command == "reproduce":
        args.mode = None
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DesignError as exc:
        print(f"design failed: {exc}", file=sys.stderr)
        return EXIT_DESIGN


if __name__ == "__main__":
    sys.exit(main())
