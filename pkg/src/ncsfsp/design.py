"""Pipeline orchestration: design, stability certificate and ensemble runs.

Everything a simulation needs is captured in a design report (JSON), so a
design can be produced once and simulated later from the file alone.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .compensator import (
    MODES, CompensatorRealization, DesignError, FeedbackLaw, PrimaryController,
    assemble_compensated_controller, deterministic_models, design_compensator, design_lqr,
    estimate_expected_models,
)
from .config import RunConfig, controller_from_config
from .delays import ideal_step_draws, sample_step_draws
from .discretize import ContinuousPlant, zoh
from .sim import EnsembleResult, ScenarioConfig, ensemble_stats, run_ensemble
from .stability import AugmentedClosedLoop, StabilityVerdict, matrix_sampler, mss_test
from .timing import TimingConfig, generate_trace, max_integer_delay, validate_trace

log = logging.getLogger(__name__)

REPORT_VERSION = 1

# sub-stream labels so that design, certificate and ensemble never share draws
_STREAM = {"models": 0, "stability": 1, "probe": 2}


def sub_seed(master: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(master), _STREAM[stream]]).generate_state(1)[0])


def to_jsonable(obj):
    """Recursively turn numpy scalars, arrays and complex numbers into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(json.dumps(to_jsonable(data), indent=2) + "\n")


# ---------------------------------------------------------------- validate

@dataclass
class ValidationReport:
    problems: list = field(default_factory=list)
    max_delay: int | None = None
    probe_steps: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems


def validate(cfg: RunConfig, probe_steps: int = 200) -> ValidationReport:
    """Static timing checks plus a probe trace run through the specification checks."""
    rep = ValidationReport(probe_steps=probe_steps)
    for msg in cfg.timing.jitter_violations():
        rep.problems.append(f"Specification 1 (monotone sensing): {msg}")
    try:
        rep.max_delay = max_integer_delay(cfg.timing)
    except ValueError as exc:
        rep.problems.append(f"delay bound: {exc}")
    if rep.problems:
        return rep
    try:
        trace = generate_trace(cfg.timing, probe_steps, sub_seed(cfg.seed, "probe"))
    except RuntimeError as exc:
        rep.problems.append(str(exc))
        return rep
    rep.problems.extend(str(v) for v in validate_trace(trace)[:20])
    return rep


# ------------------------------------------------------------------ design

@dataclass
class Design:
    """Everything needed to simulate or certify: plant, timing and one law per mode."""

    plant: ContinuousPlant
    timing: TimingConfig
    controller: PrimaryController
    max_delay: int
    laws: dict
    compensators: dict = field(default_factory=dict)
    assumptions: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def law(self, mode: str) -> FeedbackLaw:
        try:
            return self.laws[mode]
        except KeyError:
            raise KeyError(f"design has no law for mode {mode!r}; available: {sorted(self.laws)}") from None

    def report(self) -> dict:
        comp = {}
        for mode, c in self.compensators.items():
            comp[mode] = {
                "alpha": c.filter.alpha,
                "filter": c.filter.to_dict(),
                "predictor": c.predictor.to_dict(),
                "predictor_spectral_radius": c.spectral_radius,
                "full_order": c.full_order,
                "diagnostics": c.diagnostics,
                "models": c.models.to_dict(),
            }
        return to_jsonable({
            "report_version": REPORT_VERSION,
            "package_version": __version__,
            "assumptions": self.assumptions,
            "plant": self.plant.to_dict(),
            "timing": self.timing.to_dict(),
            "max_integer_delay": self.max_delay,
            "controller": self.controller.to_dict(),
            "compensators": comp,
            "laws": {m: law.to_dict() for m, law in self.laws.items()},
            "diagnostics": self.diagnostics,
        })

    @classmethod
    def from_report(cls, d: dict) -> Design:
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError(f"unsupported design report version {d.get('report_version')!r}")
        p = d["plant"]
        plant = ContinuousPlant(p["A"], p["B"], p["Bw"])
        laws = {m: FeedbackLaw.from_dict(v) for m, v in d["laws"].items()}
        return cls(plant, TimingConfig.from_dict(d["timing"]), PrimaryController.from_dict(d["controller"]),
                   int(d["max_integer_delay"]), laws, {}, list(d.get("assumptions", [])),
                   d.get("diagnostics", {}))


def load_design(path: str | Path) -> Design:
    return Design.from_report(json.loads(Path(path).read_text()))


def build_controller(cfg: RunConfig) -> tuple[PrimaryController, dict]:
    ctrl_cfg = cfg.controller
    Ad, Bd = zoh(cfg.plant, cfg.timing.sampling_period)
    if "gains" in ctrl_cfg:
        ctrl = controller_from_config(ctrl_cfg)
        source = "configured gains"
    else:
        Ac = np.asarray(ctrl_cfg["Ac"], dtype=float)
        nc = Ac.shape[0] if Ac.size else 0
        na = cfg.plant.n_inputs
        base = PrimaryController(Ac, ctrl_cfg["Bc"], np.zeros((na, nc)), np.zeros((na, cfg.plant.n)),
                                 ctrl_cfg["Br"])
        Kc, Kx = design_lqr(Ad, Bd, base.Ac, base.Bc, ctrl_cfg["lqr"]["Q"], ctrl_cfg["lqr"]["R"])
        ctrl = PrimaryController(base.Ac, base.Bc, Kc, Kx, base.Br)
        source = "discrete LQR"
    n, na, nr, nc = ctrl.dims
    if n != cfg.plant.n or na != cfg.plant.n_inputs:
        raise DesignError(f"controller is sized for n={n}, na={na}; plant has n={cfg.plant.n}, "
                          f"na={cfg.plant.n_inputs}")
    rho = float(np.max(np.abs(np.linalg.eigvals(ctrl.closed_loop(Ad, Bd)))))
    info = {"source": source, "delay_free_spectral_radius": rho}
    if not rho < 1:
        raise DesignError(f"delay-free closed loop is not Schur stable (spectral radius {rho:.6g})")
    return ctrl, info


def _default_orders(n: int, n_targets: int) -> list:
    return [(n_targets, n_targets + 1)] * n


def design(cfg: RunConfig, modes=MODES) -> Design:
    """Controller, expected models, filters and predictors for the requested modes."""
    t0 = time.perf_counter()
    ctrl, cinfo = build_controller(cfg)
    L = max_integer_delay(cfg.timing)
    cc = cfg.compensator
    laws, comps = {}, {}
    diag = {"controller": cinfo}
    for mode in modes:
        if mode in ("none", "ideal"):
            laws[mode] = assemble_compensated_controller(ctrl, None, mode)
            continue
        if mode == "3sfsp":
            models = estimate_expected_models(cfg.plant, cfg.timing, cc.model_samples,
                                              sub_seed(cfg.seed, "models"), L)
            alpha, orders = cc.alpha, cc.orders
        else:
            if cc.fsp_delay_steps is None:
                raise DesignError("mode fsp needs compensator/fsp/delay_steps")
            models = deterministic_models(cfg.plant, cfg.timing.sampling_period, cc.fsp_delay_steps)
            alpha = cc.alpha if cc.fsp_alpha is None else cc.fsp_alpha
            orders = cc.fsp_orders or cc.orders
        if orders is None:
            unstable = int(np.sum(np.abs(np.linalg.eigvals(models.A)) >= 1 - 1e-6))
            orders = _default_orders(cfg.plant.n, unstable + len(cc.extra_targets))
        comp = design_compensator(models, alpha, orders, cc.extra_targets, cc.free_coefficients)
        comps[mode] = comp
        laws[mode] = assemble_compensated_controller(ctrl, comp, mode)
        diag[mode] = {"predictor_spectral_radius": comp.spectral_radius,
                      "max_residue": comp.filter.diagnostics.get("max_residue"),
                      "filter_rows": comp.filter.diagnostics.get("rows")}
    diag["runtime_s"] = time.perf_counter() - t0
    return Design(cfg.plant, cfg.timing, ctrl, L, laws, comps, cfg.assumptions, diag)


# ---------------------------------------------------------------- stability

def stability(d: Design, mode: str, samples: int, seed: int,
              memory_budget: int = 2 * 1024 ** 3, n_eigs: int = 64) -> StabilityVerdict:
    law = d.law(mode)
    loop = AugmentedClosedLoop(d.plant, law, d.max_delay)
    if mode == "ideal":
        draws = ideal_step_draws(d.plant, d.timing.sampling_period, d.timing.num_sensors)
        sampler = matrix_sampler(loop, lambda rng, c: draws.subset(np.zeros(c, dtype=int)))
    else:
        sampler = matrix_sampler(loop, lambda rng, c: sample_step_draws(d.plant, d.timing, c, rng, d.max_delay))
    v = mss_test(sampler, samples, seed, dim=loop.dim, memory_budget=memory_budget, n_eigs=n_eigs)
    v.notes.append(f"mode {mode}, augmented state dimension {loop.dim}")
    return v


# --------------------------------------------------------------- simulation

@dataclass
class SimulationOutcome:
    results: dict           # mode -> EnsembleResult
    stats: dict             # mode -> EnsembleStats
    scenario: ScenarioConfig

    def summary(self) -> dict:
        return {m: s.to_dict() for m, s in self.stats.items()}


def simulate(d: Design, scenario: ScenarioConfig, modes) -> SimulationOutcome:
    """Ensembles for the requested modes; the ideal run is always added for the ratios."""
    warm = scenario.warmup_steps if scenario.warmup_steps is not None else d.max_delay + 1
    Br = d.controller.Br
    ideal = run_ensemble(d.plant, d.timing, d.law("ideal"), scenario, Br, warm, "ideal")
    degenerate = not ideal.J[0] > 0
    if degenerate:
        log.warning("ideal tracking energy is zero; ratios are not reported")
    results: dict[str, EnsembleResult] = {}
    stats = {}
    for mode in modes:
        res = ideal if mode == "ideal" else run_ensemble(d.plant, d.timing, d.law(mode), scenario, Br, warm, mode)
        results[mode] = res
        stats[mode] = ensemble_stats(res, None if degenerate else ideal)
    return SimulationOutcome(results, stats, scenario)
