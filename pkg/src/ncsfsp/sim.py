"""Event-driven Monte-Carlo simulation of the networked loop and its metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .compensator import FeedbackLaw
from .discretize import ContinuousPlant
from .timing import TimingConfig, TimingTrace, ideal_trace, replica_rng, sample_timing, validate_trace

log = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class ScenarioConfig:
    """Step reference and step disturbance; times in seconds from the scenario start."""

    horizon: float = 20.0
    reference_time: float = 0.0
    reference_amplitude: list = field(default_factory=lambda: [1.0])
    disturbance_time: float = 10.0
    disturbance_amplitude: list = field(default_factory=lambda: [10.0, 0.0])
    replicas: int = 5000
    seed: int = 0
    warmup_steps: int | None = None

    def __post_init__(self):
        if not self.horizon > max(self.reference_time, self.disturbance_time):
            raise ValueError("horizon must exceed both the reference and the disturbance time")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warm-up must be non-negative")
        self.reference_amplitude = [float(v) for v in np.atleast_1d(self.reference_amplitude)]
        self.disturbance_amplitude = [float(v) for v in np.atleast_1d(self.disturbance_amplitude)]

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "reference_time": self.reference_time,
                "reference_amplitude": self.reference_amplitude,
                "disturbance_time": self.disturbance_time,
                "disturbance_amplitude": self.disturbance_amplitude,
                "replicas": self.replicas, "seed": self.seed, "warmup_steps": self.warmup_steps}

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        return cls(**d)


@dataclass
class SimSetup:
    """Step bookkeeping shared by every replica of one scenario."""

    period: float
    warmup: int
    steps: int          # recorded steps (scenario grid n = 0..N)
    r_seq: np.ndarray   # (warmup + steps, nr)
    w_time: float       # absolute disturbance onset
    w_amp: np.ndarray

    @property
    def total(self) -> int:
        return self.warmup + self.steps


def make_setup(scenario: ScenarioConfig, period: float, n_disturbances: int, warmup: int) -> SimSetup:
    steps = int(round(scenario.horizon / period)) + 1
    K = warmup + steps
    k_rel = (np.arange(K) - warmup) * period
    on = k_rel >= scenario.reference_time - 1e-9 * period
    r = np.outer(on, scenario.reference_amplitude)
    w = np.zeros(n_disturbances)
    amp = np.asarray(scenario.disturbance_amplitude, dtype=float)
    if amp.size > n_disturbances:
        raise ValueError(f"{amp.size} disturbance amplitudes for {n_disturbances} channels")
    w[: amp.size] = amp
    return SimSetup(period, warmup, steps, r, warmup * period + scenario.disturbance_time, w)


@dataclass
class ReplicaResult:
    """Series on the actuation grid (scenario steps only) and the metric."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    xL: np.ndarray
    xhat: np.ndarray
    J: float
    status: int
    replica: int = 0


def compute_metric(x, reference, Br, warmup: int = 0) -> float:
    """Sum over the grid of ||B^r r_k - x_k||^2, skipping the first ``warmup`` rows."""
    x = np.asarray(x, dtype=float)
    reference = np.asarray(reference, dtype=float).reshape(len(reference), -1)
    if x.shape[0] != reference.shape[0]:
        raise ValueError(f"state series has {x.shape[0]} steps, reference has {reference.shape[0]}")
    e = reference[warmup:] @ np.asarray(Br, dtype=float).T - x[warmup:]
    return float(np.sum(e * e))


def _run(plant: ContinuousPlant, law: FeedbackLaw, setup: SimSetup, t, aj, record_z=False):
    R = t.shape[0]
    sysf = law.system
    x0 = np.zeros((R, plant.n))
    c = np.ascontiguousarray
    return kernels.simulate_batch(
        c(plant.A), c(plant.B), c(plant.Bw), c(t), c(aj), c(setup.r_seq, dtype=float),
        float(setup.w_time), c(setup.w_amp, dtype=float), x0,
        c(sysf.A), c(sysf.B), c(sysf.C), c(sysf.D), record_z)


def run_replica(plant: ContinuousPlant, trace: TimingTrace, law: FeedbackLaw, setup: SimSetup,
                Br, replica: int = 0, check: bool = True) -> ReplicaResult:
    if check:
        bad = validate_trace(trace)
        if bad:
            raise ValueError(f"trace rejected: {bad[0]}")
    if trace.K != setup.total:
        raise ValueError(f"trace has {trace.K} steps, scenario needs {setup.total}")
    xs, us, ms, hs, _, status = _run(plant, law, setup, trace.sensing[None], trace.actuation[None])
    W = setup.warmup
    st = int(status[0])
    J = compute_metric(xs[0], setup.r_seq, Br, W) if st == 0 else math.inf
    return ReplicaResult(trace.a[W:], xs[0, W:], us[0, W:], ms[0, W:], hs[0, W:], J, st, replica)


@dataclass
class EnsembleResult:
    mode: str
    J: np.ndarray
    status: np.ndarray
    x: np.ndarray      # (R, steps, n)
    u: np.ndarray
    xL: np.ndarray
    xhat: np.ndarray
    t: np.ndarray      # (R, steps)
    runtime_s: float = 0.0

    @property
    def replicas(self) -> int:
        return len(self.J)

    def replica(self, i: int) -> ReplicaResult:
        return ReplicaResult(self.t[i], self.x[i], self.u[i], self.xL[i], self.xhat[i],
                             float(self.J[i]), int(self.status[i]), i)


def sample_traces(timing: TimingConfig, master_seed: int, replicas: int, K: int):
    """One independent stream per replica, so results do not depend on batching."""
    t = np.empty((replicas, K, timing.num_sensors))
    aj = np.empty((replicas, K, timing.num_actuators))
    for i in range(replicas):
        ti, aji, _ = sample_timing(timing, replica_rng(master_seed, i), 1, K)
        t[i], aj[i] = ti[0], aji[0]
    return t, aj


def run_ensemble(plant: ContinuousPlant, timing: TimingConfig, law: FeedbackLaw, scenario: ScenarioConfig,
                 Br, warmup: int, mode: str | None = None, traces=None) -> EnsembleResult:
    """All replicas of one mode.  The ideal mode is deterministic: one run, repeated."""
    mode = mode or law.mode
    t0 = time.perf_counter()
    setup = make_setup(scenario, timing.sampling_period, plant.n_disturbances, warmup)
    R = scenario.replicas
    if mode == "ideal":
        tr = ideal_trace(timing.sampling_period, setup.total, timing.num_sensors, timing.num_actuators)
        t, aj = tr.sensing[None], tr.actuation[None]
    elif traces is not None:
        t, aj = traces
    else:
        t, aj = sample_traces(timing, scenario.seed, R, setup.total)
    xs, us, ms, hs, _, status = _run(plant, law, setup, t, aj)
    a = aj.min(axis=2)
    if mode == "ideal" and R > 1:
        xs, us, ms, hs, status, a = (np.repeat(v, R, axis=0) for v in (xs, us, ms, hs, status, a))
    if np.any(status == 2):
        raise RuntimeError("causality violation in the event simulation")
    W = setup.warmup
    J = np.array([compute_metric(xs[i], setup.r_seq, Br, W) if status[i] == 0 else math.inf
                  for i in range(len(status))])
    res = EnsembleResult(mode, J, status, xs[:, W:], us[:, W:], ms[:, W:], hs[:, W:], a[:, W:],
                         time.perf_counter() - t0)
    log.info("mode %s: %d replicas in %.1f s, %d divergent", mode, len(J), res.runtime_s,
             int(np.sum(status == 1)))
    return res


@dataclass
class RatioSummary:
    ratios: np.ndarray
    mean: float
    max: float
    quantiles: dict
    J_ideal: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "max": self.max, "J_ideal": self.J_ideal,
                "quantiles": {str(k): v for k, v in self.quantiles.items()}}


def relative_performance(result: EnsembleResult, ideal: EnsembleResult) -> RatioSummary:
    J0 = float(ideal.J[0])
    if not J0 > 0:
        raise ValueError("ideal tracking energy is zero; ratios are undefined for this scenario")
    ok = np.isfinite(result.J)
    r = result.J / J0
    if not ok.any():
        return RatioSummary(r, math.inf, math.inf, {}, J0)
    q = np.quantile(r[ok], QUANTILES)
    return RatioSummary(r, float(np.mean(r[ok])), float(np.max(r[ok])),
                        {p: float(v) for p, v in zip(QUANTILES, q)}, J0)


@dataclass
class EnsembleStats:
    mode: str
    replicas: int
    divergent: int
    J_mean: float
    J_max: float
    J_quantiles: dict
    mean: np.ndarray       # (steps, n)
    lower: np.ndarray      # 5th percentile
    upper: np.ndarray      # 95th percentile
    variance: np.ndarray
    u_mean: np.ndarray
    ratio: RatioSummary | None = None

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "replicas": self.replicas, "divergent": self.divergent,
               "J_mean": self.J_mean, "J_max": self.J_max,
               "J_quantiles": {str(k): v for k, v in self.J_quantiles.items()}}
        if self.ratio is not None:
            out["ratio"] = self.ratio.to_dict()
        return out


def ensemble_stats(result: EnsembleResult, ideal: EnsembleResult | None = None) -> EnsembleStats:
    ok = result.status == 0
    X = result.x[ok]
    J = result.J[ok]
    if not ok.any():
        nan = np.full(result.x.shape[1:], np.nan)
        return EnsembleStats(result.mode, result.replicas, result.replicas, math.inf, math.inf, {},
                             nan, nan, nan, nan, np.full(result.u.shape[1:], np.nan))
    lo, hi = np.quantile(X, [0.05, 0.95], axis=0)
    ratio = relative_performance(result, ideal) if ideal is not None else None
    return EnsembleStats(
        result.mode, result.replicas, int(np.sum(~ok)), float(np.mean(J)), float(np.max(J)),
        {p: float(v) for p, v in zip(QUANTILES, np.quantile(J, QUANTILES))},
        X.mean(axis=0), lo, hi, X.var(axis=0), result.u[ok].mean(axis=0), ratio)


def write_trajectories(path: str | Path, result: EnsembleResult, replicas=None) -> None:
    """CSV with columns replica, k, t, x1..xn, u1..uNa, xL1..xLn."""
    idx = range(result.replicas) if replicas is None else replicas
    n = result.x.shape[2]
    na = result.u.shape[2]
    head = (["replica", "k", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(na)]
            + [f"xL{i + 1}" for i in range(n)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for r in idx:
            for k in range(result.x.shape[1]):
                w.writerow([r, k, repr(float(result.t[r, k]))]
                           + [repr(float(v)) for v in result.x[r, k]]
                           + [repr(float(v)) for v in result.u[r, k]]
                           + [repr(float(v)) for v in result.xL[r, k]])
