"""Stochastic sensing/actuation timing of a networked control loop.

Event times are float seconds from t = 0.  A trace holds, for each step k,
the sensing instant of every sensor and the actuation instant of every
actuator; everything else (delays, intervals, intra-interval offsets) is
derived from those two arrays.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("constant", "uniform", "truncated-inverse-gaussian")

REJECTION_BUDGET = 10_000
STEP_RESAMPLE_BUDGET = 100


class DistributionError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class TimingSpecError(RuntimeError):
    """Sampled timing violates one of the ordering specifications."""

    def __init__(self, spec: int, message: str):
        super().__init__(f"Specification {spec}: {message}")
        self.spec = spec


@dataclass(frozen=True)
class DistributionSpec:
    """A compactly supported distribution of a time quantity (seconds).

    For the truncated inverse Gaussian the untruncated law is parameterized
    by mean ``mu`` and standard deviation ``sigma`` (shape mu**3 / sigma**2),
    then restricted to [min, max].
    """

    kind: str
    value: float | None = None
    min: float | None = None
    max: float | None = None
    mu: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DistributionError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "constant":
            if self.value is None or not math.isfinite(self.value) or self.value < 0:
                raise DistributionError(f"constant needs a finite value >= 0: {self}")
            return
        lo, hi = self.min, self.max
        if lo is None or hi is None or not (math.isfinite(lo) and math.isfinite(hi)):
            raise DistributionError(f"support must be finite: {self}")
        if lo < 0 or lo > hi:
            raise DistributionError(f"need 0 <= min <= max: {self}")
        if self.kind == "truncated-inverse-gaussian":
            if self.mu is None or self.sigma is None or self.mu <= 0:
                raise DistributionError(f"inverse Gaussian needs mu > 0 and sigma: {self}")
            if not self.sigma > 0:
                raise DistributionError(f"sigma must be positive: {self}")
            if not lo <= self.mu <= hi:
                warnings.warn(f"mu outside truncation window: {self}", stacklevel=3)

    @classmethod
    def constant(cls, value: float) -> DistributionSpec:
        return cls("constant", value=float(value))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> DistributionSpec:
        return cls("uniform", min=float(lo), max=float(hi))

    @classmethod
    def inverse_gaussian(cls, lo: float, hi: float, mu: float, sigma: float) -> DistributionSpec:
        return cls("truncated-inverse-gaussian", min=float(lo), max=float(hi),
                   mu=float(mu), sigma=float(sigma))

    @classmethod
    def from_dict(cls, d: dict) -> DistributionSpec:
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "constant":
            return self.value, self.value
        return self.min, self.max

    @property
    def shape(self) -> float:
        return self.mu**3 / self.sigma**2

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray | float:
        """Draw from the distribution; every value lies in ``support``."""
        if self.kind == "constant":
            return self.value if size is None else np.full(size, self.value)
        if self.kind == "uniform":
            return rng.uniform(self.min, self.max, size)
        scalar = size is None
        n = 1 if scalar else int(np.prod(size))
        out = np.empty(n)
        todo = np.arange(n)
        lam = self.shape
        for _ in range(REJECTION_BUDGET):
            draw = rng.wald(self.mu, lam, todo.size)
            ok = (draw >= self.min) & (draw <= self.max)
            out[todo[ok]] = draw[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
        else:
            raise SamplingError(
                f"rejection sampling did not converge after {REJECTION_BUDGET} rounds for {self}"
            )
        return float(out[0]) if scalar else out.reshape(size)


def sample_distribution(spec: DistributionSpec, rng: np.random.Generator) -> float:
    return spec.sample(rng)


StageSpec = DistributionSpec | Sequence[DistributionSpec]

SENSOR_STAGES = ("offset", "jitter", "sensing_delay", "sensing_message_delay")
ACTUATOR_STAGES = ("actuation_message_delay", "actuation_delay")


@dataclass
class TimingConfig:
    """Timing model.  Sensor/actuator stages accept one spec or one per index."""

    sampling_period: float
    num_sensors: int
    num_actuators: int
    offset: StageSpec
    jitter: StageSpec
    sensing_delay: StageSpec
    sensing_message_delay: StageSpec
    control_delay: DistributionSpec
    actuation_message_delay: StageSpec
    actuation_delay: StageSpec

    def __post_init__(self):
        if not self.sampling_period > 0:
            raise DistributionError("sampling period must be positive")
        if self.num_sensors < 1 or self.num_actuators < 1:
            raise DistributionError("need at least one sensor and one actuator")
        for name in SENSOR_STAGES:
            setattr(self, name, self._expand(name, self.num_sensors))
        for name in ACTUATOR_STAGES:
            setattr(self, name, self._expand(name, self.num_actuators))

    def _expand(self, name, count) -> tuple[DistributionSpec, ...]:
        v = getattr(self, name)
        if isinstance(v, DistributionSpec):
            return (v,) * count
        v = tuple(v)
        if len(v) != count:
            raise DistributionError(f"{name}: expected {count} distributions, got {len(v)}")
        return v

    def jitter_violations(self) -> list[str]:
        """Static check that the jitter window keeps sensing monotone."""
        bad = []
        for i, spec in enumerate(self.jitter):
            lo, hi = spec.support
            if hi - lo >= self.sampling_period:
                bad.append(f"sensor {i}: jitter spread {hi - lo:g} s >= sampling period")
        return bad

    def to_dict(self) -> dict:
        out = {
            "sampling_period": self.sampling_period,
            "num_sensors": self.num_sensors,
            "num_actuators": self.num_actuators,
            "control_delay": self.control_delay.to_dict(),
        }
        for name in SENSOR_STAGES + ACTUATOR_STAGES:
            specs = getattr(self, name)
            out[name] = specs[0].to_dict() if len(set(specs)) == 1 else [s.to_dict() for s in specs]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TimingConfig:
        kw = dict(d)
        for name in SENSOR_STAGES + ACTUATOR_STAGES + ("control_delay",):
            v = kw[name]
            kw[name] = (DistributionSpec.from_dict(v) if isinstance(v, dict)
                        else [DistributionSpec.from_dict(x) for x in v])
        return cls(**kw)


def case_study_timing(sampling_period: float = 0.1, num_sensors: int = 3,
                      num_actuators: int = 2) -> TimingConfig:
    """Stage distributions of the two-vehicle CACC case study."""
    ms = 1e-3
    task = DistributionSpec.inverse_gaussian(14 * ms, 17 * ms, 16 * ms, 0.85 * ms)
    return TimingConfig(
        sampling_period=sampling_period,
        num_sensors=num_sensors,
        num_actuators=num_actuators,
        offset=DistributionSpec.uniform(0.0, 20 * ms),
        jitter=DistributionSpec.uniform(0.0, 50 * ms),
        sensing_delay=task,
        sensing_message_delay=DistributionSpec.inverse_gaussian(28 * ms, 34 * ms, 32 * ms, 1.7 * ms),
        control_delay=DistributionSpec.inverse_gaussian(42 * ms, 51 * ms, 48 * ms, 2.5 * ms),
        actuation_message_delay=DistributionSpec.inverse_gaussian(42 * ms, 51 * ms, 48 * ms, 2.5 * ms),
        actuation_delay=task,
    )


@dataclass
class TimingTrace:
    """Realized event times of one replica.

    ``sensing[k, i]`` is t^i_k, ``actuation[k, j]`` is a^j_k.
    """

    sensing: np.ndarray
    actuation: np.ndarray
    control_start: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.sensing.shape[0]

    @property
    def a(self) -> np.ndarray:
        return self.actuation.min(axis=1)

    @property
    def intervals(self) -> np.ndarray:
        """Delta a_{k+1} = a_{k+1} - a_k, length K - 1."""
        return np.diff(self.a)

    @property
    def actuator_offsets(self) -> np.ndarray:
        return self.actuation - self.a[:, None]

    @property
    def delays(self) -> np.ndarray:
        return self.a[:, None] - self.sensing

    def to_csv(self, path: str | Path) -> None:
        a = self.a
        D = self.delays
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "role", "index", "t", "a", "D"])
            for k in range(self.K):
                for i in range(self.sensing.shape[1]):
                    w.writerow([k, "sensor", i, repr(self.sensing[k, i]), repr(a[k]), repr(D[k, i])])
                for j in range(self.actuation.shape[1]):
                    w.writerow([k, "actuator", j, "", repr(self.actuation[k, j]), ""])


@dataclass(frozen=True)
class Violation:
    spec: int
    k: int
    index: int | None
    message: str

    def __str__(self):
        where = f"k={self.k}" + ("" if self.index is None else f", index={self.index}")
        return f"Specification {self.spec} ({where}): {self.message}"


def _violation_masks(t, aj, c):
    """Boolean masks (R, K) of steps that break each specification."""
    R, K, _ = t.shape
    masks = {s: np.zeros((R, K), dtype=bool) for s in (1, 2, 3, 4, 5)}
    masks[1][:, 1:] = (np.diff(t, axis=1) <= 0).any(axis=2)
    tk = t.min(axis=2)
    masks[2][:, :-1] = (t[:, :-1, :] >= tk[:, 1:, None]).any(axis=2)
    if c is not None:
        masks[3][:, 1:] = np.diff(c, axis=1) <= 0
    masks[4][:, 1:] = (np.diff(aj, axis=1) <= 0).any(axis=2)
    ak = aj.min(axis=2)
    masks[5][:, :-1] = (aj[:, :-1, :] >= ak[:, 1:, None]).any(axis=2)
    return masks


def validate_trace(trace: TimingTrace) -> list[Violation]:
    """List every ordering-specification violation in a trace (empty if none)."""
    t, aj = trace.sensing, trace.actuation
    out: list[Violation] = []
    K = t.shape[0]
    for k in range(1, K):
        for i in np.flatnonzero(t[k] - t[k - 1] <= 0):
            out.append(Violation(1, k, int(i), "sensing sequence not strictly increasing"))
    tk = t.min(axis=1)
    for k in range(K - 1):
        for i in np.flatnonzero(t[k] >= tk[k + 1]):
            out.append(Violation(2, k, int(i), "sensing sequences not loosely synchronized"))
    if trace.control_start is not None:
        c = trace.control_start
        for k in np.flatnonzero(np.diff(c) <= 0) + 1:
            out.append(Violation(3, int(k), None, "control computation starts not strictly increasing"))
    for k in range(1, K):
        for j in np.flatnonzero(aj[k] - aj[k - 1] <= 0):
            out.append(Violation(4, k, int(j), "actuation sequence not strictly increasing"))
    ak = aj.min(axis=1)
    for k in range(K - 1):
        for j in np.flatnonzero(aj[k] >= ak[k + 1]):
            out.append(Violation(5, k, int(j), "actuation sequences not loosely synchronized"))
    return out


def _stack(specs, rng, shape):
    # one column per sensor/actuator index
    return np.stack([s.sample(rng, shape) for s in specs], axis=-1)


def _draw_steps(config: TimingConfig, rng, R, K):
    T = config.sampling_period
    jit = _stack(config.jitter, rng, (R, K))
    ds = _stack(config.sensing_delay, rng, (R, K))
    dsc = _stack(config.sensing_message_delay, rng, (R, K))
    dc = config.control_delay.sample(rng, (R, K))
    dca = _stack(config.actuation_message_delay, rng, (R, K))
    da = _stack(config.actuation_delay, rng, (R, K))
    return jit, ds + dsc, dc, dca + da, T


def sample_timing(config: TimingConfig, rng: np.random.Generator, n_traces: int, K: int):
    """Batched trace sampling; returns (t, a^j, c) arrays with leading replica axis.

    Steps that break Specifications 1-5 (or give a non-positive delay) are
    redrawn, up to ``STEP_RESAMPLE_BUDGET`` times per step.
    """
    if K < 2:
        raise ValueError("horizon must be at least 2 steps")
    R = n_traces
    offs = _stack(config.offset, rng, (R,))
    jit, sens, dc, act, T = _draw_steps(config, rng, R, K)
    kT = np.arange(K) * T

    def compose():
        t = offs[:, None, :] + kT[None, :, None] + jit
        c = (t + sens).max(axis=2)
        aj = (c + dc)[:, :, None] + act
        return t, aj, c

    attempts = np.zeros((R, K), dtype=int)
    while True:
        t, aj, c = compose()
        masks = _violation_masks(t, aj, c)
        masks[0] = (aj.min(axis=2)[:, :, None] - t <= 0).any(axis=2)
        bad = np.zeros((R, K), dtype=bool)
        for m in masks.values():
            bad |= m
        if not bad.any():
            return t, aj, c
        attempts[bad] += 1
        if (attempts > STEP_RESAMPLE_BUDGET).any():
            r, k = np.argwhere(attempts > STEP_RESAMPLE_BUDGET)[0]
            spec = next(s for s in (1, 2, 3, 4, 5, 0) if masks[s][r, k])
            if spec == 0:
                raise TimingSpecError(0, f"non-positive end-to-end delay at k={k} that resampling cannot fix")
            raise TimingSpecError(
                spec, f"violated at k={k} after {STEP_RESAMPLE_BUDGET} resamples; "
                "distribution supports are too wide for the sampling period")
        n_bad = int(bad.sum())
        rj, rs, rdc, ract, _ = _draw_steps(config, rng, 1, n_bad)
        jit[bad] = rj[0]
        sens[bad] = rs[0]
        dc[bad] = rdc[0]
        act[bad] = ract[0]


def replica_rng(master_seed: int, replica: int) -> np.random.Generator:
    """Independent stream for one replica: the index is mixed into the seed."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(replica),)))


def generate_trace(config: TimingConfig, K: int, seed: int | np.random.Generator) -> TimingTrace:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t, aj, c = sample_timing(config, rng, 1, K)
    return TimingTrace(t[0], aj[0], c[0])


def ideal_trace(sampling_period: float, K: int, num_sensors: int, num_actuators: int) -> TimingTrace:
    """Periodic sampling and actuation with zero delay."""
    kT = np.arange(K) * sampling_period
    return TimingTrace(np.repeat(kT[:, None], num_sensors, axis=1),
                       np.repeat(kT[:, None], num_actuators, axis=1), kT.copy())


@dataclass(frozen=True)
class TimingBounds:
    delay_max: float
    delay_min: float
    base_spread: float
    interval_min: float
    interval_max: float


def timing_bounds(config: TimingConfig) -> TimingBounds:
    """Interval-arithmetic bounds on delays and actuation intervals.

    Offsets are constant within a replica, so they shift every step of a
    sensor equally and do not widen the spread of actuation intervals.
    """
    T = config.sampling_period
    o = np.array([s.support for s in config.offset])
    j = np.array([s.support for s in config.jitter])
    x = j + np.array([s.support for s in config.sensing_delay]) + \
        np.array([s.support for s in config.sensing_message_delay])
    y = np.array([s.support for s in config.actuation_message_delay]) + \
        np.array([s.support for s in config.actuation_delay])
    dc = np.array(config.control_delay.support)
    ymin_lo, ymin_hi = y[:, 0].min(), y[:, 1].min()
    spread = (x[:, 1] - x[:, 0]).max() + (dc[1] - dc[0]) + (ymin_hi - ymin_lo)
    dmax = (o[:, 1] + x[:, 1]).max() - (o[:, 0] + j[:, 0]).min() + dc[1] + ymin_hi
    sens = x - j
    dmin = sens[:, 0].min() + dc[0] + ymin_lo
    return TimingBounds(float(dmax), float(dmin), float(spread), T - spread, T + spread)


def max_integer_delay(config: TimingConfig) -> int:
    """Upper bound N^d_max on the integer part of every realizable delay.

    Uses a_k - a_{k-n} >= n T - spread, where spread bounds the step-to-step
    variation of the actuation phase; returns the smallest n with
    n T - spread > max delay.
    """
    b = timing_bounds(config)
    if b.interval_min <= 0:
        raise ValueError(
            f"minimum possible actuation interval {b.interval_min:g} s is not positive")
    T = config.sampling_period
    n = max(1, math.floor((b.delay_max + b.base_spread) / T) + 1)
    while n * T - b.base_spread <= b.delay_max:
        n += 1
    return n
