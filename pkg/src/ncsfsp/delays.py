"""State-space realization of stochastic end-to-end delays.

A delay D^i_k is split into an integer number of actuation intervals
N^i_k >= 1 and a time advancement d^i_k inside the oldest of them:

    a_{k-N} <= a_k - D < a_{k-N+1},   d = a_k - a_{k-N} - D.

Sensor i then observes component i of

    exp(A d) x_{k-N} + Gamma^- u_{k-N-1} + Gamma^+ u_{k-N}.

A zero delay (ideal loop) decomposes to N = 0, d = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .discretize import ContinuousPlant
from .timing import TimingTrace

# event times closer than this are treated as coincident
SNAP = 1e-11


class WarmupError(IndexError):
    pass


@dataclass
class DelayDecomposition:
    """Per-sensor integer part, advancement and scenario indicators at one step."""

    N: np.ndarray
    d: np.ndarray
    p: np.ndarray
    k: int


def _decompose(a, D, k):
    """Vectorized over a leading batch axis: a (R, K), D (R, ns) at step k."""
    tau = a[:, k, None] - D
    cnt = (a[:, : k + 1, None] <= tau[:, None, :] + SNAP).sum(axis=1)
    m = cnt - 1
    if (m < 0).any():
        raise WarmupError(f"delay at step {k} reaches before the start of the trace; longer warm-up needed")
    N = k - m
    am = np.take_along_axis(a, m, axis=1)
    d = tau - am
    d[d < SNAP] = 0.0
    return N, d, m


def decompose_delay(trace: TimingTrace, k: int, i: int | None = None) -> DelayDecomposition:
    a = trace.a
    D = trace.delays[k]
    N, d, m = _decompose(a[None, :], D[None, :], k)
    N, d, m = N[0], d[0], m[0]
    s = trace.actuator_offsets[m]  # (ns, na): offsets in the interval each sensor lands in
    p = (d[:, None] < s).astype(int)
    if i is not None:
        return DelayDecomposition(N[i : i + 1], d[i : i + 1], p[i : i + 1], k)
    return DelayDecomposition(N, d, p, k)


def decompose_all(trace: TimingTrace, start: int = 0):
    """N and d for every step >= start (rows before enough history are -1 / nan)."""
    K, ns = trace.sensing.shape
    N = np.full((K, ns), -1)
    d = np.full((K, ns), np.nan)
    a = trace.a[None, :]
    D = trace.delays
    for k in range(start, K):
        try:
            Nk, dk, _ = _decompose(a, D[k][None, :], k)
        except WarmupError:
            continue
        N[k], d[k] = Nk[0], dk[0]
    return N, d


class ShiftRegister:
    """Tapped delay line holding the last ``order`` samples of a vector signal.

    With the state ordered newest first, ``x_{k+1} = A x_k + B v_k`` where A
    shifts every block down one slot and B injects v_k in the top block.
    """

    def __init__(self, order: int, width: int = 1):
        if order < 1:
            raise ValueError("register order must be >= 1")
        self.order = order
        self.width = width
        self.state = np.zeros(order * width)

    @property
    def A(self) -> np.ndarray:
        return np.kron(np.eye(self.order, k=-1), np.eye(self.width))

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((self.order * self.width, self.width))
        B[: self.width] = np.eye(self.width)
        return B

    def step(self, v) -> None:
        v = np.asarray(v, dtype=float).reshape(self.width)
        self.state = np.concatenate([v, self.state[: -self.width]]) if self.order > 1 else v.copy()

    def prefill(self, history) -> None:
        """Load a known history, newest first (history[0] is the last sample)."""
        h = np.asarray(history, dtype=float).reshape(-1, self.width)[: self.order]
        self.state[:] = 0.0
        self.state[: h.size] = h.reshape(-1)

    def select(self, N: int) -> np.ndarray:
        return selection_matrix(self, N) @ self.state


def selection_matrix(register: ShiftRegister, N: int) -> np.ndarray:
    """C^{l,N}: picks the sample delayed by N steps out of the register state."""
    if not 1 <= N <= register.order:
        raise ValueError(f"delay {N} outside 1..{register.order}")
    C = np.zeros((register.width, register.order * register.width))
    C[:, (N - 1) * register.width : N * register.width] = np.eye(register.width)
    return C


@dataclass
class FractionalGains:
    """Gamma^{i-}, Gamma^{i+} (n x na) and exp(A d^i) for one sensor and step."""

    minus: np.ndarray
    plus: np.ndarray
    propagator: np.ndarray


def fractional_gains(plant: ContinuousPlant, trace: TimingTrace, k: int, i: int) -> FractionalGains:
    dec = decompose_delay(trace, k, i)
    N, d = int(dec.N[0]), float(dec.d[0])
    s = trace.actuator_offsets[k - N]
    E, Gm, Gp = kernels.fractional_batch(plant.A, plant.B, np.array([d]), s[None, :])
    return FractionalGains(Gm[0], Gp[0], E[0])


def fractional_draws(plant: ContinuousPlant, t, aj, k: int):
    """Decomposition and fractional gains at step k for a batch of traces.

    t: (R, K, ns) sensing instants, aj: (R, K, na) actuation instants.
    Returns N (R, ns), d (R, ns), E (R, ns, n, n), Gm/Gp (R, ns, n, na).
    """
    a = aj.min(axis=2)
    D = a[:, k, None] - t[:, k, :]
    N, d, m = _decompose(a, D, k)
    R, ns = N.shape
    s = np.take_along_axis(aj, m[:, :, None], axis=1) - np.take_along_axis(a, m, axis=1)[:, :, None]
    E, Gm, Gp = kernels.fractional_batch(plant.A, plant.B, d.reshape(-1), s.reshape(R * ns, -1))
    n, na = plant.n, plant.n_inputs
    return N, d, E.reshape(R, ns, n, n), Gm.reshape(R, ns, n, na), Gp.reshape(R, ns, n, na)


class DelayLineSystems:
    """L^x and L^u: registers of past plant states and past inputs.

    ``x_reg`` holds x_{k-1} .. x_{k-Nmax}; ``u_reg`` holds u_{k-1} .. u_{k-Nmax-1}.
    """

    def __init__(self, n: int, n_inputs: int, max_delay: int):
        self.n = n
        self.n_inputs = n_inputs
        self.max_delay = max_delay
        self.x_reg = ShiftRegister(max_delay, n)
        self.u_reg = ShiftRegister(max_delay + 1, n_inputs)

    def step(self, x, u) -> None:
        self.x_reg.step(x)
        self.u_reg.step(u)


def assemble_delayed_measurement(systems: DelayLineSystems, dec: DelayDecomposition,
                                 gains: list[FractionalGains], x_now=None) -> np.ndarray:
    """x^L_k, built row by row from each sensor's own delay realization."""
    out = np.empty(len(dec.N))
    for i, (N, g) in enumerate(zip(dec.N, gains)):
        N = int(N)
        if N > systems.max_delay:
            raise WarmupError(f"sensor {i}: delay of {N} steps exceeds register depth {systems.max_delay}")
        if N == 0:
            if x_now is None:
                raise ValueError("zero delay needs the current state")
            xs = np.asarray(x_now, dtype=float)
            row = g.propagator[i] @ xs
        else:
            xs = systems.x_reg.select(N)
            row = (g.propagator[i] @ xs + g.minus[i] @ systems.u_reg.select(N + 1)
                   + g.plus[i] @ systems.u_reg.select(N))
        out[i] = row
    return out


@dataclass
class StepDraws:
    """Independent one-step realizations of every timing-dependent matrix.

    A/B/BJ discretize the interval that starts at the step; N, E, Gm, Gp
    describe the delayed measurement consumed at that step.
    """

    A: np.ndarray   # (M, n, n)
    B: np.ndarray   # (M, n, na)
    BJ: np.ndarray  # (M, n, na)
    N: np.ndarray   # (M, ns)
    d: np.ndarray   # (M, ns)
    E: np.ndarray   # (M, ns, n, n)
    Gm: np.ndarray  # (M, ns, n, na)
    Gp: np.ndarray  # (M, ns, n, na)

    def __len__(self) -> int:
        return self.A.shape[0]

    def subset(self, idx) -> StepDraws:
        return StepDraws(*(getattr(self, f)[idx] for f in
                           ("A", "B", "BJ", "N", "d", "E", "Gm", "Gp")))


def sample_step_draws(plant: ContinuousPlant, timing, count: int, rng: np.random.Generator,
                      max_delay: int) -> StepDraws:
    """Draw ``count`` short traces (fresh offsets each) and read step max_delay + 1."""
    from .timing import sample_timing

    k = max_delay + 1
    t, aj, _ = sample_timing(timing, rng, count, k + 2)
    a = aj.min(axis=2)
    dt = a[:, k + 1] - a[:, k]
    s = aj[:, k] - a[:, k][:, None]
    Ak, Bk, BJk, _ = kernels.step_matrices_batch(plant.A, plant.B, plant.Bw, dt, s)
    N, d, E, Gm, Gp = fractional_draws(plant, t, aj, k)
    if N.max() > max_delay:
        raise WarmupError(f"realized integer delay {N.max()} exceeds the bound {max_delay}")
    return StepDraws(Ak, Bk, BJk, N, d, E, Gm, Gp)


def ideal_step_draws(plant: ContinuousPlant, period: float, num_sensors: int) -> StepDraws:
    """The single deterministic draw of a zero-delay, fixed-period loop."""
    n, na = plant.n, plant.n_inputs
    Ak, Bk, BJk, _ = kernels.step_matrices_batch(plant.A, plant.B, plant.Bw,
                                                 np.array([period]), np.zeros((1, na)))
    E = np.broadcast_to(np.eye(n), (1, num_sensors, n, n)).copy()
    z = np.zeros((1, num_sensors, n, na))
    return StepDraws(Ak, Bk, BJk, np.zeros((1, num_sensors), dtype=int),
                     np.zeros((1, num_sensors)), E, z, z.copy())
