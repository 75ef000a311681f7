"""Exact discretization of an LTI plant over stochastic actuation intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

# ||A|| * interval above this is rejected (no NCS interval gets close)
CONDITIONING_LIMIT = 1e4


@dataclass
class ContinuousPlant:
    """x' = A x + B u + Bw w, full state measured."""

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.Bw = np.asarray(self.Bw, dtype=float).reshape(n, -1)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        for name in ("A", "B", "Bw"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_disturbances(self) -> int:
        return self.Bw.shape[1]

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "Bw": self.Bw.tolist()}


def cacc_plant(tau: float, headway: float) -> ContinuousPlant:
    """Two-vehicle CACC: states are spacing, velocity and acceleration differences.

    ``tau`` is the engine time constant, ``headway`` the time headway h.
    """
    it = 1.0 / tau
    A = [[0, 1, 0], [0, 0, 1], [0, 0, -it]]
    B = [[0, 0], [0, 0], [headway * it, -it]]
    Bw = [[0, 0], [0, 0], [1, 1]]
    return ContinuousPlant(A, B, Bw)


def expm(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("expm input has non-finite entries")
    return kernels.expm(np.ascontiguousarray(M))


def _check_conditioning(A, h):
    if np.linalg.norm(A, 1) * abs(h) > CONDITIONING_LIMIT:
        raise ValueError(f"||A|| * {h:g} exceeds {CONDITIONING_LIMIT:g}; interval is unreasonably long")


def forced_response_integral(A, b, lower: float, upper: float, eval_at: float) -> np.ndarray:
    """int_lower^upper exp(A (eval_at - s)) b ds, exact via an augmented exponential."""
    if lower > upper:
        raise ValueError(f"lower bound {lower} exceeds upper bound {upper}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(A.shape[0], -1)
    _check_conditioning(A, upper - lower)
    _, g = kernels.propagate_pair(np.ascontiguousarray(A), np.ascontiguousarray(b), float(upper - lower))
    if eval_at != upper:
        g = expm(A * (eval_at - upper)) @ g
    return g[:, 0] if g.shape[1] == 1 else g


@dataclass
class StepMatrices:
    A: np.ndarray
    B: np.ndarray
    BJ: np.ndarray
    Bw: np.ndarray
    interval: float


def step_matrices(plant: ContinuousPlant, interval: float, offsets) -> StepMatrices:
    """A_k, B_k and B^J_k for one actuation interval with actuator offsets s^j_k."""
    s = np.asarray(offsets, dtype=float).reshape(-1)
    if s.size != plant.n_inputs:
        raise ValueError(f"expected {plant.n_inputs} actuator offsets, got {s.size}")
    if not interval > 0:
        raise ValueError("actuation interval must be positive")
    for j, sj in enumerate(s):
        if not 0 <= sj < interval:
            raise ValueError(f"actuator {j}: offset {sj:g} outside [0, {interval:g})")
    _check_conditioning(plant.A, interval)
    Ak, Bk, BJk, Bwk = kernels.step_matrices_batch(
        plant.A, plant.B, plant.Bw, np.array([float(interval)]), s[None, :])
    return StepMatrices(Ak[0], Bk[0], BJk[0], Bwk[0], float(interval))


def zoh(plant: ContinuousPlant, period: float) -> tuple[np.ndarray, np.ndarray]:
    sm = step_matrices(plant, period, np.zeros(plant.n_inputs))
    return sm.A, sm.B


def step_exact_update(plant: ContinuousPlant, sm: StepMatrices, x, u, u_prev, w=None) -> np.ndarray:
    """x_{k+1} = A_k x_k + B_k u_k + B^J_k (u_k - u_{k-1}) + B^w_k w_k."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if x.shape != (plant.n,) or u.shape != (plant.n_inputs,) or u_prev.shape != u.shape:
        raise ValueError("state/input dimension mismatch")
    out = sm.A @ x + sm.B @ u + sm.BJ @ (u - u_prev)
    if w is not None:
        w = np.asarray(w, dtype=float)
        if w.shape != (plant.n_disturbances,):
            raise ValueError("disturbance dimension mismatch")
        out = out + sm.Bw @ w
    return out


def jitter_plant_series(sm: StepMatrices):
    """One-step matrices of the series J^u -> G with state (x, u_{k-1}).

    Returns (F, G) such that [x_{k+1}; u_k] = F [x_k; u_{k-1}] + G u_k.
    """
    n, na = sm.B.shape
    F = np.zeros((n + na, n + na))
    F[:n, :n] = sm.A
    F[:n, n:] = -sm.BJ
    G = np.zeros((n + na, na))
    G[:n] = sm.B + sm.BJ
    G[n:] = np.eye(na)
    return F, G
