"""Mean-square stability test of the stochastic closed loop.

The loop is written as x^a_{k+1} = A^a_k x^a_k with i.i.d. draws of A^a_k.
It is mean-square stable when the spectral radius of E{A^a (x) A^a} is below
one; that expectation is estimated by Monte Carlo.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg

from .compensator import FeedbackLaw
from .delays import (DelayDecomposition, DelayLineSystems, FractionalGains, StepDraws,
                     assemble_delayed_measurement)
from .discretize import ContinuousPlant, StepMatrices, step_exact_update

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000          # Kronecker dimension above which ARPACK is used
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3
CHUNK = 256


class MemoryBudgetError(MemoryError):
    pass


class AugmentedClosedLoop:
    """Closed loop of plant, delay registers and feedback law.

    State ordering of x^a_k (documented because every matrix depends on it):

        x_k                                   plant state at a_k       (n)
        u_{k-1}, ..., u_{k-L-1}               applied-input register   (na each)
        x_{k-1}, ..., x_{k-L}                 plant-state register     (n each)
        zeta_k                                feedback-law state       (controller, predictor, filter)

    with L the integer-delay bound.  The reference and disturbance are zero.
    """

    def __init__(self, plant: ContinuousPlant, law: FeedbackLaw, max_delay: int):
        if law.n != plant.n or law.n_inputs != plant.n_inputs:
            raise ValueError("feedback law and plant dimensions differ")
        self.plant = plant
        self.law = law
        self.L = int(max_delay)
        n, na = plant.n, plant.n_inputs
        self.n, self.na = n, na
        self.nz = law.system.order
        o = n
        self.u_blocks = [slice(o + m * na, o + (m + 1) * na) for m in range(self.L + 1)]
        o += (self.L + 1) * na
        self.x_blocks = [slice(o + l * n, o + (l + 1) * n) for l in range(self.L)]
        o += self.L * n
        self.z_block = slice(o, o + self.nz)
        self.dim = o + self.nz
        sysf = law.system
        nr = law.n_refs
        self._Cu, self._Ch = sysf.C[:na], sysf.C[na:]
        self._DuL = sysf.D[:na, nr:]
        self._BfL = sysf.B[:, nr:]

    def layout(self) -> dict:
        return {"x": (0, self.n), "u_register": (self.u_blocks[0].start, self.u_blocks[-1].stop),
                "x_register": (self.x_blocks[0].start, self.x_blocks[-1].stop) if self.L else None,
                "law": (self.z_block.start, self.z_block.stop), "dim": self.dim}

    def _x_lag(self, l):
        return slice(0, self.n) if l == 0 else self.x_blocks[l - 1]

    def measurement_rows(self, draws: StepDraws) -> np.ndarray:
        """(M, ns, dim) map from x^a_k to x^L_k."""
        M, ns = draws.N.shape
        out = np.zeros((M, ns, self.dim))
        for i in range(ns):
            Ni = draws.N[:, i]
            if Ni.max() > self.L:
                raise ValueError(f"integer delay {Ni.max()} exceeds register depth {self.L}")
            for l in np.unique(Ni):
                sel = Ni == l
                out[sel, i, self._x_lag(l)] = draws.E[sel, i, i, :]
                if l == 0:
                    if np.any(draws.Gm[sel, i, i]) or np.any(draws.Gp[sel, i, i]):
                        raise ValueError("zero integer delay with a fractional part")
                    continue
                out[sel, i, self.u_blocks[l - 1]] += draws.Gp[sel, i, i, :]
                out[sel, i, self.u_blocks[l]] += draws.Gm[sel, i, i, :]
        return out

    def matrices(self, draws: StepDraws) -> np.ndarray:
        """One A^a_k per draw, shape (M, dim, dim)."""
        M = len(draws)
        n, na, dim = self.n, self.na, self.dim
        Mx = self.measurement_rows(draws)
        Sz = np.zeros((self.nz, dim))
        Sz[:, self.z_block] = np.eye(self.nz)
        U = self._Cu @ Sz + np.einsum("ij,mjk->mik", self._DuL, Mx)      # u_k rows
        Z = self.law.system.A @ Sz + np.einsum("ij,mjk->mik", self._BfL, Mx)
        Aa = np.zeros((M, dim, dim))
        Aa[:, :n, :n] = draws.A
        Aa[:, :n] += np.einsum("mij,mjk->mik", draws.B + draws.BJ, U)
        Aa[:, :n, self.u_blocks[0]] -= draws.BJ
        Aa[:, self.u_blocks[0]] = U
        for m in range(1, self.L + 1):
            Aa[:, self.u_blocks[m], self.u_blocks[m - 1]] = np.eye(na)
        if self.L:
            Aa[:, self.x_blocks[0], :n] = np.eye(n)
        for l in range(1, self.L):
            Aa[:, self.x_blocks[l], self.x_blocks[l - 1]] = np.eye(n)
        Aa[:, self.z_block] = Z
        return Aa

    def step_reference(self, draws: StepDraws, index: int, xa) -> np.ndarray:
        """One step of the interconnection run through the component state machines."""
        xa = np.asarray(xa, dtype=float)
        n, na = self.n, self.na
        x = xa[:n]
        lines = DelayLineSystems(n, na, max(self.L, 1))
        lines.u_reg.prefill(np.concatenate([xa[b] for b in self.u_blocks]))
        if self.L:
            lines.x_reg.prefill(np.concatenate([xa[b] for b in self.x_blocks]))
        dec = DelayDecomposition(draws.N[index], draws.d[index], np.zeros(0), 0)
        gains = [FractionalGains(draws.Gm[index, i], draws.Gp[index, i], draws.E[index, i])
                 for i in range(draws.N.shape[1])]
        xL = assemble_delayed_measurement(lines, dec, gains, x_now=x)
        z_next, u, _ = self.law.step(xa[self.z_block], np.zeros(self.law.n_refs), xL)
        u_prev = xa[self.u_blocks[0]]
        sm = StepMatrices(draws.A[index], draws.B[index], draws.BJ[index], np.zeros((n, 0)), 0.0)
        x_next = step_exact_update(self.plant, sm, x, u, u_prev)
        lines.step(x, u)
        out = np.empty(self.dim)
        out[:n] = x_next
        us = lines.u_reg.state
        for m, b in enumerate(self.u_blocks):
            out[b] = us[m * na:(m + 1) * na]
        xs = lines.x_reg.state
        for l, b in enumerate(self.x_blocks):
            out[b] = xs[l * n:(l + 1) * n]
        out[self.z_block] = z_next
        return out


def sample_closed_loop_matrix(loop: AugmentedClosedLoop, draws: StepDraws, index: int = 0) -> np.ndarray:
    return loop.matrices(draws.subset(slice(index, index + 1)))[0]


Sampler = Callable[[np.random.Generator, int], np.ndarray]


def matrix_sampler(loop: AugmentedClosedLoop, draw_fn: Callable[[np.random.Generator, int], StepDraws]) -> Sampler:
    def sample(rng, count):
        return loop.matrices(draw_fn(rng, count))
    return sample


def fixed_sampler(matrices, probs=None) -> Sampler:
    """Draws from a finite list of matrices (scalars allowed)."""
    mats = np.array([np.atleast_2d(np.asarray(m, dtype=float)) for m in matrices])
    p = None if probs is None else np.asarray(probs, dtype=float)

    def sample(rng, count):
        return mats[rng.choice(len(mats), size=count, p=p)]
    return sample


def kron_memory_bytes(dim: int) -> int:
    """Peak bytes: the second-moment accumulator, its reordered copy and two half sums."""
    return 4 * dim ** 4 * 8


def _pairwise(parts):
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _to_kron(S, dim):
    # S[(i, j), (k, l)] = E{A_ij A_kl}  ->  E{A (x) A}[(i, k), (j, l)]
    return S.reshape(dim, dim, dim, dim).transpose(0, 2, 1, 3).reshape(dim * dim, dim * dim)


def _second_moment_sums(sampler: Sampler, M: int, rng, chunk: int):
    parts = []
    done = 0
    dim = None
    while done < M:
        c = min(chunk, M - done)
        A = sampler(rng, c)
        dim = A.shape[1]
        X = A.reshape(c, -1)
        parts.append(X.T @ X)
        done += c
    return _pairwise(parts), dim


def estimate_kron_expectation(sampler: Sampler, M: int, seed, dim: int | None = None,
                              memory_budget: int = DEFAULT_MEMORY_BUDGET, chunk: int = CHUNK) -> np.ndarray:
    """Monte-Carlo mean of A (x) A over M draws.

    Pass ``dim`` to have the memory estimate checked before any sampling.
    """
    if M < 1:
        raise ValueError("need at least one sample")
    if dim is not None:
        _check_budget(dim, memory_budget)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    S, dim = _second_moment_sums(sampler, M, rng, chunk)
    return _to_kron(S / M, dim)


def _check_budget(dim, budget):
    need = kron_memory_bytes(dim)
    log.info("Kronecker estimate: dimension %d, about %.1f MB", dim * dim, need / 2 ** 20)
    if need > budget:
        raise MemoryBudgetError(
            f"Kronecker expectation of a {dim}-state loop needs about {need / 2 ** 30:.2f} GiB, "
            f"over the budget of {budget / 2 ** 30:.2f} GiB")


def leading_eigenvalues(K: np.ndarray, count: int = 64) -> np.ndarray:
    """Largest-magnitude eigenvalues, sorted by decreasing modulus."""
    N = K.shape[0]
    if N <= DENSE_LIMIT or count >= N - 2:
        ev = np.linalg.eigvals(K)
    else:
        try:
            ev = scipy.sparse.linalg.eigs(K, k=min(count, N - 2), which="LM",
                                          ncv=min(N, max(2 * count + 1, 40)), tol=1e-12,
                                          return_eigenvectors=False)
        except scipy.sparse.linalg.ArpackError as exc:
            raise RuntimeError(f"eigensolver failed: {exc}") from exc
    ev = np.asarray(ev, dtype=complex)
    return ev[np.argsort(-np.abs(ev), kind="stable")][: max(count, 1)]


@dataclass
class StabilityVerdict:
    spectral_radius: float
    eigenvalues: np.ndarray
    samples: int
    verdict: str
    split_radii: tuple[float, float]
    standard_error: float
    borderline: bool
    converged: bool
    dim: int
    runtime_s: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def stable(self) -> bool:
        return self.verdict == "MSS-stable"

    def to_dict(self) -> dict:
        return {
            "spectral_radius": self.spectral_radius,
            "verdict": self.verdict,
            "samples": self.samples,
            "split_half_radii": list(self.split_radii),
            "standard_error": self.standard_error,
            "borderline": self.borderline,
            "converged": self.converged,
            "state_dimension": self.dim,
            "kronecker_dimension": self.dim ** 2,
            "runtime_s": self.runtime_s,
            "eigenvalues": [[float(e.real), float(e.imag)] for e in self.eigenvalues],
            "notes": list(self.notes),
        }


def mss_test(sampler: Sampler, M: int, seed, dim: int | None = None,
             memory_budget: int = DEFAULT_MEMORY_BUDGET, n_eigs: int = 64,
             split_tol: float = 0.01) -> StabilityVerdict:
    """Spectral radius of the estimated E{A (x) A} with a split-half convergence check."""
    if M < 2:
        raise ValueError("need at least two samples for the split-half check")
    t0 = time.perf_counter()
    if dim is not None:
        _check_budget(dim, memory_budget)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h = M // 2
    S1, dim = _second_moment_sums(sampler, h, rng, CHUNK)
    S2, _ = _second_moment_sums(sampler, M - h, rng, CHUNK)
    K = _to_kron((S1 + S2) / M, dim)
    ev = leading_eigenvalues(K, n_eigs)
    rho = float(np.abs(ev[0]))
    r1 = float(np.abs(leading_eigenvalues(_to_kron(S1 / h, dim), 1)[0]))
    r2 = float(np.abs(leading_eigenvalues(_to_kron(S2 / (M - h), dim), 1)[0]))
    se = abs(r1 - r2) / 2
    borderline = abs(rho - 1.0) <= 2 * se
    verdict = "MSS-stable" if rho < 1 and not borderline else "not-certified"
    notes = []
    if borderline:
        notes.append("radius within two standard errors of one")
    converged = abs(r1 - r2) < split_tol
    if not converged:
        notes.append(f"split-half radii differ by {abs(r1 - r2):.3g} (gate {split_tol})")
    return StabilityVerdict(rho, ev, M, verdict, (r1, r2), se, bool(borderline), bool(converged),
                            dim, time.perf_counter() - t0, notes)
