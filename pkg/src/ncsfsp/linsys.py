"""Discrete-time LTI helpers: realizations, transfer matrices, minimal realization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

MINREAL_TOL = 1e-8


@dataclass
class StateSpace:
    """x+ = A x + B u, y = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.A.size == 0:
            self.A = np.zeros((0, 0))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = self.D.shape
        self.B = np.asarray(self.B, dtype=float).reshape(n, m)
        self.C = np.asarray(self.C, dtype=float).reshape(p, n)

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.D.shape

    def evaluate(self, z: complex) -> np.ndarray:
        n = self.order
        if n == 0:
            return self.D.astype(complex)
        return self.C @ np.linalg.solve(z * np.eye(n) - self.A, self.B) + self.D

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A) if self.order else np.zeros(0, dtype=complex)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.poles()), initial=0.0))

    def simulate(self, u, x0=None) -> np.ndarray:
        """Output sequence for an input sequence u (steps x inputs)."""
        u = np.asarray(u, dtype=float).reshape(len(u), -1)
        x = np.zeros(self.order) if x0 is None else np.asarray(x0, dtype=float)
        y = np.empty((len(u), self.D.shape[0]))
        for k, uk in enumerate(u):
            y[k] = self.C @ x + self.D @ uk
            x = self.A @ x + self.B @ uk
        return y

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "ABCD"}

    @classmethod
    def from_dict(cls, d: dict) -> StateSpace:
        D = np.atleast_2d(np.asarray(d["D"], dtype=float))
        n = len(d["A"])
        return cls(np.asarray(d["A"], dtype=float).reshape(n, n),
                   np.asarray(d["B"], dtype=float).reshape(n, D.shape[1]),
                   np.asarray(d["C"], dtype=float).reshape(D.shape[0], n), D)


@dataclass
class RationalTransferMatrix:
    """Entry (r, c) is num[r][c](z) / den(z); coefficients highest power first.

    All entries share the monic characteristic polynomial of the realization
    they came from; common factors are never cancelled implicitly.
    """

    num: np.ndarray  # (p, m, deg + 1)
    den: np.ndarray  # (deg + 1,)

    def __post_init__(self):
        self.num = np.asarray(self.num, dtype=float)
        self.den = np.asarray(self.den, dtype=float)
        if self.den[0] != 1.0:
            lead = self.den[0]
            if lead == 0:
                raise ValueError("denominator leading coefficient is zero")
            self.den = self.den / lead
            self.num = self.num / lead

    @property
    def shape(self) -> tuple[int, int]:
        return self.num.shape[:2]

    def evaluate(self, z: complex) -> np.ndarray:
        return np.polyval(np.moveaxis(self.num, -1, 0), z) / np.polyval(self.den, z)

    def poles(self) -> np.ndarray:
        return np.roots(self.den) if len(self.den) > 1 else np.zeros(0, dtype=complex)

    def entry(self, r: int, c: int, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        """Entry (r, c) with numerator leading zeros dropped."""
        b = np.trim_zeros(np.where(np.abs(self.num[r, c]) > tol * max(1.0, np.abs(self.num[r, c]).max()),
                                   self.num[r, c], 0.0), "f")
        return (b if b.size else np.zeros(1)), self.den.copy()

    def to_dict(self) -> dict:
        return {"num": self.num.tolist(), "den": self.den.tolist()}


def ss_to_tf(sys: StateSpace) -> RationalTransferMatrix:
    """Per entry: C_r adj(zI - A) B_c + D_rc det(zI - A), via det(zI - A + B_c C_r)."""
    n = sys.order
    p, m = sys.shape
    den = np.poly(sys.A) if n else np.ones(1)
    num = np.zeros((p, m, n + 1))
    for r in range(p):
        for c in range(m):
            if n:
                # det(zI - A + b c^T) = det(zI - A) (1 + c^T (zI - A)^-1 b)
                num[r, c] = np.poly(sys.A - np.outer(sys.B[:, c], sys.C[r])) - den + sys.D[r, c] * den
            else:
                num[r, c] = sys.D[r, c]
    return RationalTransferMatrix(num, den)


def _reachable_staircase(A, B, tol):
    """Orthogonal T and size nr with T^T A T block upper triangular and the first nr coordinates reachable."""
    n = A.shape[0]
    T = np.eye(n)
    A1 = A.copy()
    Z = B.copy()
    nr = 0
    while nr < n:
        if Z.size == 0:
            break
        U, s, _ = np.linalg.svd(Z, full_matrices=True)
        r = int(np.sum(s > tol))
        if r == 0:
            break
        W = np.eye(n)
        W[nr:, nr:] = U
        A1 = W.T @ A1 @ W
        T = T @ W
        Z = A1[nr + r:, nr:nr + r]
        nr += r
    return T, nr


def minreal(sys: StateSpace, tol: float = MINREAL_TOL) -> StateSpace:
    """Drop unreachable, then unobservable, modes (orthogonal staircase reduction).

    ``tol`` is relative to the largest of ||A||, ||B||, ||C||.
    """
    if sys.order == 0:
        return sys
    scale = max(np.linalg.norm(sys.A, 2), np.linalg.norm(sys.B, 2), np.linalg.norm(sys.C, 2), 1e-300)
    atol = tol * scale
    T1, nr = _reachable_staircase(sys.A, sys.B, atol)
    A = (T1.T @ sys.A @ T1)[:nr, :nr]
    B = (T1.T @ sys.B)[:nr]
    C = (sys.C @ T1)[:, :nr]
    if nr == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, B.shape[1])), np.zeros((C.shape[0], 0)), sys.D)
    T2, no = _reachable_staircase(A.T, C.T, atol)
    return StateSpace((T2.T @ A @ T2)[:no, :no], (T2.T @ B)[:no], (C @ T2)[:, :no], sys.D.copy())


def deflate_modes(sys: StateSpace, select, tol: float = MINREAL_TOL) -> tuple[StateSpace, dict]:
    """Remove the eigenvalues picked by ``select(lam) -> bool`` if they are unobservable or unreachable.

    An ordered real Schur form isolates the selected invariant subspace; it is
    dropped when its coupling to the output (or from the input) is below
    ``tol`` relative to the system scale.  Raises ValueError otherwise.
    """
    A = sys.A
    n = sys.order
    if n == 0:
        return sys, {"removed": 0, "leak": 0.0}
    scale = max(np.linalg.norm(A, 2), np.linalg.norm(sys.B, 2), np.linalg.norm(sys.C, 2), 1e-300)

    def pick(re, im):
        return bool(select(complex(re, im)))

    T, Z, sdim = scipy.linalg.schur(A, output="real", sort=pick)
    if sdim == 0:
        return sys, {"removed": 0, "leak": 0.0}
    leak_out = np.linalg.norm(sys.C @ Z[:, :sdim], 2) / scale
    if leak_out <= tol:
        Z2 = Z[:, sdim:]
        red = StateSpace(T[sdim:, sdim:], Z2.T @ sys.B, sys.C @ Z2, sys.D.copy())
        return red, {"removed": int(sdim), "leak": float(leak_out), "kind": "unobservable"}
    T, Z, sdim2 = scipy.linalg.schur(A, output="real", sort=lambda re, im: not pick(re, im))
    keep = sdim2
    leak_in = np.linalg.norm(Z[:, keep:].T @ sys.B, 2) / scale
    if leak_in <= tol:
        Z1 = Z[:, :keep]
        red = StateSpace(T[:keep, :keep], Z1.T @ sys.B, sys.C @ Z1, sys.D.copy())
        return red, {"removed": int(n - keep), "leak": float(leak_in), "kind": "unreachable"}
    raise ValueError(f"selected modes are reachable (leak {leak_in:.3g}) and observable (leak {leak_out:.3g})")
