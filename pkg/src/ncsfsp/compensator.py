"""Primary controller, expected-value models, prediction-error filter and predictor.

Conventions (n states, na inputs, nr references, nc integrator states):

    x^c_{k+1} = A^c x^c_k + B^c (B^r r_k - x_k)
    u_k       = -K^c x^c_k + K^x (B^r r_k - x_k)

and the predictor feeds the controller with

    xhat_k = xbar_k + F (x^L_k - L^x xbar_k - L^u u_k)

where xbar is the delay-free expected model driven by u.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

from .delays import WarmupError, sample_step_draws
from .discretize import ContinuousPlant, zoh
from .linsys import MINREAL_TOL, StateSpace, deflate_modes, minreal
from .timing import TimingConfig, max_integer_delay

log = logging.getLogger(__name__)

MODES = ("none", "fsp", "3sfsp", "ideal")
UNSTABLE_MARGIN = 1e-6
CLUSTER_TOL = 1e-5
SNAP_EXTRA = 1e-2
CONTOUR_POINTS = 128
RESIDUAL_LIMIT = 1e-6


class DesignError(RuntimeError):
    """A design step could not produce a certified result."""


# ---------------------------------------------------------------- controller

@dataclass
class PrimaryController:
    Ac: np.ndarray
    Bc: np.ndarray  # (nc, n)
    Kc: np.ndarray  # (na, nc)
    Kx: np.ndarray  # (na, n)
    Br: np.ndarray  # (n, nr)

    def __post_init__(self):
        self.Ac = _square(self.Ac)
        nc = self.Ac.shape[0]
        self.Kx = np.atleast_2d(np.asarray(self.Kx, dtype=float))
        na, n = self.Kx.shape
        self.Bc = np.asarray(self.Bc, dtype=float).reshape(nc, n)
        self.Kc = np.asarray(self.Kc, dtype=float).reshape(na, nc)
        self.Br = np.asarray(self.Br, dtype=float).reshape(n, -1)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n, na, nr, nc)."""
        return self.Kx.shape[1], self.Kx.shape[0], self.Br.shape[1], self.Ac.shape[0]

    def closed_loop(self, Ad, Bd) -> np.ndarray:
        """Delay-free loop matrix on [x^c; x]."""
        return np.block([[self.Ac, -self.Bc], [-Bd @ self.Kc, Ad - Bd @ self.Kx]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("Ac", "Bc", "Kc", "Kx", "Br")}

    @classmethod
    def from_dict(cls, d: dict) -> PrimaryController:
        return cls(d["Ac"], d["Bc"], d["Kc"], d["Kx"], d["Br"])


def _square(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.zeros((0, 0)) if M.size == 0 else np.atleast_2d(M)


def dlqr(A, B, Q, R) -> np.ndarray:
    """Infinite-horizon discrete LQR gain K for u = -K x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = _weight(Q, A.shape[0])
    R = _weight(R, B.shape[1])
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12:
        raise DesignError("Q must be positive semidefinite")
    if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
        raise DesignError("R must be positive definite")
    try:
        P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DesignError(f"Riccati solver failed: {exc}") from exc
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A - B @ K)))
    if not rho < 1:
        raise DesignError(f"LQR closed loop not Schur stable (spectral radius {rho:.6g})")
    return K


def _weight(W, size):
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        return W * np.eye(size)
    return W.reshape(size, size)


def design_lqr(Ad, Bd, Ac, Bc, Q, R) -> tuple[np.ndarray, np.ndarray]:
    """Gains (K^c, K^x) for the integrator-augmented pair, integrator stacked on top."""
    Ac = _square(Ac)
    nc, n = Ac.shape[0], np.shape(Ad)[0]
    Bc = np.asarray(Bc, dtype=float).reshape(nc, n)
    Bd = np.asarray(Bd, dtype=float).reshape(n, -1)
    Aa = np.block([[Ac, -Bc], [np.zeros((n, nc)), Ad]])
    Ba = np.vstack([np.zeros((nc, Bd.shape[1])), Bd])
    K = dlqr(Aa, Ba, Q, R)
    return K[:, :nc], K[:, nc:]


# ------------------------------------------------------------ expected models

@dataclass
class ExpectedModels:
    """Expected one-step dynamics and delay-line output weights.

    ``Wx[l]`` multiplies x_{k-l} and ``Wu[m]`` multiplies u_{k-m} in the
    expected delayed measurement, so L^x(z) = sum_l Wx[l] z^-l and
    L^u(z) = sum_m Wu[m] z^-m.
    """

    A: np.ndarray
    B: np.ndarray
    BJ: np.ndarray
    Wx: np.ndarray  # (L + 1, n, n)
    Wu: np.ndarray  # (L + 2, n, na)
    samples: int = 1
    stderr: dict = field(default_factory=dict)
    delay_pmf: np.ndarray | None = None  # (ns, L + 1)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def max_delay(self) -> int:
        return self.Wx.shape[0] - 1

    def plant_series(self) -> StateSpace:
        """G J^u: u -> xbar, state [xbar; u_{k-1}]."""
        n, na = self.n, self.n_inputs
        A = np.block([[self.A, -self.BJ], [np.zeros((na, n)), np.zeros((na, na))]])
        B = np.vstack([self.B + self.BJ, np.eye(na)])
        C = np.hstack([np.eye(n), np.zeros((n, na))])
        return StateSpace(A, B, C, np.zeros((n, na)))

    def H(self, z) -> np.ndarray:
        n = self.n
        rhs = self.B + self.BJ - self.BJ / z
        return np.linalg.solve(z * np.eye(n) - self.A, rhs)

    def Lx(self, z) -> np.ndarray:
        return np.tensordot(z ** -np.arange(self.Wx.shape[0], dtype=float), self.Wx, axes=1)

    def Lu(self, z) -> np.ndarray:
        return np.tensordot(z ** -np.arange(self.Wu.shape[0], dtype=float), self.Wu, axes=1)

    def P(self, z) -> np.ndarray:
        return self.Lx(z) @ self.H(z)

    def singularities(self) -> np.ndarray:
        return np.append(np.linalg.eigvals(self.A), 0.0)

    def to_dict(self) -> dict:
        out = {"A": self.A.tolist(), "B": self.B.tolist(), "BJ": self.BJ.tolist(),
               "Wx": self.Wx.tolist(), "Wu": self.Wu.tolist(), "samples": self.samples}
        if self.stderr:
            out["stderr"] = {k: np.asarray(v).tolist() for k, v in self.stderr.items()}
        if self.delay_pmf is not None:
            out["delay_pmf"] = self.delay_pmf.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ExpectedModels:
        return cls(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float),
                   np.array(d["BJ"], dtype=float), np.array(d["Wx"], dtype=float),
                   np.array(d["Wu"], dtype=float), int(d.get("samples", 1)),
                   {k: np.array(v) for k, v in d.get("stderr", {}).items()},
                   None if d.get("delay_pmf") is None else np.array(d["delay_pmf"]))


def _mean_se(X):
    M = X.shape[0]
    mean = X.mean(axis=0)
    se = X.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(mean)
    return mean, se


def estimate_expected_models(plant: ContinuousPlant, timing: TimingConfig, samples: int,
                             seed: int | np.random.Generator, max_delay: int | None = None,
                             ) -> ExpectedModels:
    """Entrywise Monte-Carlo means over independent timing draws.

    Every draw is a fresh short trace (new offsets); the statistics are read
    at a step late enough that the whole delay window lies inside the trace.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L = max_integer_delay(timing) if max_delay is None else int(max_delay)
    try:
        dr = sample_step_draws(plant, timing, samples, rng, L)
    except WarmupError as exc:
        raise DesignError(str(exc)) from exc
    Ak, Bk, BJk, N, E, Gm, Gp = dr.A, dr.B, dr.BJ, dr.N, dr.E, dr.Gm, dr.Gp
    M, ns = N.shape
    n, na = plant.n, plant.n_inputs
    if ns != n:
        raise DesignError("the delay model assumes one sensor per state")
    Xs = np.zeros((M, L + 1, n, n))
    Us = np.zeros((M, L + 2, n, na))
    rows = np.arange(M)
    for i in range(ns):
        Xs[rows, N[:, i], i, :] = E[:, i, i, :]
        Us[rows, N[:, i], i, :] += Gp[:, i, i, :]
        Us[rows, N[:, i] + 1, i, :] += Gm[:, i, i, :]
    mA, sA = _mean_se(Ak)
    mB, sB = _mean_se(Bk)
    mJ, sJ = _mean_se(BJk)
    mX, sX = _mean_se(Xs)
    mU, sU = _mean_se(Us)
    pmf = np.stack([np.bincount(N[:, i], minlength=L + 1) / M for i in range(ns)])
    return ExpectedModels(mA, mB, mJ, mX, mU, M,
                          {"A": sA, "B": sB, "BJ": sJ, "Wx": sX, "Wu": sU}, pmf)


def deterministic_models(plant: ContinuousPlant, period: float, delay_steps: int) -> ExpectedModels:
    """Classical FSP model: ZOH plant and a pure delay of ``delay_steps`` periods."""
    if delay_steps < 0:
        raise ValueError("delay must be non-negative")
    Ad, Bd = zoh(plant, period)
    n, na = plant.n, plant.n_inputs
    Wx = np.zeros((delay_steps + 1, n, n))
    Wx[delay_steps] = np.eye(n)
    return ExpectedModels(Ad, Bd, np.zeros((n, na)), Wx, np.zeros((delay_steps + 2, n, na)))


# ------------------------------------------------------------------- filter

@dataclass
class FilterDesign:
    """Diagonal filter, F_nn(z) = num_n(z) / (z - alpha)^q_n.

    ``numerators[n]`` holds coefficients highest power first.
    """

    alpha: float
    numerators: list
    powers: list
    targets: list = field(default_factory=list)  # [(pole, multiplicity)]
    diagnostics: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.numerators)

    def entry(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.numerators[n], dtype=float), np.atleast_1d(np.poly(np.full(self.powers[n], self.alpha)))

    def evaluate(self, z) -> np.ndarray:
        vals = []
        for n in range(self.size):
            num, den = self.entry(n)
            vals.append(np.polyval(num, z) / np.polyval(den, z))
        return np.diag(vals)

    def dc_gains(self) -> np.ndarray:
        return np.real(np.diag(self.evaluate(1.0)))

    def state_space(self) -> StateSpace:
        """Block-diagonal controllable-canonical realization."""
        blocks = [_siso_realization(*self.entry(n)) for n in range(self.size)]
        nx = sum(b.order for b in blocks)
        A = np.zeros((nx, nx))
        B = np.zeros((nx, self.size))
        C = np.zeros((self.size, nx))
        D = np.zeros((self.size, self.size))
        o = 0
        for n, b in enumerate(blocks):
            q = b.order
            A[o:o + q, o:o + q] = b.A
            B[o:o + q, n] = b.B[:, 0]
            C[n, o:o + q] = b.C[0]
            D[n, n] = b.D[0, 0]
            o += q
        return StateSpace(A, B, C, D)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "numerators": [np.asarray(b).tolist() for b in self.numerators],
            "powers": list(self.powers),
            "targets": [[_cplx(p), int(mu)] for p, mu in self.targets],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FilterDesign:
        targets = [(_uncplx(p), int(mu)) for p, mu in d.get("targets", [])]
        return cls(float(d["alpha"]), [np.array(b, dtype=float) for b in d["numerators"]],
                   [int(q) for q in d["powers"]], targets, d.get("diagnostics", {}))


def _cplx(p):
    p = complex(p)
    return p.real if p.imag == 0 else [p.real, p.imag]


def _uncplx(p):
    return complex(p[0], p[1]) if isinstance(p, (list, tuple)) else float(p)


def _siso_realization(num, den) -> StateSpace:
    den = np.asarray(den, dtype=float)
    q = len(den) - 1
    num = np.asarray(num, dtype=float)
    if len(num) > q + 1:
        raise DesignError("filter entry is improper")
    b = np.concatenate([np.zeros(q + 1 - len(num)), num])
    d0 = b[0]
    bt = b - d0 * den
    if q == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[d0]])
    A = np.zeros((q, q))
    A[0] = -den[1:]
    A[1:, :-1] = np.eye(q - 1)
    B = np.zeros((q, 1))
    B[0, 0] = 1.0
    return StateSpace(A, B, bt[1:].reshape(1, q), [[d0]])


def _cluster(values, tol=CLUSTER_TOL):
    """Group nearly equal complex numbers: [(center, count)], upper half plane only."""
    vals = sorted(np.asarray(values, dtype=complex), key=lambda v: (v.real, v.imag))
    groups: list[list[complex]] = []
    for v in vals:
        for g in groups:
            if abs(np.mean(g) - v) <= tol * max(1.0, abs(v)):
                g.append(v)
                break
        else:
            groups.append([v])
    out = []
    for g in groups:
        c = complex(np.mean(g))
        if abs(c.imag) <= tol * max(1.0, abs(c)):
            c = complex(c.real, 0.0)
        elif c.imag < 0:
            continue  # the conjugate carries the same real equations
        out.append((c, len(g)))
    return out


def cancellation_targets(model_poles, extras=(), margin=UNSTABLE_MARGIN, snap=SNAP_EXTRA):
    """Unstable model poles plus configured extras snapped onto model poles.

    Returns (targets, report) where report documents every extra.
    """
    poles = np.asarray(model_poles, dtype=complex)
    clusters = _cluster(poles)
    chosen = [(p, mu) for p, mu in clusters if abs(p) >= 1 - margin]
    report = []
    for x in extras:
        x = complex(x)
        dist = np.abs(np.array([p for p, _ in clusters]) - x)
        j = int(np.argmin(dist))
        p, mu = clusters[j]
        entry = {"requested": _cplx(x), "nearest_model_pole": _cplx(p), "distance": float(dist[j])}
        if dist[j] > snap:
            entry["status"] = "rejected: no model pole within snap distance"
            report.append(entry)
            raise DesignError(f"extra cancellation target {x} is {dist[j]:.3g} away from every model pole "
                              f"(nearest {p:.6g}); check its sign and value")
        entry["status"] = "matched"
        report.append(entry)
        if all(abs(p - c) > 0 for c, _ in chosen):
            chosen.append((p, mu))
    return chosen, report


def _contour(p, radius, Q=CONTOUR_POINTS):
    w = radius * np.exp(2j * np.pi * np.arange(Q) / Q)
    return p + w, w


def laurent_coefficients(f, p, radius, orders, Q=CONTOUR_POINTS):
    """Coefficients c_j of (z - p)^j for j in ``orders`` by the trapezoidal rule on a circle."""
    z, w = _contour(p, radius, Q)
    vals = np.array([f(zq) for zq in z])
    out = {}
    for j in orders:
        weight = w ** (-j)
        out[j] = np.tensordot(weight, vals, axes=1) / Q
    return out


def _contour_radius(p, singular, alpha):
    others = [s for s in np.append(np.asarray(singular, dtype=complex), [alpha, 0.0])
              if abs(s - p) > CLUSTER_TOL * max(1.0, abs(p))]
    gap = min((abs(s - p) for s in others), default=1.0)
    return min(0.1, 0.5 * gap)


def _filter_gram(alpha, deg, q, length=None):
    """Gram matrix of the impulse responses of z^l / (z - alpha)^q, l = 0..deg."""
    if length is None:
        length = q + int(np.ceil(np.log(1e-18) / np.log(max(alpha, 1e-3)))) + 20 * q
    imp = np.zeros(length)
    imp[0] = 1.0
    den = np.poly(np.full(q, alpha))
    g = scipy.signal.lfilter([1.0], den, imp)
    Hm = np.zeros((deg + 1, length))
    for l in range(deg + 1):
        s = q - l
        Hm[l, s:] = g[: length - s]
    return Hm @ Hm.T


def _h2_refine(sol, Ar, rank, alpha, deg, q):
    """Move along the null space of the constraints to the least-energy filter entry."""
    _, _, Vt = np.linalg.svd(Ar)
    Nn = Vt[rank:].T
    G = _filter_gram(alpha, deg, q)
    y, *_ = np.linalg.lstsq(Nn.T @ G @ Nn, -(Nn.T @ G @ sol), rcond=None)
    return sol + Nn @ y


def design_filter(H, P, alpha: float, orders, targets, singularities,
                  n_points: int = CONTOUR_POINTS, dof_policy: str = "min-norm") -> FilterDesign:
    """Solve for the numerators of a diagonal filter.

    ``H`` and ``P`` are callables z -> (n, m) complex matrices, ``orders`` a
    list of (numerator degree, pole power) per row, ``targets`` a list of
    (pole, multiplicity) whose principal parts must vanish in every entry of
    S = H - F P.  F_nn(1) = 1 is always imposed.  Underdetermined systems
    take the minimum-norm solution.
    """
    if not 0 <= alpha < 1:
        raise DesignError(f"filter pole alpha={alpha} must lie in [0, 1)")
    n_rows = len(orders)
    numerators, diag = [], {"rows": []}
    radii = {complex(p): _contour_radius(complex(p), singularities, alpha) for p, _ in targets}
    coeff = {}
    for p, mu in targets:
        p = complex(p)
        r = radii[p]
        neg = list(range(-mu, 0))
        coeff[p] = (laurent_coefficients(H, p, r, neg, n_points), laurent_coefficients(P, p, r, neg, n_points))
    for n, (deg, q) in enumerate(orders):
        if deg > q:
            raise DesignError(f"row {n}: numerator degree {deg} exceeds pole power {q}")
        rows, rhs = [], []
        for p, mu in targets:
            p = complex(p)
            Hc, Pc = coeff[p]
            # Taylor coefficients of z^l / (z - alpha)^q at p
            basis = laurent_coefficients(
                lambda z: np.array([z ** l for l in range(deg + 1)]) / (z - alpha) ** q,
                p, radii[p], range(mu), n_points)
            for k in range(1, mu + 1):
                m_count = Hc[-k].shape[1]
                for m in range(m_count):
                    row = np.zeros(deg + 1, dtype=complex)
                    for t in range(0, mu - k + 1):
                        row += basis[t] * Pc[-k - t][n, m]
                    rows.append(row)
                    rhs.append(Hc[-k][n, m])
        rows.append((1.0 / (1.0 - alpha) ** q) * np.ones(deg + 1, dtype=complex))
        rhs.append(1.0)
        Ac = np.array(rows)
        bc = np.array(rhs)
        Ar = np.vstack([Ac.real, Ac.imag])
        br = np.concatenate([bc.real, bc.imag])
        norms = np.linalg.norm(Ar, axis=1)
        big = max(norms.max(), 1e-300)
        keep = norms > 1e-12 * big
        if np.any(np.abs(br[~keep]) > 1e-10 * max(1.0, np.abs(br).max())):
            raise DesignError(f"row {n}: a cancellation condition cannot be influenced by the filter")
        Ar, br = Ar[keep] / norms[keep, None], br[keep] / norms[keep]
        sv = np.linalg.svd(Ar, compute_uv=False)
        rank = int(np.sum(sv > 1e-10 * sv[0]))
        cond = float(sv[0] / sv[rank - 1])
        sol, *_ = np.linalg.lstsq(Ar, br, rcond=1e-10)
        if dof_policy == "h2" and rank < deg + 1:
            sol = _h2_refine(sol, Ar, rank, alpha, deg, q)
        resid = float(np.max(np.abs(Ar @ sol - br)))
        info = {"constraints": int(Ar.shape[0]), "rank": rank, "unknowns": deg + 1,
                "condition": cond, "residual": resid}
        diag["rows"].append(info)
        if resid > RESIDUAL_LIMIT:
            raise DesignError(
                f"row {n}: interpolation system inconsistent (residual {resid:.3g}, rank {rank} "
                f"for {deg + 1} coefficients); raise the numerator degree of this filter entry")
        if cond > 1e12:
            raise DesignError(f"row {n}: interpolation system ill-conditioned (cond {cond:.3g}); "
                              "raise the numerator degree or move alpha")
        numerators.append(sol[::-1].copy())
    filt = FilterDesign(float(alpha), numerators, [q for _, q in orders],
                        [(complex(p), int(mu)) for p, mu in targets], diag)
    if n_rows:
        filt.diagnostics["residues"] = principal_residues(H, P, filt, singularities, n_points)
        filt.diagnostics["max_residue"] = max((r["max_abs"] for r in filt.diagnostics["residues"]), default=0.0)
        filt.diagnostics["dc_gain_error"] = float(np.max(np.abs(filt.dc_gains() - 1.0)))
    return filt


def principal_residues(H, P, filt: FilterDesign, singularities, n_points=CONTOUR_POINTS) -> list[dict]:
    """Largest principal-part coefficient of S = H - F P at every target."""
    out = []

    def S(z):
        return H(z) - filt.evaluate(z) @ P(z)

    for p, mu in filt.targets:
        r = _contour_radius(complex(p), singularities, filt.alpha)
        c = laurent_coefficients(S, complex(p), r, range(-mu, 0), n_points)
        out.append({"pole": _cplx(p), "multiplicity": int(mu),
                    "max_abs": float(max(np.max(np.abs(v)) for v in c.values()))})
    return out


# ---------------------------------------------------------------- predictor

@dataclass
class CompensatorRealization:
    """Reduced predictor with inputs [u; x^L] and output xhat."""

    predictor: StateSpace
    full_order: int
    filter: FilterDesign
    models: ExpectedModels
    diagnostics: dict = field(default_factory=dict)

    @property
    def spectral_radius(self) -> float:
        return self.predictor.spectral_radius()

    def to_dict(self) -> dict:
        return {"predictor": self.predictor.to_dict(), "full_order": self.full_order,
                "filter": self.filter.to_dict(), "models": self.models.to_dict(),
                "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> CompensatorRealization:
        return cls(StateSpace.from_dict(d["predictor"]), int(d["full_order"]),
                   FilterDesign.from_dict(d["filter"]), ExpectedModels.from_dict(d["models"]),
                   d.get("diagnostics", {}))


def predictor_structure(models: ExpectedModels, filt: FilterDesign) -> StateSpace:
    """Unreduced predictor: state [xbar; u lags; xbar lags; filter].

    xhat = xbar + F (x^L - sum_l Wx[l] xbar_{k-l} - sum_m Wu[m] u_{k-m}).
    """
    n, na = models.n, models.n_inputs
    Lx = models.Wx.shape[0] - 1
    Lu = max(models.Wu.shape[0] - 1, 1)
    Fs = filt.state_space()
    if Fs.shape != (n, n):
        raise DesignError(f"filter is {Fs.shape}, expected {(n, n)}")
    nf = Fs.order
    ix = slice(0, n)
    iu = [slice(n + (m - 1) * na, n + m * na) for m in range(1, Lu + 1)]
    o = n + Lu * na
    ixl = [slice(o + (l - 1) * n, o + l * n) for l in range(1, Lx + 1)]
    o += Lx * n
    iflt = slice(o, o + nf)
    N = o + nf
    nin = na + n
    # prediction error e = Ce xi + Deu u + DeL xL
    Ce = np.zeros((n, N))
    Ce[:, ix] -= models.Wx[0]
    for l in range(1, Lx + 1):
        Ce[:, ixl[l - 1]] -= models.Wx[l]
    Deu = -models.Wu[0]
    for m in range(1, models.Wu.shape[0]):
        Ce[:, iu[m - 1]] -= models.Wu[m]
    De = np.hstack([Deu, np.eye(n)])
    A = np.zeros((N, N))
    B = np.zeros((N, nin))
    A[ix, ix] = models.A
    B[ix, :na] = models.B + models.BJ
    A[ix, iu[0]] = -models.BJ
    B[iu[0], :na] = np.eye(na)
    for m in range(1, Lu):
        A[iu[m], iu[m - 1]] = np.eye(na)
    if Lx:
        A[ixl[0], ix] = np.eye(n)
    for l in range(1, Lx):
        A[ixl[l], ixl[l - 1]] = np.eye(n)
    A[iflt, iflt] = Fs.A
    A[iflt] += Fs.B @ Ce
    B[iflt] = Fs.B @ De
    C = Fs.D @ Ce
    C[:, ix] += np.eye(n)
    C[:, iflt] += Fs.C
    D = Fs.D @ De
    return StateSpace(A, B, C, D)


def build_predictor(models: ExpectedModels, filt: FilterDesign, tol: float = MINREAL_TOL,
                    seed: int = 0) -> CompensatorRealization:
    full = predictor_structure(models, filt)
    targets = [complex(p) for p, _ in filt.targets]

    def cancelled(lam):
        near = any(abs(lam - p) <= CLUSTER_TOL * max(1.0, abs(p)) or
                   abs(lam - p.conjugate()) <= CLUSTER_TOL * max(1.0, abs(p)) for p in targets)
        return near or abs(lam) >= 1 - UNSTABLE_MARGIN

    # The cancelled modes are split off first through an ordered Schur form;
    # a plain staircase pass can miss a cancelled Jordan block at rank tolerance.
    try:
        defl, dinfo = deflate_modes(full, cancelled, tol)
    except ValueError as exc:
        raise DesignError(f"cancelled modes are still visible in the predictor: {exc}; "
                          "the filter does not remove them (add a target or raise the numerator degree)"
                          ) from exc
    red = minreal(defl, tol)
    rho = red.spectral_radius()
    rng = np.random.default_rng(seed)
    zs = 1.5 * np.exp(2j * np.pi * rng.random(20))
    io_full = max(float(np.max(np.abs(red.evaluate(z) - full.evaluate(z)))) for z in zs)
    # closed-form check: u -> xhat is S - F L^u, x^L -> xhat is F
    na = models.n_inputs
    io_formula = 0.0
    for z in zs:
        F = filt.evaluate(z)
        Gu = models.H(z) - F @ models.P(z) - F @ models.Lu(z)
        G = red.evaluate(z)
        io_formula = max(io_formula, float(np.max(np.abs(G[:, :na] - Gu))),
                         float(np.max(np.abs(G[:, na:] - F))))
    diag = {"full_order": full.order, "deflated_modes": dinfo["removed"],
            "deflation_leak": dinfo["leak"], "reduced_order": red.order, "spectral_radius": rho,
            "io_error_vs_full": io_full, "io_error_vs_formula": io_formula}
    log.info("predictor reduced from %d to %d states, spectral radius %.6f",
             full.order, red.order, rho)
    if not rho < 1 - UNSTABLE_MARGIN:
        raise DesignError(
            f"predictor keeps a mode with |z| = {rho:.6g} after reduction; the filter does not "
            "cancel every unstable model pole (add a target or raise the numerator degree)")
    scale = max(1.0, max(float(np.max(np.abs(full.evaluate(z)))) for z in zs))
    if io_full > 1e-7 * scale or io_formula > 1e-7 * scale:
        raise DesignError(f"reduced predictor deviates from the design (io error {max(io_full, io_formula):.3g})")
    return CompensatorRealization(red, full.order, filt, models, diag)


def design_compensator(models: ExpectedModels, alpha: float, orders, extra_targets=(),
                       dof_policy: str = "min-norm"):
    """Targets, filter and reduced predictor in one call."""
    poles = np.linalg.eigvals(models.A)
    targets, report = cancellation_targets(poles, extra_targets)
    filt = design_filter(models.H, models.P, alpha, orders, targets, models.singularities(),
                         dof_policy=dof_policy)
    filt.diagnostics["extra_targets"] = report
    filt.diagnostics["model_poles"] = [_cplx(p) for p in poles]
    return build_predictor(models, filt)


# ------------------------------------------------------------ feedback law

@dataclass
class FeedbackLaw:
    """Discrete law with input [r; x^L] and output [u; xhat]."""

    system: StateSpace
    n: int
    n_inputs: int
    n_refs: int
    mode: str

    def step(self, z, r, xL):
        inp = np.concatenate([np.atleast_1d(r), np.atleast_1d(xL)])
        out = self.system.C @ z + self.system.D @ inp
        return self.system.A @ z + self.system.B @ inp, out[: self.n_inputs], out[self.n_inputs:]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "n_inputs": self.n_inputs, "n_refs": self.n_refs,
                "system": self.system.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> FeedbackLaw:
        return cls(StateSpace.from_dict(d["system"]), int(d["n"]), int(d["n_inputs"]),
                   int(d["n_refs"]), d["mode"])


def assemble_compensated_controller(ctrl: PrimaryController, comp: CompensatorRealization | None,
                                    mode: str) -> FeedbackLaw:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n, na, nr, nc = ctrl.dims
    if mode in ("none", "ideal"):
        Cu = -ctrl.Kc
        Du = np.hstack([ctrl.Kx @ ctrl.Br, -ctrl.Kx])
        Ch = np.zeros((n, nc))
        Dh = np.hstack([np.zeros((n, nr)), np.eye(n)])
        A = ctrl.Ac.copy()
        B = ctrl.Bc @ np.hstack([ctrl.Br, -np.eye(n)])
        return FeedbackLaw(StateSpace(A, B, np.vstack([Cu, Ch]), np.vstack([Du, Dh])), n, na, nr, mode)
    if comp is None:
        raise ValueError(f"mode {mode} needs a predictor")
    pr = comp.predictor
    if pr.shape != (n, na + n):
        raise ValueError(f"predictor has shape {pr.shape}, controller expects {(n, na + n)}")
    npr = pr.order
    Bpu, BpL = pr.B[:, :na], pr.B[:, na:]
    Dpu, DpL = pr.D[:, :na], pr.D[:, na:]
    G = np.linalg.inv(np.eye(na) + ctrl.Kx @ Dpu)
    Cu = G @ np.hstack([-ctrl.Kc, -ctrl.Kx @ pr.C])
    Du = G @ np.hstack([ctrl.Kx @ ctrl.Br, -ctrl.Kx @ DpL])
    Ch = np.hstack([np.zeros((n, nc)), pr.C]) + Dpu @ Cu
    Dh = np.hstack([np.zeros((n, nr)), DpL]) + Dpu @ Du
    Ce = -Ch
    De = np.hstack([ctrl.Br, np.zeros((n, n))]) - Dh
    A = np.zeros((nc + npr, nc + npr))
    A[:nc, :nc] = ctrl.Ac
    A[nc:, nc:] = pr.A
    A[:nc] += ctrl.Bc @ Ce
    A[nc:] += Bpu @ Cu
    B = np.vstack([ctrl.Bc @ De, Bpu @ Du + np.hstack([np.zeros((npr, nr)), BpL])])
    return FeedbackLaw(StateSpace(A, B, np.vstack([Cu, Ch]), np.vstack([Du, Dh])), n, na, nr, mode)
