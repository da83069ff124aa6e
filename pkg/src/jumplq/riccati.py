"""Backward integro-Riccati equation with jumps, deterministic-coefficient case.

    -dP/ds = A'P + PA + Q + C'PC + sum_k lam_k E_k'PE_k - S_hat' R_hat^{-1} S_hat,
    P(T) = G,
    S_hat = B'P + D'PC + sum_k lam_k F_k'PE_k + S,
    R_hat = R + D'PD + sum_k lam_k F_k'PF_k,

and the feedback gain Theta = -R_hat^{-1} S_hat.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from .errors import NonFiniteCoefficient, OutOfRange, RiccatiBlowUp, StateBlowUp
from .model import LQProblem
from .simulate import TimeGrid, _text_sink

POSITIVITY_FLOOR = 1e-10
P_GUARD = 1e12
DEFAULT_RICCATI_STEPS = 4000
SINGULAR_MULTIPLIER = 1e-10


def _T(M):
    return np.swapaxes(M, -1, -2)


def _sym(M):
    return 0.5 * (M + _T(M))


def _aggregate(P, B, C, D, S, R, E, F, lam):
    """Aggregated weights from pre-evaluated coefficients.

    ``E``/``F`` carry a mark axis just before the matrix axes.
    """
    PE = P[..., None, :, :] @ E
    PF = P[..., None, :, :] @ F
    Ft = _T(F)
    jumpS = np.einsum("k,...kij->...ij", lam, Ft @ PE)
    jumpR = np.einsum("k,...kij->...ij", lam, Ft @ PF)
    Dt = _T(D)
    S_hat = _T(B) @ P + Dt @ P @ C + jumpS + S
    R_hat = _sym(R + Dt @ P @ D + jumpR)
    return S_hat, R_hat


def aggregate_weights(problem: LQProblem, t, P):
    """Return ``(S_hat, R_hat)`` at time(s) ``t`` for symmetric ``P`` (vectorised over ``t``)."""
    t = np.asarray(t, dtype=float)
    P = np.asarray(P, dtype=float)
    c, w = problem.coefficients, problem.weights
    lam = problem.jump_measure.intensities
    S_hat, R_hat = _aggregate(P, c.B(t), c.C(t), c.D(t), w.S(t), w.R(t),
                              c.E_stack(t), c.F_stack(t), lam)
    if not (np.all(np.isfinite(S_hat)) and np.all(np.isfinite(R_hat))):
        raise NonFiniteCoefficient("aggregated weights are not finite")
    return S_hat, R_hat


@dataclass(frozen=True)
class JumpMultiplierReport:
    min_abs_det: float
    time: float
    mark_id: str

    @property
    def singular(self) -> bool:
        return self.min_abs_det <= SINGULAR_MULTIPLIER


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray  # (N+1, n, n)
    S_hat: np.ndarray  # (N+1, m, n)
    R_hat: np.ndarray  # (N+1, m, m)
    Theta: np.ndarray  # (N+1, m, n); NaN where R_hat is not invertible (Lyapunov mode)
    min_eig_R_hat: np.ndarray  # (N+1,)
    jump_multiplier_min_abs_det: float
    jump_multiplier_by_knot: np.ndarray = field(repr=False)
    lyapunov_mode: bool = False
    problem: LQProblem | None = field(default=None, repr=False, compare=False)

    @property
    def t(self):
        return self.grid.knots

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        k = self.grid.knots
        if np.any(t < k[0]) or np.any(t > k[-1]):
            raise OutOfRange(f"time outside the solved range [{k[0]}, {k[-1]}]")
        return t

    def P_at(self, t):
        """Linear interpolation of P between knots."""
        t = self._check(t)
        k = self.grid.knots
        idx = np.clip(np.searchsorted(k, t, side="right") - 1, 0, k.size - 2)
        w = ((t - k[idx]) / (k[idx + 1] - k[idx]))[..., None, None]
        return self.P[idx] * (1.0 - w) + self.P[idx + 1] * w

    def _hold_index(self, t):
        t = self._check(t)
        k = self.grid.knots
        if self._uniform:
            h = (k[-1] - k[0]) / (k.size - 1)
            idx = np.clip(np.floor((t - k[0]) / h).astype(np.int64), 0, k.size - 1)
            # floor can land one cell off next to a knot; correct against the knots
            nxt = np.minimum(idx + 1, k.size - 1)
            idx = idx - (k[idx] > t) + ((idx + 1 < k.size) & (k[nxt] <= t))
        else:
            idx = np.searchsorted(k, t, side="right") - 1
        return np.clip(idx, 0, k.size - 1)

    def theta_at(self, t):
        """Theta held constant from each knot to the next."""
        return self.Theta[self._hold_index(t)]

    def R_hat_hold(self, t):
        """R_hat held constant from each knot to the next (the grid used for Theta)."""
        return self.R_hat[self._hold_index(t)]

    @cached_property
    def constant_theta(self):
        """Theta as a single matrix when it does not vary across knots, else ``None``."""
        Th = self.Theta
        if np.all(np.isfinite(Th)) and np.all(Th == Th[0]):
            return Th[0]
        return None

    @cached_property
    def _uniform(self) -> bool:
        k = self.grid.knots
        d = np.diff(k)
        return bool(np.all(np.abs(d - d.mean()) <= 1e-12 * max(1.0, abs(k[-1]))))

    def R_hat_at(self, t):
        """Aggregated control weight at ``t`` evaluated on the interpolated P."""
        t = self._check(t)
        return aggregate_weights(self.problem, t, self.P_at(t))[1]

    def to_csv(self, path) -> None:
        """Write the solution to a file path or an open text stream."""
        n, m = self.P.shape[1], self.Theta.shape[1]
        header = (["t"] + [f"P_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
                  + [f"Theta_{i + 1}{j + 1}" for i in range(m) for j in range(n)]
                  + ["min_eig_R_hat", "min_abs_det_jump_multiplier"])
        with _text_sink(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, tk in enumerate(self.t):
                w.writerow([repr(float(tk))]
                           + [repr(float(x)) for x in self.P[k].reshape(-1)]
                           + [repr(float(x)) for x in self.Theta[k].reshape(-1)]
                           + [repr(float(self.min_eig_R_hat[k])),
                              repr(float(self.jump_multiplier_by_knot[k]))])


class _Coefficients:
    """All providers evaluated once on the knots and midpoints of the solve grid."""

    def __init__(self, problem: LQProblem, knots: np.ndarray):
        mids = 0.5 * (knots[:-1] + knots[1:])
        ts = np.empty(2 * knots.size - 1)
        ts[0::2] = knots
        ts[1::2] = mids
        self.ts = ts
        c, w = problem.coefficients, problem.weights
        self.A, self.B, self.C, self.D = (np.ascontiguousarray(p(ts)) for p in (c.A, c.B, c.C, c.D))
        self.E = np.ascontiguousarray(c.E_stack(ts))
        self.F = np.ascontiguousarray(c.F_stack(ts))
        self.Q, self.S, self.R = (np.ascontiguousarray(p(ts)) for p in (w.Q, w.S, w.R))
        for name in ("A", "B", "C", "D", "E", "F", "Q", "S", "R"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteCoefficient(f"{name} is not finite on the solve grid")
        self.lam = problem.jump_measure.intensities
        self.At = _T(self.A).copy()
        self.Ct = _T(self.C).copy()
        self.Et = _T(self.E).copy()


@njit(cache=True)
def _mm(a, b):
    r, k = a.shape
    c = b.shape[1]
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _tm(a, b):
    """``a.T @ b``."""
    k, r = a.shape
    c = b.shape[1]
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            acc = 0.0
            for l in range(k):
                acc += a[l, i] * b[l, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _symm(M):
    return 0.5 * (M + M.T)


@njit(cache=True)
def _rhs_kernel(i, P, A, B, C, D, E, F, Q, S, R, lam, lyapunov):
    """Return ``(f, S_hat, R_hat, eigvals, eigvecs)`` with ``-dP/ds = f`` at evaluation point ``i``."""
    Ai, Ci, Di = A[i], C[i], D[i]
    f = _tm(Ai, P) + _mm(P, Ai) + Q[i] + _tm(Ci, _mm(P, Ci))
    PD = _mm(P, Di)
    S_hat = _tm(B[i], P) + _tm(Di, _mm(P, Ci)) + S[i]
    R_hat = R[i] + _tm(Di, PD)
    for k in range(lam.size):
        Ek = E[i, k]
        Fk = F[i, k]
        PE = _mm(P, Ek)
        f = f + lam[k] * _tm(Ek, PE)
        S_hat = S_hat + lam[k] * _tm(Fk, PE)
        R_hat = R_hat + lam[k] * _tm(Fk, _mm(P, Fk))
    R_hat = _symm(R_hat)
    w, V = np.linalg.eigh(R_hat)
    if not lyapunov:
        VtS = _tm(V, S_hat)
        for a in range(VtS.shape[0]):
            VtS[a, :] = VtS[a, :] / w[a]
        f = f - _tm(S_hat, _mm(V, VtS))
    return _symm(f), S_hat, R_hat, w, V


@njit(cache=True)
def _rk4_backward(knots, G, A, B, C, D, E, F, Q, S, R, lam, lyapunov, floor, guard):
    """Backward RK4 sweep. Returns arrays plus ``(status, index, value)``.

    status 0: ok; 1: R_hat eigenvalue at or below the floor at evaluation point
    ``index``; 2: P exceeded the guard at knot ``index``.
    """
    N = knots.size - 1
    n = G.shape[0]
    m = R.shape[1]
    P = np.empty((N + 1, n, n))
    S_out = np.empty((N + 1, m, n))
    R_out = np.empty((N + 1, m, m))
    Th = np.empty((N + 1, m, n))
    min_eig = np.empty(N + 1)

    Pk = G.copy()
    P[N] = Pk
    f1, Sh, Rh, w, V = _rhs_kernel(2 * N, Pk, A, B, C, D, E, F, Q, S, R, lam, lyapunov)
    if not lyapunov and not w[0] > floor:
        return P, S_out, R_out, Th, min_eig, 1, 2 * N, w[0]
    S_out[N], R_out[N], min_eig[N] = Sh, Rh, w[0]
    Th[N] = _theta(Sh, w, V, floor)
    for k in range(N - 1, -1, -1):
        h = knots[k + 1] - knots[k]
        im = 2 * k + 1
        i0 = 2 * k
        f2, _, _, w2, _ = _rhs_kernel(im, _symm(Pk + 0.5 * h * f1), A, B, C, D, E, F, Q, S, R, lam, lyapunov)
        if not lyapunov and not w2[0] > floor:
            return P, S_out, R_out, Th, min_eig, 1, im, w2[0]
        f3, _, _, w3, _ = _rhs_kernel(im, _symm(Pk + 0.5 * h * f2), A, B, C, D, E, F, Q, S, R, lam, lyapunov)
        if not lyapunov and not w3[0] > floor:
            return P, S_out, R_out, Th, min_eig, 1, im, w3[0]
        f4, _, _, w4, _ = _rhs_kernel(i0, _symm(Pk + h * f3), A, B, C, D, E, F, Q, S, R, lam, lyapunov)
        if not lyapunov and not w4[0] > floor:
            return P, S_out, R_out, Th, min_eig, 1, i0, w4[0]
        Pk = _symm(Pk + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4))
        if not np.all(np.abs(Pk) <= guard):
            return P, S_out, R_out, Th, min_eig, 2, k, np.max(np.abs(Pk))
        P[k] = Pk
        f1, Sh, Rh, w, V = _rhs_kernel(i0, Pk, A, B, C, D, E, F, Q, S, R, lam, lyapunov)
        if not lyapunov and not w[0] > floor:
            return P, S_out, R_out, Th, min_eig, 1, i0, w[0]
        S_out[k], R_out[k], min_eig[k] = Sh, Rh, w[0]
        Th[k] = _theta(Sh, w, V, floor)
    return P, S_out, R_out, Th, min_eig, 0, -1, 0.0


@njit(cache=True)
def _theta(S_hat, w, V, floor):
    m, n = S_hat.shape
    if not w[0] > floor:
        return np.full((m, n), np.nan)
    VtS = _tm(V, S_hat)
    for a in range(m):
        VtS[a, :] = VtS[a, :] / w[a]
    return -_mm(V, VtS)


def solve_riccati(problem: LQProblem, grid: TimeGrid | None = None, *,
                  positivity_floor: float = POSITIVITY_FLOOR,
                  lyapunov_mode: bool = False) -> RiccatiSolution:
    """Integrate P backward from ``P(T) = G`` with classical RK4.

    Every stage is symmetrised. ``R_hat`` is inverted through its symmetric
    eigendecomposition; a solve whose smallest eigenvalue reaches
    ``positivity_floor`` (at a knot or an RK stage) raises :class:`RiccatiBlowUp`.
    With ``lyapunov_mode`` the quadratic correction is dropped (the linear
    Lyapunov equation) and no floor is enforced; Theta is then NaN wherever
    R_hat does not clear the floor.
    """
    if problem.weights.pathwise is not None:
        raise ValueError("the Riccati reduction needs deterministic weights")
    grid = grid or TimeGrid.uniform(problem.t0, problem.T, DEFAULT_RICCATI_STEPS)
    knots = grid.knots
    if not (np.isclose(knots[-1], problem.T) and knots[0] >= problem.t0 - 1e-12):
        raise OutOfRange("Riccati grid must end at the horizon")
    cf = _Coefficients(problem, knots)
    G = np.ascontiguousarray(problem.weights.G, dtype=float)
    P, S_hat, R_hat, Theta, min_eig, status, idx, val = _rk4_backward(
        np.ascontiguousarray(knots), G, cf.A, cf.B, cf.C, cf.D, cf.E, cf.F, cf.Q, cf.S, cf.R,
        np.ascontiguousarray(cf.lam, dtype=float), bool(lyapunov_mode),
        float(positivity_floor), P_GUARD)
    if status == 1:
        t_fail = float(cf.ts[idx])
        raise RiccatiBlowUp(
            f"min eigenvalue of R_hat is {val:.3g} <= floor {positivity_floor:g} at t={t_fail:.6g}; "
            "uniform convexity cannot be certified along this solve", time=t_fail, min_eig=float(val))
    if status == 2:
        raise StateBlowUp(f"|P| exceeded {P_GUARD:g} at t={knots[idx]:.6g}", time=float(knots[idx]))

    by_knot = _multiplier_dets(problem, knots, Theta).min(axis=1)
    return RiccatiSolution(grid=grid, P=P, S_hat=S_hat, R_hat=R_hat, Theta=Theta,
                           min_eig_R_hat=min_eig,
                           jump_multiplier_min_abs_det=float(np.nanmin(by_knot)) if np.any(np.isfinite(by_knot)) else float("nan"),
                           jump_multiplier_by_knot=by_knot,
                           lyapunov_mode=lyapunov_mode, problem=problem)


def _multiplier_dets(problem: LQProblem, t, Theta) -> np.ndarray:
    c = problem.coefficients
    I = np.eye(problem.n)
    M = I + c.E_stack(t) + c.F_stack(t) @ Theta[:, None, :, :]
    with np.errstate(invalid="ignore"):  # NaN Theta in Lyapunov mode
        return np.abs(np.linalg.det(M))


def closed_loop_jump_multiplier(problem: LQProblem, sol: RiccatiSolution) -> JumpMultiplierReport:
    """Smallest ``|det(I + E + F Theta)|`` over knots and marks, with where it occurs."""
    dets = _multiplier_dets(problem, sol.t, sol.Theta)
    flat = int(np.nanargmin(dets))
    k, j = np.unravel_index(flat, dets.shape)
    return JumpMultiplierReport(float(dets[k, j]), float(sol.t[k]), problem.jump_measure.ids[j])
