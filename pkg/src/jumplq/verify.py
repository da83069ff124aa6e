"""Numerical checks of the structural identities of the jump LQ problem.

Monte-Carlo checks use common random numbers: every quantity that enters a
difference is computed on the same noise rows, so pathwise cancellations carry
over to the estimate. Matrix-condition checks report a worst-knot margin.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .costs import DEFAULT_CHUNK, MCEstimate, _default_grid, batch_costs, run_paths
from .errors import InvalidQ0, StructureViolation
from .laws import Feedback, OpenLoopTable, spike_basis
from .model import (ConstantMatrix, LQProblem, WeightSet, _add, _probe_times, _scale,
                    as_matrix_function)
from .riccati import DEFAULT_RICCATI_STEPS, RiccatiSolution, solve_riccati
from .simulate import TimeGrid, _mv, march

STDERR_MULTIPLE = 3.0
# Gram cells run many short marches; bigger chunks amortise the per-step overhead
GRAM_CHUNK = 8192


@dataclass
class VerificationReport:
    """Outcome of one check: a statistic, the band it must fall in, and diagnostics.

    ``passed`` is true exactly when ``lower <= statistic <= upper``.
    """

    name: str
    statistic: float
    lower: float
    upper: float
    estimate: MCEstimate | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.lower <= self.statistic <= self.upper)

    @classmethod
    def zero_mean(cls, name: str, est: MCEstimate, k: float = STDERR_MULTIPLE, **diag):
        return cls(name, est.mean, -k * est.stderr, k * est.stderr, est, diag)

    @classmethod
    def margin(cls, name: str, value: float, **diag):
        return cls(name, float(value), 0.0, math.inf, None, diag)

    def as_dict(self) -> dict:
        out = {"name": self.name, "statistic": _num(self.statistic),
               "band": [_num(self.lower), _num(self.upper)], "passed": self.passed,
               "diagnostics": _jsonable(self.diagnostics)}
        if self.estimate is not None:
            out["estimate"] = self.estimate.as_dict()
        return out


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, MCEstimate):
        return obj.as_dict()
    return obj


def reports_to_json(reports, **header) -> str:
    body = dict(_jsonable(header))
    body["all_passed"] = all(r.passed for r in reports)
    body["checks"] = [r.as_dict() for r in reports]
    return json.dumps(body, indent=2)


# ---------------------------------------------------------------------------
# completion of squares and optimality
# ---------------------------------------------------------------------------


class _SquareTerm:
    """Interval hook accumulating ``<R_hat (u - Theta X), u - Theta X> dt``."""

    def __init__(self, sol: RiccatiSolution, n_paths: int):
        self.sol = sol
        self.total = np.zeros(n_paths)

    def __call__(self, t, dt, X, u, W, N):
        fixed = self.sol.constant_theta
        Theta = fixed if fixed is not None else self.sol.theta_at(t)
        d = u - _mv(Theta, X)
        Rh = self.sol.R_hat_hold(t)
        self.total += np.einsum("pi,pi->p", d, _mv(Rh, d)) * dt


def _residual_chunk(problem, sol, law, xi):
    xi = np.asarray(xi, dtype=float).reshape(-1)
    value = float(xi @ sol.P[0] @ xi)

    def chunk(noise):
        sq = _SquareTerm(sol, noise.n_paths)
        cost = batch_costs(problem, law, xi, noise, extra_hooks=(sq,))
        return cost - value - sq.total

    return chunk


def _check_grids(problem, sol, grid):
    if sol.grid.start > grid.start + 1e-12 or sol.grid.stop < grid.stop - 1e-12:
        raise ValueError("Riccati solution does not cover the simulation grid")
    if sol.grid.h > grid.h * (1 + 1e-9):
        raise ValueError("Riccati grid must be at least as fine as the simulation grid")


def completion_of_squares_residual(problem: LQProblem, sol: RiccatiSolution, law, xi,
                                   n_paths: int, seed: int = 0, grid: TimeGrid | None = None,
                                   *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK,
                                   return_samples: bool = False):
    """Per-path ``cost - <P(t0) xi, xi> - int <R_hat (u - Theta X), u - Theta X> ds``.

    Both terms are read off the same path. The mean is zero up to discretisation
    for every admissible law; the estimate's standard error measures the rest.
    """
    grid = _default_grid(problem, grid)
    _check_grids(problem, sol, grid)
    r = run_paths(problem, n_paths, seed, grid, _residual_chunk(problem, sol, law, xi),
                  workers=workers, chunk_size=chunk_size)
    est = MCEstimate.from_samples(r, seed=seed)
    return (est, r) if return_samples else est


def completion_of_squares_report(problem, sol, law, xi, n_paths, seed=0, grid=None,
                                 *, name: str | None = None, workers: int = 1) -> VerificationReport:
    est, r = completion_of_squares_residual(problem, sol, law, xi, n_paths, seed, grid,
                                            workers=workers, return_samples=True)
    worst = int(np.argmax(np.abs(r)))
    return VerificationReport.zero_mean(
        name or f"completion_of_squares[{_law_label(law)}]", est,
        worst_path_index=worst, worst_path_seed=seed, worst_residual=float(r[worst]))


def optimality_gap(problem: LQProblem, sol: RiccatiSolution, xi, challengers,
                   n_paths: int, seed: int = 0, grid: TimeGrid | None = None,
                   *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> list[MCEstimate]:
    """Gap ``J(u) - J(u*)`` for each challenger, with ``u* = Theta X`` on common paths."""
    grid = _default_grid(problem, grid)
    _check_grids(problem, sol, grid)
    star = Feedback(sol)
    laws = [star, *challengers]

    def chunk(noise):
        return np.stack([batch_costs(problem, law, xi, noise) for law in laws], axis=1)

    costs = run_paths(problem, n_paths, seed, grid, chunk, workers=workers, chunk_size=chunk_size)
    return [MCEstimate.from_samples(costs[:, j] - costs[:, 0], seed=seed)
            for j in range(1, len(laws))]


def optimality_reports(problem, sol, xi, challengers, n_paths, seed=0, grid=None,
                       *, workers: int = 1) -> list[VerificationReport]:
    gaps = optimality_gap(problem, sol, xi, challengers, n_paths, seed, grid, workers=workers)
    return [VerificationReport(f"optimality_gap[{_law_label(law)}]", g.mean,
                               -STDERR_MULTIPLE * g.stderr, math.inf, g)
            for law, g in zip(challengers, gaps)]


def _law_label(law) -> str:
    d = law.describe()
    if d["kind"] == "open_loop" and "value" in d:
        return "u=" + ",".join(f"{v:g}" for v in d["value"])
    return d["kind"]


# ---------------------------------------------------------------------------
# state annihilation at jumps
# ---------------------------------------------------------------------------


class _AfterJumpTracker:
    def __init__(self, n_paths):
        self.revived = np.zeros(n_paths, dtype=bool)

    def __call__(self, t, dt, X, u, W, N):
        self.revived |= (N >= 1) & np.any(X != 0.0, axis=1)


def annihilation_statistics(problem: LQProblem, law, xi, n_paths: int, seed: int = 0,
                            grid: TimeGrid | None = None, *, workers: int = 1,
                            chunk_size: int = DEFAULT_CHUNK) -> dict:
    """How often the state is exactly zero at the horizon, and whether jumps kill it for good.

    Returns the MC estimate of ``P(X(T) = 0)``, the jumped-path count, and the
    number of jumped paths whose state is nonzero at some knot after their first jump.
    """
    grid = _default_grid(problem, grid)

    def chunk(noise):
        track = _AfterJumpTracker(noise.n_paths)
        res = march(problem, law, xi, noise, on_interval=track)
        zero_T = np.all(res.X_T == 0.0, axis=1)
        jumped = res.N_T >= 1
        revived = track.revived | (jumped & ~zero_T)
        return np.stack([zero_T, jumped, revived], axis=1).astype(float)

    out = run_paths(problem, n_paths, seed, grid, chunk, workers=workers, chunk_size=chunk_size)
    return {"zero_at_horizon": MCEstimate.from_samples(out[:, 0], seed=seed),
            "n_jumped": int(out[:, 1].sum()),
            "n_jumped_not_annihilated": int(out[:, 2].sum()),
            "n_paths": int(n_paths), "seed": int(seed)}


# ---------------------------------------------------------------------------
# Gram matrix of the cost operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GramResult:
    gram: np.ndarray
    stderr: np.ndarray
    min_eig: float
    eps_hat: float
    delta_t: float
    n_paths: int
    seed: int

    @property
    def asymmetry(self) -> float:
        """Largest entry of ``|Gram - Gram^T|`` before symmetrisation is applied."""
        return float(np.max(np.abs(self.gram - self.gram.T)))

    def as_dict(self) -> dict:
        return _jsonable({"gram": self.gram, "stderr": self.stderr, "min_eig": self.min_eig,
                          "eps_hat": self.eps_hat, "delta_t": self.delta_t,
                          "n_paths": self.n_paths, "seed": self.seed})


def cell_seed(seed: int, a: int, b: int) -> int:
    """Seed of Gram cell ``(a, b)``, derived from the run seed."""
    return int(np.random.SeedSequence([seed, a, b]).generate_state(1, np.uint64)[0])


def convexity_gram(problem: LQProblem, n_intervals: int, n_paths: int, seed: int = 0,
                   grid: TimeGrid | None = None, *, amplitude: float = 1.0,
                   workers: int = 1, chunk_size: int = GRAM_CHUNK,
                   symmetrize: bool = True) -> GramResult:
    """Gram matrix of ``u -> J(t0, 0; u)`` on indicator controls of a uniform partition.

    Entry ``(a, b)`` is ``(J(e_a + e_b) - J(e_a - e_b)) / 4`` at zero initial state,
    both costs on the same paths drawn from the cell's own seed. The smallest
    eigenvalue divided by the interval length estimates the coercivity constant.
    """
    if n_intervals < 1:
        raise ValueError("n_intervals must be positive")
    grid = _default_grid(problem, grid)
    basis = spike_basis(problem.m, n_intervals, grid.start, grid.stop, amplitude)
    k = len(basis)
    xi0 = np.zeros(problem.n)
    cells = [(a, b) for a in range(k) for b in range(a, k)]

    def cell(ab):
        a, b = ab
        plus, minus = basis[a] + basis[b], basis[a] - basis[b]

        def chunk(noise):
            return 0.25 * (batch_costs(problem, plus, xi0, noise)
                           - batch_costs(problem, minus, xi0, noise))

        vals = run_paths(problem, n_paths, cell_seed(seed, a, b), grid, chunk,
                         chunk_size=chunk_size)
        est = MCEstimate.from_samples(vals)
        return est.mean, est.stderr

    if workers <= 1:
        results = [cell(ab) for ab in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cell, cells))
    gram = np.zeros((k, k))
    err = np.zeros((k, k))
    for (a, b), (mean, se) in zip(cells, results):
        gram[a, b] = gram[b, a] = mean
        err[a, b] = err[b, a] = se
    norm = amplitude * amplitude
    gram, err = gram / norm, err / norm
    if symmetrize:
        gram = 0.5 * (gram + gram.T)
    dt = (grid.stop - grid.start) / n_intervals
    min_eig = float(np.linalg.eigvalsh(gram)[0])
    return GramResult(gram, err, min_eig, min_eig / dt, dt, int(n_paths), int(seed))


# ---------------------------------------------------------------------------
# sufficient conditions for uniform convexity
# ---------------------------------------------------------------------------


def _require_zero(problem: LQProblem, names, times):
    c, w = problem.coefficients, problem.weights
    providers = {"B": [c.B], "C": [c.C], "E": list(c.E), "S": [w.S]}
    bad = [n for n in names if any(np.any(p(times) != 0.0) for p in providers[n])]
    if bad:
        raise StructureViolation(f"this criterion needs {', '.join(bad)} = 0")


def _jump_gram(problem: LQProblem, t):
    """``D'D + sum_k lam_k F_k'F_k`` at times ``t``."""
    c = problem.coefficients
    D = c.D(t)
    out = np.swapaxes(D, -1, -2) @ D
    for lam_k, F in zip(problem.jump_measure.intensities, c.F):
        Fv = F(t)
        out = out + lam_k * (np.swapaxes(Fv, -1, -2) @ Fv)
    return out


def _rk4_forward(A, knots, n):
    """Fundamental matrix of ``Phi' = A Phi`` on ``knots`` with ``Phi(knots[0]) = I``."""
    Phi = np.empty((knots.size, n, n))
    Phi[0] = np.eye(n)
    mids = 0.5 * (knots[:-1] + knots[1:])
    A_k, A_m = A(knots), A(mids)
    for i in range(knots.size - 1):
        h = knots[i + 1] - knots[i]
        X = Phi[i]
        k1 = A_k[i] @ X
        k2 = A_m[i] @ (X + 0.5 * h * k1)
        k3 = A_m[i] @ (X + 0.5 * h * k2)
        k4 = A_k[i + 1] @ (X + h * k3)
        Phi[i + 1] = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Phi


def check_unifconvex_phi(problem: LQProblem, delta: float, grid: TimeGrid | None = None
                         ) -> VerificationReport:
    """Sufficient condition for uniform convexity when ``B = C = E = S = 0``.

    With ``Phi' = A Phi`` from the identity, the left-hand side at ``r`` is

        [lam_G / |Phi(T)^-1|^2 + int_r^T lam_Q(s) / |Phi(s)^-1|^2 ds] / |Phi(r)|^2
            * (D'D + sum_k lam_k F_k'F_k)(r) + R(r),

    with ``lam_G``, ``lam_Q`` smallest eigenvalues and ``|.|`` the spectral norm.
    The margin is the smallest eigenvalue of the left-hand side minus ``delta``,
    minimised over the grid.
    """
    if problem.weights.pathwise is not None:
        raise StructureViolation("the Phi criterion needs deterministic weights")
    grid = grid or TimeGrid.uniform(problem.t0, problem.T, DEFAULT_RICCATI_STEPS)
    knots = grid.knots
    _require_zero(problem, ("B", "C", "E", "S"), np.union1d(knots, _probe_times(problem.t0, problem.T, [p for _, p in problem.coefficients.providers()])))
    n = problem.n
    Phi = _rk4_forward(problem.coefficients.A, knots, n)
    sv = np.linalg.svd(Phi, compute_uv=False)  # descending
    norm_phi = sv[:, 0]
    inv_norm = 1.0 / sv[:, -1]
    lam_G = float(np.linalg.eigvalsh(problem.weights.G)[0])
    lam_Q = np.linalg.eigvalsh(problem.weights.Q(knots))[:, 0]
    integrand = lam_Q / inv_norm ** 2
    tail = cumulative_trapezoid(integrand[::-1], -knots[::-1], initial=0.0)[::-1]
    scalar = (lam_G / inv_norm[-1] ** 2 + tail) / norm_phi ** 2
    lhs = scalar[:, None, None] * _jump_gram(problem, knots) + problem.weights.R(knots)
    eig = np.linalg.eigvalsh(0.5 * (lhs + np.swapaxes(lhs, -1, -2)))[:, 0] - delta
    worst = int(np.argmin(eig))
    return VerificationReport.margin("unifconvex_phi", eig[worst], delta=delta,
                                     worst_knot=float(knots[worst]),
                                     min_lhs_eig=float(eig[worst] + delta))


def check_unifconvex_lyapunov(problem: LQProblem, Q0, delta: float,
                              grid: TimeGrid | None = None, *, return_pi: bool = False):
    """Sufficient condition through the deterministic Lyapunov equation.

    ``Pi`` solves the linear part of the Riccati equation with ``Q`` replaced by
    ``Q - Q0`` and ``Pi(T) = G``. With ``K = B'Pi + D'Pi C + sum_k lam_k F_k'Pi E_k + S``
    the criterion is

        R + D'Pi D + sum_k lam_k F_k'Pi F_k - K Q0^-1 K' >= delta I

    at every knot; the margin is its smallest eigenvalue minus ``delta``.
    """
    if problem.weights.pathwise is not None:
        raise StructureViolation("the Lyapunov criterion needs deterministic weights")
    grid = grid or TimeGrid.uniform(problem.t0, problem.T, DEFAULT_RICCATI_STEPS)
    knots = grid.knots
    if np.ndim(Q0) == 0 and not callable(Q0):
        Q0 = ConstantMatrix(float(Q0) * np.eye(problem.n))
    Q0 = as_matrix_function(Q0, (problem.n, problem.n))
    Q0_k = Q0(knots)
    q0_min = np.linalg.eigvalsh(0.5 * (Q0_k + np.swapaxes(Q0_k, -1, -2)))[:, 0]
    if np.any(q0_min <= 0):
        i = int(np.argmin(q0_min))
        raise InvalidQ0(f"Q0 is not positive definite at t={knots[i]:.6g} "
                        f"(min eigenvalue {q0_min[i]:.3g})")
    w = problem.weights
    shifted = problem.replace(weights=WeightSet(Q=_add(w.Q, _scale(Q0, -1.0)), S=w.S, R=w.R, G=w.G))
    pi = solve_riccati(shifted, grid, lyapunov_mode=True)
    K = pi.S_hat
    lhs = pi.R_hat - K @ np.linalg.solve(Q0_k, np.swapaxes(K, -1, -2))
    eig = np.linalg.eigvalsh(0.5 * (lhs + np.swapaxes(lhs, -1, -2)))[:, 0] - delta
    worst = int(np.argmin(eig))
    report = VerificationReport.margin("unifconvex_lyapunov", eig[worst], delta=delta,
                                       worst_knot=float(knots[worst]),
                                       min_lhs_eig=float(eig[worst] + delta))
    return (report, pi) if return_pi else report


def constant_law(value, problem: LQProblem) -> OpenLoopTable:
    """Open-loop control equal to ``value`` on the whole horizon."""
    v = np.broadcast_to(np.asarray(value, dtype=float), (problem.m,))
    return OpenLoopTable.constant(v, problem.t0, problem.T)
