"""Pathwise quadratic cost, Monte-Carlo cost estimates and the quadratic value.

The running cost is a left-Riemann sum: on each interval the integrand is read
at the left knot, with the post-jump state there (the left limit of the state
over the interval) and the control held on the interval.
"""
from __future__ import annotations

import json
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from scipy import stats

from .laws import BasisSpike, ControlLaw, Feedback, OpenLoopTable, Superposition, Zero  # noqa: F401
from .model import LQProblem, WeightSet
from .simulate import NoiseBatch, SamplePath, TimeGrid, _mv, march, sample_noise

CONFIDENCE_LEVEL = 0.99
DEFAULT_CHUNK = 2048


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    confidence_level: float = CONFIDENCE_LEVEL
    seed: int | None = None
    wall_time: float | None = None

    @classmethod
    def from_samples(cls, x, seed=None, wall_time=None) -> MCEstimate:
        x = np.asarray(x, dtype=float)
        if x.size < 2:
            raise ValueError("need at least two samples for a standard error")
        return cls(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)),
                   int(x.size), CONFIDENCE_LEVEL, seed, wall_time)

    @property
    def half_width(self) -> float:
        return float(stats.norm.ppf(0.5 + self.confidence_level / 2)) * self.stderr

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.mean - target) <= k * self.stderr

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def _quad(M, x):
    return np.einsum("pi,pi->p", x, _mv(M, x))


def running_integrand(weights: WeightSet, t, X, u, W=None, N=None):
    """``<QX,X> + 2<SX,u> + <Ru,u>`` for a batch, including any pathwise part of Q."""
    Q = weights.Q.at(t)
    if weights.pathwise is not None:
        Q = Q + weights.pathwise.running(t, W, N)
    return _quad(Q, X) + 2.0 * np.einsum("pi,pi->p", _mv(weights.S.at(t), X), u) + _quad(weights.R.at(t), u)


def terminal_cost(weights: WeightSet, X_T, W_T=None, N_T=None):
    G = weights.G
    if weights.pathwise is not None:
        G = G + weights.pathwise.terminal(W_T, N_T)
    return _quad(G, X_T)


@njit(cache=True)
def _accumulate_const(total, X, u, dt, Q, S, R):
    """``total += (<QX,X> + 2<SX,u> + <Ru,u>) dt`` row by row."""
    P, n = X.shape
    m = u.shape[1]
    for p in range(P):
        acc = 0.0
        for i in range(n):
            qx = 0.0
            for j in range(n):
                qx += Q[i, j] * X[p, j]
            acc += X[p, i] * qx
        for a in range(m):
            sx = 0.0
            for j in range(n):
                sx += S[a, j] * X[p, j]
            ru = 0.0
            for b in range(m):
                ru += R[a, b] * u[p, b]
            acc += u[p, a] * (2.0 * sx + ru)
        total[p] += acc * dt[p]


class CostAccumulator:
    """Interval hook summing the running cost sequentially in time."""

    def __init__(self, weights: WeightSet, n_paths: int):
        self.weights = weights
        self.total = np.zeros(n_paths)
        w = weights
        self._const = None
        if w.pathwise is None and w.Q.is_constant and w.S.is_constant and w.R.is_constant:
            self._const = tuple(np.ascontiguousarray(M.value, dtype=float) for M in (w.Q, w.S, w.R))

    def __call__(self, t, dt, X, u, W, N):
        if self._const is not None:
            _accumulate_const(self.total, np.ascontiguousarray(X, dtype=float),
                              np.ascontiguousarray(u, dtype=float), dt, *self._const)
        else:
            self.total += running_integrand(self.weights, t, X, u, W, N) * dt


def batch_costs(problem: LQProblem, law: ControlLaw, xi, noise: NoiseBatch,
                weights: WeightSet | None = None, extra_hooks=()) -> np.ndarray:
    """Pathwise cost of every path in ``noise`` under ``law``."""
    weights = weights or problem.weights
    acc = CostAccumulator(weights, noise.n_paths)
    hooks = (acc, *extra_hooks)

    def hook(*args):
        for h in hooks:
            h(*args)

    res = march(problem, law, xi, noise, on_interval=hook)
    return terminal_cost(weights, res.X_T, res.W_T, res.N_T) + acc.total


def pathwise_cost(path: SamplePath, weights: WeightSet) -> float:
    """Cost of one recorded path."""
    t = path.t[:-1]
    dt = np.diff(path.t)
    W = np.concatenate([[0.0], np.cumsum(path.brownian_increments)])
    N = np.cumsum(path.jump)
    X = path.X[:-1]
    if weights.pathwise is None:
        vals = running_integrand(weights, t, X, path.u)
    else:
        vals = np.concatenate([running_integrand(weights, t[i:i + 1], X[i:i + 1], path.u[i:i + 1],
                                                 W[i:i + 1], N[i:i + 1]) for i in range(t.size)])
    running = np.cumsum(vals * dt)[-1] if t.size else 0.0
    term = terminal_cost(weights, path.X[-1:], W[-1:], N[-1:])[0]
    return float(term + running)


def chunk_ranges(n_paths: int, chunk_size: int = DEFAULT_CHUNK):
    """Fixed chunk boundaries; they never depend on the number of workers."""
    return [(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]


def run_paths(problem: LQProblem, n_paths: int, seed: int, grid: TimeGrid,
              chunk_fn: Callable[[NoiseBatch], np.ndarray], *, workers: int = 1,
              chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Evaluate ``chunk_fn`` on every chunk of paths and stack results in path order."""
    ranges = chunk_ranges(n_paths, chunk_size)

    def job(bounds):
        lo, hi = bounds
        noise = sample_noise(problem.jump_measure, grid, seed, range(lo, hi))
        return np.asarray(chunk_fn(noise))

    if workers <= 1:
        parts = [job(r) for r in ranges]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, ranges))
    return np.concatenate(parts, axis=0)


def _default_grid(problem, grid):
    return grid if grid is not None else TimeGrid.for_problem(problem)


def mc_cost(problem: LQProblem, law: ControlLaw, xi, n_paths: int, seed: int = 0,
            grid: TimeGrid | None = None, *, weights: WeightSet | None = None,
            workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> MCEstimate:
    """Monte-Carlo estimate of the expected cost ``J(t0, xi; law)``."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    grid = _default_grid(problem, grid)
    start = time.perf_counter()
    costs = run_paths(problem, n_paths, seed, grid,
                      lambda nz: batch_costs(problem, law, xi, nz, weights),
                      workers=workers, chunk_size=chunk_size)
    return MCEstimate.from_samples(costs, seed=seed, wall_time=time.perf_counter() - start)


def value_quadratic(sol, t: float, xi) -> float:
    """``<P(t) xi, xi>`` with P interpolated linearly between knots."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    return float(xi @ sol.P_at(t) @ xi)
