"""Sample paths of the controlled linear jump-diffusion.

Between jump times the state follows an Euler step whose drift carries the
compensator of the Poisson measure; jump times are sampled exactly and inserted
as grid knots, where the pure-jump update is applied to the left limit.

Random numbers come from per-path Philox streams keyed by ``(seed, path_index)``,
so a path depends only on its key, never on batching or worker count.
Each path draws, in order: exponential inter-arrival times and uniform mark
selectors until the horizon is passed, then one standard normal per interval of
its jump-augmented grid.
"""
from __future__ import annotations

import contextlib
import csv
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import OutOfRange, StateBlowUp
from .model import JumpMeasure, LQProblem

OVERFLOW_GUARD = 1e12
DEFAULT_SIM_STEPS = 2000


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a time grid needs at least two knots")
        if np.any(np.diff(k) <= 0):
            raise ValueError("grid knots must be strictly increasing")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @classmethod
    def uniform(cls, start: float, stop: float, n_steps: int | None = None,
                h: float | None = None) -> TimeGrid:
        if n_steps is None:
            n_steps = DEFAULT_SIM_STEPS if h is None else max(1, math.ceil((stop - start) / h - 1e-9))
        return cls(np.linspace(start, stop, int(n_steps) + 1))

    @classmethod
    def for_problem(cls, problem: LQProblem, n_steps: int | None = None,
                    h: float | None = None) -> TimeGrid:
        return cls.uniform(problem.t0, problem.T, n_steps, h)

    @property
    def start(self) -> float:
        return float(self.knots[0])

    @property
    def stop(self) -> float:
        return float(self.knots[-1])

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    @property
    def h(self) -> float:
        return (self.stop - self.start) / self.n_steps

    def __len__(self):
        return self.knots.size


@contextlib.contextmanager
def _text_sink(target):
    """Yield a writable text stream for a path or pass an open stream through."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: int  # index into the jump measure's marks
    mark_id: str = ""


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one path: Philox-4x64 keyed by ``(seed, index)``."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_jump_times(jm: JumpMeasure, t_start: float, T: float,
                      rng: np.random.Generator) -> list[JumpEvent]:
    """Jump events of the marked Poisson measure in ``(t_start, T]``."""
    if not t_start < T:
        raise ValueError("t_start must precede T")
    rate = jm.total_intensity
    cum = np.cumsum(jm.intensities) / rate
    ids = jm.ids
    events = []
    t = t_start
    while True:
        t += rng.exponential(1.0 / rate)
        if t > T:
            return events
        k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        k = min(k, len(ids) - 1)
        events.append(JumpEvent(t, k, ids[k]))


@dataclass
class NoiseBatch:
    """Padded random inputs for ``P`` paths: knots, Brownian increments, jump flags.

    Path ``p`` has ``n_knots[p]`` genuine knots; the rest of its row repeats the
    horizon with zero increments, which leaves the state unchanged.
    """

    t: np.ndarray  # (P, L+1)
    dW: np.ndarray  # (P, L)
    jump: np.ndarray  # (P, L+1) bool
    mark: np.ndarray  # (P, L+1) int, -1 where no jump
    n_knots: np.ndarray  # (P,)
    indices: np.ndarray  # (P,)
    seed: int
    events: list[list[JumpEvent]] = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.t.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t, axis=1)


def _path_noise(jm: JumpMeasure, base: np.ndarray, rng: np.random.Generator,
                sqrt_dt: np.ndarray | None = None):
    events = sample_jump_times(jm, float(base[0]), float(base[-1]), rng)
    if events:
        times = np.array([e.time for e in events])
        pos = np.searchsorted(base, times, side="right")
        knots = np.insert(base, pos, times)
        jump_pos = pos + np.arange(len(events))
        scale = np.sqrt(np.diff(knots))
    else:
        knots = base
        jump_pos = np.empty(0, dtype=int)
        scale = np.sqrt(np.diff(knots)) if sqrt_dt is None else sqrt_dt
    dW = scale * rng.standard_normal(knots.size - 1)
    return events, knots, jump_pos, dW


def sample_noise(jm: JumpMeasure, grid: TimeGrid, seed: int,
                 indices: Sequence[int]) -> NoiseBatch:
    """Draw the random inputs of the given path indices on ``grid``."""
    base = grid.knots
    sqrt_dt = np.sqrt(np.diff(base))
    per_path = [_path_noise(jm, base, path_rng(seed, int(i)), sqrt_dt) for i in indices]
    return _assemble(per_path, base, seed, indices)


def _assemble(per_path, base, seed, indices) -> NoiseBatch:
    P = len(per_path)
    L1 = max(k.size for _, k, _, _ in per_path)
    t = np.full((P, L1), base[-1])
    dW = np.zeros((P, L1 - 1))
    jump = np.zeros((P, L1), dtype=bool)
    mark = np.full((P, L1), -1, dtype=np.int32)
    n_knots = np.empty(P, dtype=np.int64)
    events = []
    for p, (ev, knots, jpos, inc) in enumerate(per_path):
        t[p, :knots.size] = knots
        dW[p, :inc.size] = inc
        jump[p, jpos] = True
        mark[p, jpos] = [e.mark for e in ev]
        n_knots[p] = knots.size
        events.append(ev)
    return NoiseBatch(t, dW, jump, mark, n_knots, np.asarray(indices, dtype=np.int64),
                      int(seed), events)


# ---------------------------------------------------------------------------
# marching
# ---------------------------------------------------------------------------


def _mv(M, x):
    """Matrix-vector product for a shared ``(r, c)`` or per-path ``(P, r, c)`` matrix."""
    if M.ndim == 2:
        return x @ M.T
    return np.einsum("pij,pj->pi", M, x)


def _mark_sum(providers, lam, t):
    acc = None
    for lam_k, fn in zip(lam, providers):
        term = lam_k * fn.at(t)
        acc = term if acc is None else acc + term
    return acc


@njit(cache=True)
def _euler_const(X, u, dt, dW, Ad, Bd, C, D):
    """``X + (Ad X + Bd u) dt + (C X + D u) dW`` row by row."""
    P, n = X.shape
    m = u.shape[1]
    out = np.empty_like(X)
    for p in range(P):
        for i in range(n):
            drift = 0.0
            diff = 0.0
            for j in range(n):
                drift += Ad[i, j] * X[p, j]
                diff += C[i, j] * X[p, j]
            for j in range(m):
                drift += Bd[i, j] * u[p, j]
                diff += D[i, j] * u[p, j]
            out[p, i] = X[p, i] + drift * dt[p] + diff * dW[p]
    return out


def control_value(law, t, X, m, at_jump=False):
    """Evaluate an affine law ``u = K(t) X_- + v(t)`` for a batch of states."""
    P = X.shape[0]
    u = None
    K = law.gain(t)
    if K is not None:
        u = _mv(K, X)
    v = law.offset(t, at_jump)
    if v is not None:
        v = np.broadcast_to(v, (P, v.shape[-1]))
        u = v.copy() if u is None else u + v
    if u is None:
        u = np.zeros((P, m))
    return u


@dataclass
class MarchResult:
    X_T: np.ndarray  # (P, n) terminal state
    W_T: np.ndarray  # (P,)
    N_T: np.ndarray  # (P,) jump count on the horizon
    X: np.ndarray | None = None  # (P, L+1, n) post-jump values
    X_pre: np.ndarray | None = None  # (P, L+1, n) left limits
    u: np.ndarray | None = None  # (P, L, m) control on each interval
    u_jump: np.ndarray | None = None  # (P, L+1, m) control applied at jump knots


IntervalHook = Callable[..., None]


def march(problem: LQProblem, law, xi, noise: NoiseBatch,
          on_interval: IntervalHook | None = None, record: bool = False) -> MarchResult:
    """Propagate the state of every path in ``noise`` under ``law``.

    ``on_interval(t, dt, X, u, W, N)`` is called for each column before the Euler
    step, with the post-jump state at the interval's left end, the control held on
    the interval, the Brownian value and the jump count up to and including ``t``.
    """
    c = problem.coefficients
    lam = problem.jump_measure.intensities
    n, m = problem.n, problem.m
    P, L1 = noise.t.shape
    L = L1 - 1
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != n:
        raise ValueError(f"initial state has size {xi.size}, expected {n}")
    X = np.tile(xi, (P, 1))
    W = np.zeros(P)
    N = np.zeros(P, dtype=np.int64)
    if record:
        Xs = np.empty((P, L1, n))
        Xpre = np.empty((P, L1, n))
        us = np.zeros((P, L, m))
        ujump = np.zeros((P, L1, m))

    comp_const = c.all_constant()
    if comp_const:
        # compensated drift matrices, with identically-zero terms dropped
        Ad = c.A.value - _mark_sum(c.E, lam, 0.0)
        Bd = c.B.value - _mark_sum(c.F, lam, 0.0)
        Ad, Bd, Cc, Dc = (np.ascontiguousarray(M, dtype=float) for M in (Ad, Bd, c.C.value, c.D.value))
    jump_col_set = set(np.flatnonzero(noise.jump.any(axis=0)).tolist())
    # time-major copies so each step reads contiguous columns
    t_cols = np.ascontiguousarray(noise.t.T)
    dW_cols = np.ascontiguousarray(noise.dW.T)
    for l in range(L1):
        t = t_cols[l]
        if record:
            Xpre[:, l] = X
        if l in jump_col_set:
            rows = np.flatnonzero(noise.jump[:, l])
            X_minus = X[rows]
            tj = t[rows]
            u_j = control_value(law, tj, X_minus, m, at_jump=True)
            marks = noise.mark[rows, l]
            X_new = np.empty_like(X_minus)
            for k in np.unique(marks):
                sel = marks == k
                Ek = c.E[k].at(tj[sel])
                Fk = c.F[k].at(tj[sel])
                xm = X_minus[sel]
                X_new[sel] = xm + _mv(Ek, xm) + _mv(Fk, u_j[sel])
            X[rows] = X_new
            N[rows] += 1
            if record:
                ujump[rows, l] = u_j
        if record:
            Xs[:, l] = X
        if l == L:
            break
        dt = t_cols[l + 1] - t
        dW = dW_cols[l]
        u = control_value(law, t, X, m)
        if on_interval is not None:
            on_interval(t, dt, X, u, W, N)
        if record:
            us[:, l] = u
        if comp_const:
            X = _euler_const(X, np.ascontiguousarray(u, dtype=float), dt, dW, Ad, Bd, Cc, Dc)
        else:
            A, B, C, D = c.A.at(t), c.B.at(t), c.C.at(t), c.D.at(t)
            drift = _mv(A, X) + _mv(B, u) - (_mv(_mark_sum(c.E, lam, t), X)
                                             + _mv(_mark_sum(c.F, lam, t), u))
            diffusion = _mv(C, X) + _mv(D, u)
            X = X + drift * dt[:, None] + diffusion * dW[:, None]
        W = W + dW
        big = np.abs(X)
        if not np.all(big <= OVERFLOW_GUARD):
            bad = int(np.flatnonzero(~np.all(big <= OVERFLOW_GUARD, axis=1))[0])
            raise StateBlowUp(
                f"state exceeded {OVERFLOW_GUARD:g} on path {int(noise.indices[bad])} "
                f"at t={float(noise.t[bad, l + 1]):.6g}",
                path_index=int(noise.indices[bad]), time=float(noise.t[bad, l + 1]))

    res = MarchResult(X_T=X, W_T=W, N_T=N)
    if record:
        res.X, res.X_pre, res.u, res.u_jump = Xs, Xpre, us, ujump
    return res


# ---------------------------------------------------------------------------
# single paths
# ---------------------------------------------------------------------------


@dataclass
class SamplePath:
    grid: TimeGrid  # jump times inserted
    events: list[JumpEvent]
    brownian_increments: np.ndarray  # (L,)
    X: np.ndarray  # (L+1, n) post-jump values
    X_pre: np.ndarray  # (L+1, n) left limits
    u: np.ndarray  # (L, m) control on each interval
    u_jump: np.ndarray  # (n_events, m)
    jump: np.ndarray  # (L+1,) bool
    mark: np.ndarray  # (L+1,) int, -1 off jumps
    seed: int
    index: int

    @property
    def t(self) -> np.ndarray:
        return self.grid.knots

    def to_noise(self) -> NoiseBatch:
        """Re-wrap this path's randomness so it can be replayed under another law."""
        return NoiseBatch(self.t[None, :].copy(), self.brownian_increments[None, :].copy(),
                          self.jump[None, :].copy(), self.mark[None, :].copy(),
                          np.array([self.t.size]), np.array([self.index]), self.seed,
                          [list(self.events)])

    def to_csv(self, path, mark_ids: Sequence[str] | None = None) -> None:
        """Write the path to a file path or an open text stream."""
        n, m = self.X.shape[1], self.u.shape[1]
        header = ["t"] + [f"X_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)]
        header += ["is_jump", "mark_id"]
        with _text_sink(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, ti in enumerate(self.t):
                u = self.u[i] if i < self.u.shape[0] else [""] * m
                k = int(self.mark[i])
                mid = "" if k < 0 else (mark_ids[k] if mark_ids else k)
                w.writerow([repr(float(ti))] + [repr(float(x)) for x in self.X[i]]
                           + [x if x == "" else repr(float(x)) for x in u]
                           + [int(self.jump[i]), mid])


def _noise_from_rng(jm, grid, rng, seed, index) -> NoiseBatch:
    return _assemble([_path_noise(jm, grid.knots, rng)], grid.knots, seed, [index])


def simulate_state(problem: LQProblem, law, xi, grid: TimeGrid | None = None,
                   seed: int = 0, index: int = 0,
                   rng: np.random.Generator | None = None) -> SamplePath:
    """Simulate one path; the randomness is ``path_rng(seed, index)`` unless ``rng`` is given."""
    grid = grid or TimeGrid.for_problem(problem)
    if not (math.isclose(grid.start, problem.t0) and math.isclose(grid.stop, problem.T)):
        raise OutOfRange("simulation grid must span the problem horizon")
    if rng is None:
        rng = path_rng(seed, index)
    noise = _noise_from_rng(problem.jump_measure, grid, rng, seed, index)
    return replay(problem, law, xi, noise)


def replay(problem: LQProblem, law, xi, noise: NoiseBatch, row: int = 0) -> SamplePath:
    """Run ``law`` on one recorded path of ``noise`` and return the full trajectory."""
    if noise.n_paths != 1:
        noise = _select(noise, [row])
    res = march(problem, law, xi, noise, record=True)
    L1 = int(noise.n_knots[0])
    jump = noise.jump[0, :L1].copy()
    return SamplePath(
        grid=TimeGrid(noise.t[0, :L1].copy()),
        events=list(noise.events[0]),
        brownian_increments=noise.dW[0, :L1 - 1].copy(),
        X=res.X[0, :L1], X_pre=res.X_pre[0, :L1], u=res.u[0, :L1 - 1],
        u_jump=res.u_jump[0, :L1][jump], jump=jump, mark=noise.mark[0, :L1].copy(),
        seed=noise.seed, index=int(noise.indices[0]))


def _select(noise: NoiseBatch, rows) -> NoiseBatch:
    rows = list(rows)
    L1 = int(noise.n_knots[rows].max())
    return NoiseBatch(noise.t[rows, :L1], noise.dW[rows, :L1 - 1], noise.jump[rows, :L1],
                      noise.mark[rows, :L1], noise.n_knots[rows], noise.indices[rows],
                      noise.seed, [noise.events[r] for r in rows])


def brownian_and_count_at(noise: NoiseBatch, t: float, tol: float = 1e-12):
    """``(W(t), N(t))`` for every path of ``noise``; ``t`` should be a knot of the base grid."""
    upto = noise.t[:, 1:] <= t + tol
    W = np.where(upto, noise.dW, 0.0).sum(axis=1)
    N = (noise.jump & (noise.t <= t + tol)).sum(axis=1)
    return W, N
