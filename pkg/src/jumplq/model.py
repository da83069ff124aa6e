"""Problem datum for jump-diffusion LQ control: jump measure, coefficients, weights.

Coefficients and weights are deterministic matrix-valued functions of time.
Every provider evaluates on arrays of times, returning ``t.shape + (rows, cols)``,
so the simulator and the Riccati solver can evaluate whole grids at once.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    InvalidHorizon,
    InvalidIntensity,
    NonFiniteCoefficient,
    OutOfRange,
)

log = logging.getLogger(__name__)

ASYMMETRY_WARN = 1e-9


# ---------------------------------------------------------------------------
# matrix-valued functions of time
# ---------------------------------------------------------------------------


class MatrixFunction:
    """Deterministic map ``t -> (rows, cols)`` matrix, vectorised over ``t``."""

    shape: tuple[int, int]
    is_constant = False

    def __call__(self, t):
        raise NotImplementedError

    def at(self, t):
        """Evaluate at ``t``; constant providers return the bare matrix for broadcasting."""
        return self(t)

    def knots(self) -> np.ndarray:
        return np.empty(0)


class ConstantMatrix(MatrixFunction):
    is_constant = True

    def __init__(self, value):
        value = np.array(value, dtype=float)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim == 1:
            value = value.reshape(-1, 1)
        if value.ndim != 2:
            raise DimensionMismatch(f"expected a matrix, got shape {value.shape}")
        value.setflags(write=False)
        self.value = value
        self.shape = value.shape

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(self.value, t.shape + self.shape)

    def at(self, t):
        return self.value

    def __repr__(self):
        return f"ConstantMatrix({self.value.tolist()})"


class CallableMatrix(MatrixFunction):
    """Wrap ``fn(t)``; ``fn`` may be vectorised or scalar-only."""

    def __init__(self, fn: Callable, shape: tuple[int, int], name: str | None = None):
        self.fn = fn
        self.shape = tuple(shape)
        self.name = name or getattr(fn, "__name__", "fn")
        self._vectorised: bool | None = None

    def _scalar(self, t: float) -> np.ndarray:
        out = np.asarray(self.fn(float(t)), dtype=float)
        return out.reshape(self.shape)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self._vectorised is not False:
            try:
                out = np.asarray(self.fn(t), dtype=float)
            except Exception:
                if self._vectorised:
                    raise
                out = None
            if out is not None and out.shape == t.shape + self.shape:
                self._vectorised = True
                return out
            if out is not None and t.ndim == 0 and out.size == math.prod(self.shape):
                return out.reshape(self.shape)
            self._vectorised = False
        flat = t.reshape(-1)
        out = np.empty((flat.size,) + self.shape)
        for i, ti in enumerate(flat):
            out[i] = self._scalar(ti)
        return out.reshape(t.shape + self.shape)

    def __repr__(self):
        return f"CallableMatrix({self.name}, shape={self.shape})"


class GridMatrix(MatrixFunction):
    """Linear interpolation between knots; evaluation outside the knot span is an error."""

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ConfigError("grid provider needs at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise ConfigError("grid knots must be strictly increasing")
        if values.ndim == 1:
            values = values.reshape(-1, 1, 1)
        elif values.ndim == 2:
            values = values.reshape(values.shape[0], -1, 1)
        if values.shape[0] != knots.size:
            raise DimensionMismatch(
                f"{values.shape[0]} sampled matrices for {knots.size} knots")
        self._knots = knots
        self.values = values
        self.shape = values.shape[1:]

    def knots(self):
        return self._knots

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = self._knots
        if np.any(t < k[0]) or np.any(t > k[-1]):
            raise OutOfRange(f"time outside sampled range [{k[0]}, {k[-1]}]")
        idx = np.clip(np.searchsorted(k, t, side="right") - 1, 0, k.size - 2)
        w = ((t - k[idx]) / (k[idx + 1] - k[idx]))[..., None, None]
        return self.values[idx] * (1.0 - w) + self.values[idx + 1] * w


class SymmetrizedMatrix(MatrixFunction):
    def __init__(self, inner: MatrixFunction):
        self.inner = inner
        self.shape = inner.shape

    def knots(self):
        return self.inner.knots()

    def __call__(self, t):
        M = self.inner(t)
        return 0.5 * (M + np.swapaxes(M, -1, -2))


def as_matrix_function(obj, shape: tuple[int, int] | None = None) -> MatrixFunction:
    """Coerce a constant, callable, ``{"knots", "values"}`` mapping or provider."""
    if isinstance(obj, MatrixFunction):
        return obj
    if isinstance(obj, Mapping):
        if "knots" not in obj or "values" not in obj:
            raise ConfigError("grid provider needs 'knots' and 'values'")
        return GridMatrix(obj["knots"], obj["values"])
    if callable(obj):
        if shape is None:
            probe = np.asarray(obj(0.0), dtype=float)
            shape = probe.shape if probe.ndim == 2 else (probe.size, 1)
        return CallableMatrix(obj, shape)
    return ConstantMatrix(obj)


def symmetrize(fn: MatrixFunction, label: str, probe_times=None) -> MatrixFunction:
    """Return the symmetric part of ``fn``; already-symmetric constants pass through untouched."""
    if isinstance(fn, ConstantMatrix):
        M = fn.value
        if np.array_equal(M, M.T):
            return fn
        _warn_asymmetry(M, label)
        return ConstantMatrix(0.5 * (M + M.T))
    if probe_times is not None:
        M = fn(np.asarray(probe_times, dtype=float))
        _warn_asymmetry(M, label)
        if np.array_equal(M, np.swapaxes(M, -1, -2)):
            return fn
    return SymmetrizedMatrix(fn)


def _warn_asymmetry(M, label):
    M = np.asarray(M)
    scale = max(float(np.max(np.abs(M))), 1e-300)
    asym = float(np.max(np.abs(M - np.swapaxes(M, -1, -2)))) / scale
    if asym > ASYMMETRY_WARN:
        log.warning("%s is asymmetric (relative %.3g); using its symmetric part", label, asym)


# ---------------------------------------------------------------------------
# problem datum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpMeasure:
    """Finite jump measure on a finite mark set: intensity per mark, in 1/time."""

    marks: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if len(self.marks) == 0:
            raise InvalidIntensity("jump measure needs at least one mark")
        for mark_id, lam in self.marks:
            if not (math.isfinite(lam) and lam > 0):
                raise InvalidIntensity(f"intensity of mark {mark_id!r} must be finite and > 0, got {lam}")
        ids = [m for m, _ in self.marks]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate mark ids")

    @classmethod
    def single(cls, intensity: float, mark_id: str = "z0") -> JumpMeasure:
        return cls(((mark_id, float(intensity)),))

    @property
    def ids(self) -> list[str]:
        return [m for m, _ in self.marks]

    @property
    def intensities(self) -> np.ndarray:
        return np.array([lam for _, lam in self.marks])

    @property
    def total_intensity(self) -> float:
        return sum(lam for _, lam in self.marks)

    def __len__(self):
        return len(self.marks)


@dataclass(frozen=True)
class CoefficientSet:
    A: MatrixFunction
    B: MatrixFunction
    C: MatrixFunction
    D: MatrixFunction
    E: tuple[MatrixFunction, ...]  # one provider per mark
    F: tuple[MatrixFunction, ...]

    def E_stack(self, t):
        return np.stack([e(t) for e in self.E], axis=-3)

    def F_stack(self, t):
        return np.stack([f(t) for f in self.F], axis=-3)

    def all_constant(self) -> bool:
        return all(p.is_constant for p in (self.A, self.B, self.C, self.D, *self.E, *self.F))

    def providers(self):
        yield "A", self.A
        yield "B", self.B
        yield "C", self.C
        yield "D", self.D
        for k, e in enumerate(self.E):
            yield f"E[{k}]", e
        for k, f in enumerate(self.F):
            yield f"F[{k}]", f


class PathwiseWeights(Protocol):
    """Random additions to Q and G that depend on the Brownian value and jump count."""

    def running(self, t: np.ndarray, W: np.ndarray, N: np.ndarray) -> np.ndarray:
        """Extra running weight, shape ``(P, n, n)`` for ``P`` paths at times ``t``."""

    def terminal(self, W: np.ndarray, N: np.ndarray) -> np.ndarray:
        """Extra terminal weight, shape ``(P, n, n)``."""


@dataclass(frozen=True)
class WeightSet:
    Q: MatrixFunction
    S: MatrixFunction
    R: MatrixFunction
    G: np.ndarray
    pathwise: PathwiseWeights | None = None

    def scaled(self, c: float) -> WeightSet:
        if self.pathwise is not None:
            raise NotImplementedError("scaling pathwise weights is not supported")
        return WeightSet(_scale(self.Q, c), _scale(self.S, c), _scale(self.R, c), c * self.G)

    def __add__(self, other: WeightSet) -> WeightSet:
        if self.pathwise is not None or other.pathwise is not None:
            raise NotImplementedError("adding pathwise weights is not supported")
        return WeightSet(_add(self.Q, other.Q), _add(self.S, other.S),
                         _add(self.R, other.R), self.G + other.G)


def _scale(fn: MatrixFunction, c: float) -> MatrixFunction:
    if fn.is_constant:
        return ConstantMatrix(c * fn.value)
    return CallableMatrix(lambda t: c * fn(t), fn.shape)


def _add(f: MatrixFunction, g: MatrixFunction) -> MatrixFunction:
    if f.is_constant and g.is_constant:
        return ConstantMatrix(f.value + g.value)
    return CallableMatrix(lambda t: f(t) + g(t), f.shape)


@dataclass(frozen=True)
class LQProblem:
    n: int
    m: int
    T: float
    jump_measure: JumpMeasure
    coefficients: CoefficientSet
    weights: WeightSet
    t0: float = 0.0
    name: str | None = field(default=None, compare=False)

    def replace(self, **changes) -> LQProblem:
        from dataclasses import replace
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

_COEF_SHAPES = {"A": ("n", "n"), "B": ("n", "m"), "C": ("n", "n"), "D": ("n", "m"),
                "E": ("n", "n"), "F": ("n", "m")}
_WEIGHT_SHAPES = {"Q": ("n", "n"), "S": ("m", "n"), "R": ("m", "m"), "G": ("n", "n")}


def _parse_jump_measure(raw) -> JumpMeasure:
    if isinstance(raw, JumpMeasure):
        return raw
    if isinstance(raw, (int, float)):
        return JumpMeasure.single(float(raw))
    marks = []
    for i, entry in enumerate(raw):
        if isinstance(entry, Mapping):
            if "intensity" not in entry:
                raise ConfigError(f"jump_measure[{i}]: missing 'intensity'")
            marks.append((str(entry.get("id", f"z{i}")), float(entry["intensity"])))
        else:
            mark_id, lam = entry
            marks.append((str(mark_id), float(lam)))
    return JumpMeasure(tuple(marks))


def _per_mark(raw, ids: Sequence[str], label: str, default_shape):
    if raw is None:
        return [np.zeros(default_shape)] * len(ids)
    if isinstance(raw, Mapping) and not ("knots" in raw and "values" in raw):
        missing = [i for i in ids if i not in raw]
        if missing:
            raise ConfigError(f"{label}: no entry for marks {missing}")
        return [raw[i] for i in ids]
    if isinstance(raw, (list, tuple)) and len(raw) == len(ids) and len(ids) > 1 and all(
            isinstance(r, (MatrixFunction, Mapping)) or callable(r) or np.ndim(r) == 2 for r in raw):
        return list(raw)
    return [raw] * len(ids)


def _grid_entry(section: Mapping, key: str):
    """Turn a ``kind: grid`` section entry into a ``{"knots", "values"}`` mapping."""
    value = section.get(key)
    if value is None or isinstance(value, (MatrixFunction, Mapping)) or callable(value):
        return value
    return {"knots": section["knots"], "values": value}


def _section(spec: Mapping, name: str) -> dict:
    sec = dict(spec.get(name) or {})
    kind = sec.pop("kind", "constant")
    if kind == "grid":
        if "knots" not in sec:
            raise ConfigError(f"{name}: grid kind requires 'knots'")
        out = {}
        for key in sec:
            if key == "knots":
                continue
            if key in ("E", "F") and isinstance(sec[key], Mapping):
                out[key] = {mid: {"knots": sec["knots"], "values": v} for mid, v in sec[key].items()}
            else:
                out[key] = _grid_entry(sec, key)
        return out
    if kind not in ("constant", "analytic", "callable"):
        raise ConfigError(f"{name}: unknown kind {kind!r}")
    return sec


def validate_problem(spec: Mapping[str, Any] | LQProblem) -> LQProblem:
    """Build a checked :class:`LQProblem` from a config mapping.

    Accepted coefficient entries are constants (nested lists / arrays), callables of
    time, ``{"knots", "values"}`` grids or :class:`MatrixFunction` instances. Missing
    entries default to zero (``R`` defaults to the identity). A mapping with a
    ``"builtin"`` key resolves to the named built-in problem, with optional
    ``"params"`` overrides.
    """
    if isinstance(spec, LQProblem):
        spec = _problem_to_spec(spec)
    if "builtin" in spec:
        from .examples import builtin
        return builtin(spec["builtin"], **dict(spec.get("params") or {})).problem

    try:
        n, m = int(spec["n"]), int(spec["m"])
        T = float(spec["T"])
    except KeyError as exc:
        raise ConfigError(f"missing required key {exc.args[0]!r}") from None
    t0 = float(spec.get("t0", 0.0))
    if n <= 0 or m <= 0:
        raise DimensionMismatch(f"dimensions must be positive, got n={n}, m={m}")
    if not (math.isfinite(T) and T > t0):
        raise InvalidHorizon(f"horizon must be finite and exceed t0={t0}, got T={T}")
    jm = _parse_jump_measure(spec.get("jump_measure", 1.0))
    dims = {"n": n, "m": m}

    coef = _section(spec, "coefficients")
    weights = _section(spec, "weights")
    unknown = set(coef) - set(_COEF_SHAPES)
    if unknown:
        raise ConfigError(f"coefficients: unknown keys {sorted(unknown)}")
    unknown = set(weights) - set(_WEIGHT_SHAPES) - {"pathwise"}
    if unknown:
        raise ConfigError(f"weights: unknown keys {sorted(unknown)}")

    def shape_of(key, table):
        r, c = table[key]
        return dims[r], dims[c]

    def build(key, raw, table, label=None):
        shape = shape_of(key, table)
        if raw is None:
            raw = np.eye(shape[0]) if key == "R" else np.zeros(shape)
        fn = as_matrix_function(raw, shape)
        if tuple(fn.shape) != shape:
            raise DimensionMismatch(f"{label or key} has shape {tuple(fn.shape)}, expected {shape}")
        return fn

    ids = jm.ids
    coefs = CoefficientSet(
        A=build("A", coef.get("A"), _COEF_SHAPES),
        B=build("B", coef.get("B"), _COEF_SHAPES),
        C=build("C", coef.get("C"), _COEF_SHAPES),
        D=build("D", coef.get("D"), _COEF_SHAPES),
        E=tuple(build("E", r, _COEF_SHAPES, f"E[{i}]")
                for i, r in zip(ids, _per_mark(coef.get("E"), ids, "E", (n, n)))),
        F=tuple(build("F", r, _COEF_SHAPES, f"F[{i}]")
                for i, r in zip(ids, _per_mark(coef.get("F"), ids, "F", (n, m)))),
    )

    G = np.array(weights.get("G", np.zeros((n, n))), dtype=float)
    if G.ndim == 0:
        G = G.reshape(1, 1)
    if G.shape != (n, n):
        raise DimensionMismatch(f"G has shape {G.shape}, expected {(n, n)}")
    if not np.all(np.isfinite(G)):
        raise NonFiniteCoefficient("G has non-finite entries")
    if not np.array_equal(G, G.T):
        _warn_asymmetry(G, "G")
        G = 0.5 * (G + G.T)
    G.setflags(write=False)

    Q = build("Q", weights.get("Q"), _WEIGHT_SHAPES)
    S = build("S", weights.get("S"), _WEIGHT_SHAPES)
    R = build("R", weights.get("R"), _WEIGHT_SHAPES)
    probe = _probe_times(t0, T, [p for _, p in coefs.providers()] + [Q, S, R])
    ws = WeightSet(Q=symmetrize(Q, "Q", probe), S=S, R=symmetrize(R, "R", probe), G=G,
                   pathwise=weights.get("pathwise"))

    for label, fn in list(coefs.providers()) + [("Q", ws.Q), ("S", ws.S), ("R", ws.R)]:
        vals = fn(probe)
        if not np.all(np.isfinite(vals)):
            bad = probe[~np.all(np.isfinite(vals), axis=(-1, -2))][0]
            raise NonFiniteCoefficient(f"{label} is not finite at t={bad}")

    return LQProblem(n=n, m=m, T=T, jump_measure=jm, coefficients=coefs, weights=ws,
                     t0=t0, name=spec.get("name"))


def _probe_times(t0: float, T: float, providers) -> np.ndarray:
    ts = [np.linspace(t0, T, 257)]
    for p in providers:
        k = p.knots()
        if k.size:
            if k[0] > t0 or k[-1] < T:
                raise ConfigError(f"grid provider covers [{k[0]}, {k[-1]}], not the horizon [{t0}, {T}]")
            ts.append(k[(k >= t0) & (k <= T)])
    return np.unique(np.concatenate(ts))


def _problem_to_spec(p: LQProblem) -> dict:
    c, w = p.coefficients, p.weights
    return {
        "n": p.n, "m": p.m, "T": p.T, "t0": p.t0, "name": p.name,
        "jump_measure": p.jump_measure,
        "coefficients": {"kind": "callable", "A": c.A, "B": c.B, "C": c.C, "D": c.D,
                         "E": dict(zip(p.jump_measure.ids, c.E)),
                         "F": dict(zip(p.jump_measure.ids, c.F))},
        "weights": {"kind": "callable", "Q": w.Q, "S": w.S, "R": w.R, "G": w.G,
                    "pathwise": w.pathwise},
    }


# ---------------------------------------------------------------------------
# standard sufficient conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardConditionReport:
    convex1: bool
    convex1_margin: float
    convex2: bool
    convex2_margin: float
    r_min_eig: np.ndarray  # per grid knot
    q_min_eig: float
    g_min_eig: float
    s_max_abs: float
    notes: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"convex1": {"holds": self.convex1, "margin": self.convex1_margin},
                "convex2": {"holds": self.convex2, "margin": self.convex2_margin},
                "q_min_eig": self.q_min_eig, "g_min_eig": self.g_min_eig,
                "s_max_abs": self.s_max_abs, "notes": list(self.notes)}


def _min_eig(M: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(M)[..., 0]


def standard_condition_check(problem: LQProblem, grid, tol: float = 1e-12) -> StandardConditionReport:
    """Check the classical data conditions on every knot of ``grid``.

    ``convex1``: Q >= 0, G >= 0, S = 0 and R >= eps*I, where the reported margin is
    ``eps = min_t min-eig R(t)`` and must be positive. ``convex2`` (only for n == m):
    Q, R >= 0, S = 0, G >= eps*I and either D'D >= eps*I or F(z)'F(z) >= eps*I for
    every mark; its margin is the smaller of the G and D/F eigenvalue bounds.
    """
    t = np.asarray(getattr(grid, "knots", grid), dtype=float)
    w, c = problem.weights, problem.coefficients
    notes = []
    if w.pathwise is not None:
        notes.append("pathwise weight parts ignored; deterministic part checked")
    r_eig = _min_eig(w.R(t))
    q_eig = float(np.min(_min_eig(w.Q(t))))
    g_eig = float(_min_eig(w.G))
    s_abs = float(np.max(np.abs(w.S(t))))

    base_ok = q_eig >= -tol and s_abs == 0.0
    margin1 = float(np.min(r_eig))
    convex1 = bool(base_ok and g_eig >= -tol and margin1 > 0)

    if problem.n != problem.m:
        notes.append("convex2 requires n == m")
        convex2, margin2 = False, float("nan")
    else:
        D = c.D(t)
        dd = _min_eig(np.swapaxes(D, -1, -2) @ D)
        ff = np.min(np.stack([_min_eig(np.swapaxes(F, -1, -2) @ F)
                              for F in (f(t) for f in c.F)]), axis=0)
        channel = float(np.min(np.maximum(dd, ff)))
        margin2 = min(g_eig, channel)
        convex2 = bool(base_ok and float(np.min(r_eig)) >= -tol and margin2 > 0)

    return StandardConditionReport(convex1, margin1, convex2, margin2, r_eig,
                                   q_eig, g_eig, s_abs, tuple(notes))
