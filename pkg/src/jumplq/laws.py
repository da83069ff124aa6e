"""Admissible control laws, all of the affine form ``u(s) = K(s) X(s-) + v(s)``.

``gain(t)`` returns ``K`` (``None`` when absent) and ``offset(t, at_jump)`` returns
``v``. Interval controls are read at the left end of each step; at a jump time the
open-loop part is read as a left limit so the control stays predictable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange


class ControlLaw:
    kind = "law"

    def gain(self, t):
        return None

    def offset(self, t, at_jump: bool = False):
        return None

    def __mul__(self, c: float) -> ControlLaw:
        return Superposition(((float(c), self),))

    __rmul__ = __mul__

    def __add__(self, other: ControlLaw) -> ControlLaw:
        return Superposition(((1.0, self), (1.0, other)))

    def __sub__(self, other: ControlLaw) -> ControlLaw:
        return Superposition(((1.0, self), (-1.0, other)))

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class Zero(ControlLaw):
    kind = "zero"


@dataclass(frozen=True, eq=False)
class OpenLoopTable(ControlLaw):
    """Piecewise-constant deterministic control: ``values[k]`` on ``[knots[k], knots[k+1])``."""

    knots: np.ndarray
    values: np.ndarray  # (len(knots) - 1, m)
    kind = "open_loop"

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if knots.ndim != 1 or values.shape[0] != knots.size - 1:
            raise ValueError("open-loop table needs one value row per knot interval")
        if not np.all(np.isfinite(values)):
            raise ValueError("open-loop values must be finite")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, start: float, stop: float) -> OpenLoopTable:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.array([start, stop]), value[None, :])

    def offset(self, t, at_jump=False):
        t = np.asarray(t, dtype=float)
        k = self.knots
        if np.any(t < k[0]) or np.any(t > k[-1]):
            raise OutOfRange(f"open-loop control defined on [{k[0]}, {k[-1]}] only")
        if self.values.shape[0] == 1:
            return self.values[0]
        side = "left" if at_jump else "right"
        idx = np.clip(np.searchsorted(k, t, side=side) - 1, 0, self.values.shape[0] - 1)
        return self.values[idx]

    def describe(self):
        if self.values.shape[0] == 1:
            return {"kind": self.kind, "value": self.values[0].tolist()}
        return {"kind": self.kind, "knots": self.knots.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True, eq=False)
class Feedback(ControlLaw):
    """Linear state feedback ``u = Theta(t) X(t-)`` from a Riccati solution or a fixed matrix."""

    theta: object  # RiccatiSolution or (m, n) array
    kind = "feedback"

    def gain(self, t):
        if hasattr(self.theta, "theta_at"):
            fixed = self.theta.constant_theta
            return fixed if fixed is not None else self.theta.theta_at(t)
        return np.asarray(self.theta, dtype=float)


@dataclass(frozen=True, eq=False)
class BasisSpike(ControlLaw):
    """``amplitude * e_coordinate`` on one interval of a partition, zero elsewhere."""

    interval: int
    coordinate: int
    amplitude: float
    partition: np.ndarray
    m: int
    kind = "spike"

    def __post_init__(self):
        part = np.asarray(self.partition, dtype=float)
        if not (0 <= self.interval < part.size - 1):
            raise ValueError("spike interval index out of range")
        if not (0 <= self.coordinate < self.m):
            raise ValueError("spike coordinate out of range")
        if not np.isfinite(self.amplitude):
            raise ValueError("spike amplitude must be finite")
        object.__setattr__(self, "partition", part)

    def offset(self, t, at_jump=False):
        t = np.asarray(t, dtype=float)
        a, b = self.partition[self.interval], self.partition[self.interval + 1]
        inside = (t > a) & (t <= b) if at_jump else (t >= a) & (t < b)
        e = np.zeros(self.m)
        e[self.coordinate] = self.amplitude
        return inside[..., None] * e

    def describe(self):
        return {"kind": self.kind, "interval": self.interval, "coordinate": self.coordinate,
                "amplitude": self.amplitude}


@dataclass(frozen=True, eq=False)
class Superposition(ControlLaw):
    """Linear combination ``sum c_i * law_i``."""

    terms: tuple[tuple[float, ControlLaw], ...]
    kind = "superposition"

    def gain(self, t):
        acc = None
        for c, law in self.terms:
            K = law.gain(t)
            if K is not None:
                acc = c * K if acc is None else acc + c * K
        return acc

    def offset(self, t, at_jump=False):
        acc = None
        for c, law in self.terms:
            v = law.offset(t, at_jump)
            if v is not None:
                acc = c * v if acc is None else acc + c * v
        return acc

    def describe(self):
        return {"kind": self.kind,
                "terms": [{"coef": c, "law": law.describe()} for c, law in self.terms]}


def spike_basis(m: int, n_intervals: int, start: float, stop: float,
                amplitude: float = 1.0) -> list[BasisSpike]:
    """``m * n_intervals`` spikes ordered interval-major."""
    part = np.linspace(start, stop, n_intervals + 1)
    return [BasisSpike(i, j, amplitude, part, m) for i in range(n_intervals) for j in range(m)]
