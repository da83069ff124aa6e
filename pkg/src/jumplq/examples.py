"""Built-in problems with closed-form answers, and the conditional-expectation
machinery for the random-weight example.

Each builtin returns a validated problem plus a manifest of expected quantities.
The random-weight example (``example_9_3``) carries pathwise weights

    Q(s) = Q_0(s) + mu(s) Q_1,      G = G_0 + eta G_1,

where eta = (1/16) sin(W(T)^2) + (1/8) 1{N(T) >= 1} and mu(t) = E[eta | F_t].
Its value matrix is random, so it is checked algebraically and by Monte Carlo,
never through the deterministic Riccati solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfRange, UnknownExample
from .model import CallableMatrix, LQProblem, validate_problem

NESTED_DRAWS = 1_000_000
B_PROBES = ((0.0, 0.0), (0.25, 0.5), (0.5, -1.0), (0.75, 1.5), (0.9, 0.3))

G1 = np.array([[4.0, -2.0], [-2.0, 1.0]])
Q1 = 4.0 * np.array([[0.0, -1.0], [-1.0, 1.0]])
D_MALLIAVIN = np.array([[1.0], [2.0]])


@dataclass(frozen=True)
class Expected:
    value: object  # number, array, or callable of time
    source: str
    tol: float | None = None


@dataclass(frozen=True)
class BuiltinExample:
    name: str
    problem: LQProblem
    manifest: dict[str, Expected]
    defaults: dict = field(default_factory=dict)  # e.g. initial state used by the runner


# ---------------------------------------------------------------------------
# conditional expectation for the random-weight example
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EtaParams:
    brownian_amplitude: float = 1.0 / 16.0
    jump_amplitude: float = 1.0 / 8.0
    T: float = 1.0
    intensity: float = 1.0  # total jump intensity


def gaussian_sin_square_mean(w, var):
    """``E[sin(Y^2)]`` for ``Y ~ Normal(w, var)``, from the Gaussian quadratic characteristic function."""
    w = np.asarray(w, dtype=float)
    var = np.asarray(var, dtype=float)
    z = 1.0 - 2.0j * var
    return np.imag(np.exp(1j * w * w / z) / np.sqrt(z))


def eta(W_T, N_T, params: EtaParams = EtaParams()):
    W_T = np.asarray(W_T, dtype=float)
    return (params.brownian_amplitude * np.sin(W_T * W_T)
            + params.jump_amplitude * (np.asarray(N_T) >= 1))


def malliavin_mu(t, W_t, N_count_pre, params: EtaParams = EtaParams()):
    """``mu(t) = E[eta | F_t]`` given the Brownian value and the jump count before ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > params.T):
        raise OutOfRange(f"t must lie in [0, {params.T}]")
    tau = params.T - t
    brownian = gaussian_sin_square_mean(W_t, tau)
    no_jump = np.asarray(N_count_pre) == 0
    jump = 1.0 - no_jump * np.exp(-params.intensity * tau)
    return params.brownian_amplitude * brownian + params.jump_amplitude * jump


class MalliavinWeights:
    """Pathwise parts ``mu(s) Q_1`` of Q and ``eta G_1`` of G."""

    def __init__(self, params: EtaParams):
        self.params = params

    def running(self, t, W, N):
        mu = malliavin_mu(np.broadcast_to(t, np.shape(W)), W, N, self.params)
        return mu[:, None, None] * Q1

    def terminal(self, W, N):
        return eta(W, N, self.params)[:, None, None] * G1


# ---------------------------------------------------------------------------
# builtins
# ---------------------------------------------------------------------------


def _example_9_1(T=1.0, intensity=1.0):
    spec = {"name": "example_9_1", "n": 1, "m": 1, "T": T,
            "jump_measure": [{"id": "z0", "intensity": intensity}],
            "coefficients": {"D": [[1.0]], "F": [[1.0]]},
            "weights": {"G": [[-0.75]], "Q": [[0.0]], "S": [[0.0]],
                        "R": CallableMatrix(lambda s: (np.asarray(s) ** 2 + 2.0)[..., None, None],
                                            (1, 1), "s^2+2")}}
    manifest = {
        "P": Expected(-0.75, "P constant -3/4", 1e-8),
        "R_hat": Expected(lambda s: s * s + 0.5, "R_hat(s) = s^2 + 1/2", 1e-8),
        "S_hat": Expected(0.0, "S_hat vanishes", 1e-10),
        "Theta": Expected(0.0, "optimal feedback is zero", 1e-10),
        "R_hat_lower_bound": Expected(0.5, "R_hat >= 1/2"),
    }
    return validate_problem(spec), manifest, {"xi": [1.0]}


def _example_9_2(T=1.0, intensity=1.0):
    e1 = [[1.0], [0.0]]
    spec = {"name": "example_9_2", "n": 2, "m": 1, "T": T,
            "jump_measure": [{"id": "z0", "intensity": intensity}],
            "coefficients": {"D": e1, "F": e1},
            "weights": {"G": [[5.0, 0.0], [0.0, -1.0]], "R": [[-9.0]]}}
    manifest = {
        "P": Expected(np.diag([5.0, -1.0]), "P = diag(5, -1)", 1e-8),
        "R_hat": Expected(1.0, "R_hat = 5 + 5 - 9 = 1", 1e-8),
        "S_hat": Expected(0.0, "S_hat vanishes", 1e-10),
        "Theta": Expected(0.0, "optimal feedback is zero", 1e-10),
        "value_at_(1,1)": Expected(4.0, "<P xi, xi> at xi = (1, 1)", 1e-8),
        "convexity_eps": Expected(1.0, "uniform convexity with eps = 1"),
    }
    return validate_problem(spec), manifest, {"xi": [1.0, 1.0]}


def _p0(t, T=None):
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = -(1.0 + t * t)
    out[..., 0, 1] = out[..., 1, 0] = t
    out[..., 1, 1] = 1.0 + t * t
    return out


def _q0(s):
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape + (2, 2))
    out[..., 0, 0] = 2.0 * s
    out[..., 0, 1] = out[..., 1, 0] = s * s
    out[..., 1, 1] = -4.0 * s
    return out


def _example_9_3(T=1.0):
    params = EtaParams(T=T, intensity=1.0)
    spec = {"name": "example_9_3", "n": 2, "m": 1, "T": T,
            "jump_measure": [{"id": "z0", "intensity": 1.0}],
            "coefficients": {"A": [[0.0, 1.0], [0.0, 0.0]], "D": D_MALLIAVIN, "F": D_MALLIAVIN},
            "weights": {"G": _p0(T), "S": [[0.0, 0.0]],
                        "Q": CallableMatrix(_q0, (2, 2), "Q0"),
                        "R": CallableMatrix(lambda s: -(1.0 + np.asarray(s) ** 2)[..., None, None],
                                            (1, 1), "-(1+s^2)"),
                        "pathwise": MalliavinWeights(params)}}
    manifest = {
        "D'G1": Expected(np.zeros((1, 2)), "D'G_1 = (0, 0)", 0.0),
        "F'G1F": Expected(0.0, "F'G_1F = 0", 0.0),
        "R_hat": Expected(lambda s: 5.0 + 5.0 * s * s + 8.0 * s, "R_hat(s) = 5 + 5s^2 + 8s", 1e-12),
        "S_hat": Expected(0.0, "S_hat vanishes", 1e-12),
        "J(0,0;u=1)": Expected(5.0 * T + 5.0 * T ** 3 / 3.0 + 4.0 * T * T,
                               "J(0,0;u) = E int R_hat |u|^2 ds at u = 1"),
        "convexity_eps": Expected(5.0, "uniform convexity with eps = 5"),
        "eta_bound": Expected(3.0 / 16.0, "|eta| <= 1/16 + 1/8"),
    }
    return validate_problem(spec), manifest, {"xi": [0.0, 0.0], "params": params}


def _counterexample_6_1(T=1.0, intensity=1.0):
    spec = {"name": "counterexample_6_1", "n": 1, "m": 1, "T": T,
            "jump_measure": [{"id": "z0", "intensity": intensity}],
            "coefficients": {"E": [[-1.0]]},
            "weights": {"R": [[1.0]]}}
    manifest = {
        "P": Expected(0.0, "P constant 0", 1e-8),
        "R_hat": Expected(1.0, "R_hat = 1", 1e-8),
        "Theta": Expected(0.0, "optimal control is zero", 1e-10),
        "jump_multiplier_min_abs_det": Expected(0.0, "1 + E = 0", 1e-12),
        "P(X(T)=0)": Expected(1.0 - math.exp(-intensity * T), "1 - exp(-lambda(Z) T)"),
    }
    return validate_problem(spec), manifest, {"xi": [1.0]}


def _counterexample_6_2(T=1.0, intensity=0.5):
    spec = {"name": "counterexample_6_2", "n": 1, "m": 1, "T": T,
            "jump_measure": [{"id": "z0", "intensity": intensity}],
            "coefficients": {"B": [[1.0]], "F": [[1.0]]},
            "weights": {"R": [[1.0]], "Q": [[2.0]], "G": [[2.0]]}}
    manifest = {
        "P": Expected(2.0, "P constant 2", 1e-8),
        "R_hat": Expected(2.0, "R_hat = 1 + lambda * 2 = 2", 1e-8),
        "S_hat": Expected(2.0, "S_hat = 2", 1e-8),
        "Theta": Expected(-1.0, "Theta = -1", 1e-8),
        "jump_multiplier_min_abs_det": Expected(0.0, "1 + E + F Theta = 0", 1e-12),
        "P(X(T)=0)": Expected(1.0 - math.exp(-intensity * T), "P(T_1 <= T) = 1 - exp(-T/2)"),
    }
    return validate_problem(spec), manifest, {"xi": [1.0]}


_BUILDERS = {
    "example_9_1": _example_9_1,
    "example_9_2": _example_9_2,
    "example_9_3": _example_9_3,
    "counterexample_6_1": _counterexample_6_1,
    "counterexample_6_2": _counterexample_6_2,
}

DESCRIPTIONS = {
    "example_9_1": "scalar problem with negative terminal weight; P constant -3/4",
    "example_9_2": "two-dimensional problem, indefinite P and R = -9 < 0",
    "example_9_3": "random weights built from a Malliavin-differentiable terminal variable",
    "counterexample_6_1": "zero-control state is annihilated at the first jump",
    "counterexample_6_2": "optimal closed-loop jump multiplier 1 + E + F Theta vanishes",
}


def names() -> list[str]:
    return list(_BUILDERS)


def builtin(name: str, **params) -> BuiltinExample:
    """Return the named built-in problem; ``params`` override ``T`` or the intensity."""
    try:
        build = _BUILDERS[name]
    except KeyError:
        raise UnknownExample(f"unknown example {name!r}; choose from {names()}") from None
    problem, manifest, defaults = build(**params)
    return BuiltinExample(name, problem, manifest, defaults)


# ---------------------------------------------------------------------------
# checks of the random-weight example
# ---------------------------------------------------------------------------


def nested_mc_sin_square(w: float, var: float, n_draws: int = NESTED_DRAWS, seed: int = 0):
    """Plain Monte-Carlo estimate of ``E[sin(Y^2)]``, ``Y ~ Normal(w, var)``."""
    from .costs import MCEstimate

    rng = np.random.default_rng(seed)
    y = w + math.sqrt(var) * rng.standard_normal(n_draws)
    return MCEstimate.from_samples(np.sin(y * y), seed=seed)


def malliavin_verify(n_paths: int = 10_000, seed: int = 0, grid=None, *,
                     T: float = 1.0, workers: int = 1, nested_draws: int = NESTED_DRAWS):
    """Algebraic and Monte-Carlo checks of the random-weight example.

    Returns a list of :class:`~jumplq.verify.VerificationReport`.
    """
    from .costs import MCEstimate, mc_cost, run_paths
    from .laws import OpenLoopTable
    from .riccati import aggregate_weights
    from .simulate import TimeGrid, brownian_and_count_at
    from .verify import VerificationReport

    ex = builtin("example_9_3", T=T)
    problem, params = ex.problem, ex.defaults["params"]
    grid = grid or TimeGrid.for_problem(problem)
    reports = []

    # (a) the kernel relation that makes the random part of P invisible to the control
    D = problem.coefficients.D.at(0.0)
    F = problem.coefficients.F[0].at(0.0)
    reports.append(VerificationReport("D'G1 = 0", float(np.max(np.abs(D.T @ G1))), 0.0, 0.0,
                                      diagnostics={"D'G1": D.T @ G1}))
    reports.append(VerificationReport("F'G1F = 0", float(np.max(np.abs(F.T @ G1 @ F))), 0.0, 0.0))

    # (b) aggregated weights for several values of the random coefficient of G1
    knots = grid.knots
    target = 5.0 + 5.0 * knots ** 2 + 8.0 * knots
    worst_R, worst_S = 0.0, 0.0
    for mu in (-3.0 / 16.0, 0.0, 3.0 / 16.0):
        S_hat, R_hat = aggregate_weights(problem, knots, _p0(knots) + mu * G1)
        worst_R = max(worst_R, float(np.max(np.abs(R_hat[:, 0, 0] - target))))
        worst_S = max(worst_S, float(np.max(np.abs(S_hat))))
    reports.append(VerificationReport("R_hat = 5 + 5s^2 + 8s", worst_R, 0.0, 1e-12,
                                      diagnostics={"n_knots": knots.size}))
    reports.append(VerificationReport("S_hat = 0", worst_S, 0.0, 1e-12))

    # (c) cost of the unit control from the origin against the integral of R_hat
    expected = 5.0 * T + 5.0 * T ** 3 / 3.0 + 4.0 * T * T
    est = mc_cost(problem, OpenLoopTable.constant([1.0], problem.t0, T), np.zeros(2),
                  n_paths, seed, grid, workers=workers)
    shifted = MCEstimate(est.mean - expected, est.stderr, est.n_paths, seed=seed)
    reports.append(VerificationReport.zero_mean("J(0,0;u=1) - int R_hat", shifted,
                                                expected=expected, estimate_mean=est.mean))

    # (d) mu is a martingale: E mu(t) = mu(0)
    mu0 = float(malliavin_mu(0.0, 0.0, 0, params))
    times = (T / 4.0, T / 2.0, T)

    def chunk(noise):
        cols = []
        for t in times:
            W, N = brownian_and_count_at(noise, t)
            cols.append(malliavin_mu(np.full(W.shape, t), W, N, params) - mu0)
        return np.stack(cols, axis=1)

    vals = run_paths(problem, n_paths, seed, grid, chunk, workers=workers)
    for j, t in enumerate(times):
        reports.append(VerificationReport.zero_mean(
            f"E mu({t:g}) - mu(0)", MCEstimate.from_samples(vals[:, j], seed=seed), mu0=mu0))

    # (e) closed-form Gaussian mean of sin(Y^2) against nested sampling
    for i, (t, w) in enumerate(B_PROBES):
        if t > T:
            continue
        var = T - t
        nested = nested_mc_sin_square(w, var, nested_draws, seed + i)
        closed = float(gaussian_sin_square_mean(w, var))
        diff = MCEstimate(nested.mean - closed, nested.stderr, nested.n_paths, seed=nested.seed)
        reports.append(VerificationReport.zero_mean(f"B({t:g},{w:g}) closed form vs nested MC",
                                                    diff, closed_form=closed))
    return reports


# ---------------------------------------------------------------------------
# manifest runner
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    quantity: str
    expected: object
    measured: object
    error: float | None
    tolerance: float | None
    passed: bool | None  # None when the quantity was not measured
    source: str
    note: str = ""

    def as_dict(self) -> dict:
        def plain(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v
        return {k: plain(v) for k, v in self.__dict__.items()}


def _expected_at(value, t):
    return np.asarray(value(t) if callable(value) else value, dtype=float)


def _max_dev(series, expected, t):
    exp = _expected_at(expected, t)
    if exp.ndim == 1 and exp.shape == t.shape:
        exp = exp[:, None, None]
    return float(np.max(np.abs(series - exp)))


def run_example(name: str, n_paths: int = 10_000, seed: int = 0, *, include_gram: bool = False,
                gram_paths: int = 10_000, workers: int = 1, **params) -> list[ManifestRow]:
    """Measure every manifest quantity of a builtin with the generic solvers."""
    from .laws import Feedback
    from .riccati import solve_riccati
    from .verify import annihilation_statistics, convexity_gram

    ex = builtin(name, **params)
    problem = ex.problem
    rows = []
    if name == "example_9_3":
        checks = {r.name: r for r in malliavin_verify(n_paths, seed, T=problem.T, workers=workers)}
        link = {"D'G1": "D'G1 = 0", "F'G1F": "F'G1F = 0", "R_hat": "R_hat = 5 + 5s^2 + 8s",
                "S_hat": "S_hat = 0"}
        for key, exp in ex.manifest.items():
            if key in link:
                r = checks[link[key]]
                rows.append(ManifestRow(key, exp.value if not callable(exp.value) else exp.source,
                                        r.statistic, r.statistic, r.upper, r.passed, exp.source,
                                        "max abs deviation"))
            elif key == "J(0,0;u=1)":
                r = checks["J(0,0;u=1) - int R_hat"]
                rows.append(ManifestRow(key, exp.value, r.diagnostics["estimate_mean"], abs(r.statistic),
                                        r.upper, r.passed, exp.source, "tolerance is 3 stderr"))
            elif key == "eta_bound":
                s = np.linspace(-10, 10, 20001)
                bound = float(np.max(np.abs(eta(s, 1)))), float(np.max(np.abs(eta(s, 0))))
                rows.append(ManifestRow(key, exp.value, max(bound), None, None,
                                        max(bound) <= exp.value, exp.source, "sup over a W(T) grid"))
            elif key == "convexity_eps":
                rows.append(_gram_row(ex, exp, include_gram, gram_paths, seed, workers, convexity_gram))
        return rows

    sol = solve_riccati(problem)
    t = sol.t
    xi = np.asarray(ex.defaults.get("xi", np.zeros(problem.n)), dtype=float)
    for key, exp in ex.manifest.items():
        shown = exp.source if callable(exp.value) else exp.value
        if key in ("P", "R_hat", "S_hat", "Theta"):
            dev = _max_dev(getattr(sol, key), exp.value, t)
            measured = getattr(sol, key)[0]
            rows.append(ManifestRow(key, shown, measured.squeeze(), dev, exp.tol, dev <= exp.tol,
                                    exp.source, "measured at t0; error is max over knots"))
        elif key == "R_hat_lower_bound":
            lo = float(np.min(sol.min_eig_R_hat))
            rows.append(ManifestRow(key, exp.value, lo, None, None, lo >= exp.value - 1e-12, exp.source))
        elif key.startswith("value_at_"):
            v = float(xi @ sol.P[0] @ xi)
            rows.append(ManifestRow(key, exp.value, v, abs(v - exp.value), exp.tol,
                                    abs(v - exp.value) <= exp.tol, exp.source))
        elif key == "jump_multiplier_min_abs_det":
            d = sol.jump_multiplier_min_abs_det
            rows.append(ManifestRow(key, exp.value, d, abs(d - exp.value), exp.tol,
                                    abs(d - exp.value) <= exp.tol, exp.source))
        elif key == "P(X(T)=0)":
            st = annihilation_statistics(problem, Feedback(sol), xi, n_paths, seed, workers=workers)
            est = st["zero_at_horizon"]
            err = abs(est.mean - exp.value)
            rows.append(ManifestRow(key, exp.value, est.mean, err, 3 * est.stderr,
                                    err <= 3 * est.stderr and st["n_jumped_not_annihilated"] == 0,
                                    exp.source,
                                    f"optimal closed loop, {n_paths} paths; "
                                    f"{st['n_jumped_not_annihilated']} jumped paths not annihilated"))
        elif key == "convexity_eps":
            rows.append(_gram_row(ex, exp, include_gram, gram_paths, seed, workers, convexity_gram))
    return rows


def _gram_row(ex, exp, include, n_paths, seed, workers, convexity_gram):
    if not include:
        return ManifestRow("convexity_eps", exp.value, None, None, None, None, exp.source,
                           "skipped; request the Gram estimate to measure")
    g = convexity_gram(ex.problem, 8, n_paths, seed, workers=workers)
    tol = 0.2 * exp.value
    err = abs(g.eps_hat - exp.value)
    return ManifestRow("convexity_eps", exp.value, g.eps_hat, err, tol, err <= tol, exp.source,
                       f"Gram estimate, 8 intervals, {n_paths} paths per cell")
