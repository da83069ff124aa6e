"""Reference computations written independently of the package internals."""
import numpy as np


def riccati_rhs(t, P, c):
    """Right-hand side f with -dP/ds = f, from the Riccati formula with explicit mark sums."""
    A, B, C, D = c["A"](t), c["B"](t), c["C"](t), c["D"](t)
    Q, S, R = c["Q"](t), c["S"](t), c["R"](t)
    f = A.T @ P + P @ A + Q + C.T @ P @ C
    Sh = B.T @ P + D.T @ P @ C + S
    Rh = R + D.T @ P @ D
    for lam, E, F in c["marks"]:
        Et, Ft = E(t), F(t)
        f = f + lam * Et.T @ P @ Et
        Sh = Sh + lam * Ft.T @ P @ Et
        Rh = Rh + lam * Ft.T @ P @ Ft
    return f - Sh.T @ np.linalg.solve(Rh, Sh)


def euler_backward(c, G, T, n_steps):
    """Explicit Euler marched from T down to 0; returns P(0)."""
    h = T / n_steps
    P = np.array(G, dtype=float)
    for k in range(n_steps, 0, -1):
        t = k * h
        P = P + h * riccati_rhs(t, P, c)
        P = 0.5 * (P + P.T)
    return P


def euler_richardson(c, G, T, n_steps):
    """First-order Richardson extrapolation of two Euler runs (error O(h^2))."""
    return 2.0 * euler_backward(c, G, T, 2 * n_steps) - euler_backward(c, G, T, n_steps)


def smooth_test_problem():
    """A 2x2, two-mark problem with time-varying coefficients and a nonzero cross term."""
    A = lambda t: np.array([[0.2 * np.sin(t), 1.0], [-0.5, 0.1 * np.cos(t)]])
    B = lambda t: np.array([[0.0], [1.0]])
    C = lambda t: np.array([[0.2, 0.0], [0.1 * t, 0.1]])
    D = lambda t: np.array([[0.1], [0.3]])
    E1 = lambda t: np.array([[0.1, 0.0], [0.0, -0.2]])
    F1 = lambda t: np.array([[0.2], [0.1]])
    E2 = lambda t: np.array([[0.0, 0.1], [0.1, 0.0]])
    F2 = lambda t: np.array([[0.0], [0.2]])
    Q = lambda t: np.array([[1.0 + 0.5 * np.sin(t), 0.1], [0.1, 1.0]])
    S = lambda t: np.array([[0.1, 0.0]])
    R = lambda t: np.array([[1.0 + 0.5 * t * t]])
    G = np.array([[1.0, 0.2], [0.2, 2.0]])
    coeffs = {"A": A, "B": B, "C": C, "D": D, "Q": Q, "S": S, "R": R,
              "marks": [(1.0, E1, F1), (0.5, E2, F2)]}

    def vec(fn):
        return lambda t: np.stack([fn(float(s)) for s in np.atleast_1d(t)]).reshape(np.shape(t) + fn(0.0).shape)

    spec = {"name": "smooth_2x2", "n": 2, "m": 1, "T": 1.0,
            "jump_measure": [{"id": "a", "intensity": 1.0}, {"id": "b", "intensity": 0.5}],
            "coefficients": {"A": vec(A), "B": B(0), "C": vec(C), "D": D(0),
                             "E": {"a": E1(0), "b": E2(0)}, "F": {"a": F1(0), "b": F2(0)}},
            "weights": {"Q": vec(Q), "S": S(0), "R": vec(R), "G": G}}
    return spec, coeffs, G
