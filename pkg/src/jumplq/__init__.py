"""Finite-horizon LQ control of linear jump-diffusions: Riccati solver, simulator, verifiers."""
