"""Independent reference implementations used as test oracles.

Deliberately written straight from definitions (loops, brute force, finite
differences) and kept free of the library's own code paths wherever a path
is being checked against them.
"""

from __future__ import annotations

import numpy as np


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def prox_bruteforce_1d(value: float, eta: float, lambda1: float,
                       box: float | None = None, tol: float = 1e-10) -> float:
    """Ternary search for argmin_y lambda1*|y| + (y - value)^2 / (2 eta).

    The objective is strictly convex, so the search converges; the bracket
    always contains the minimizer because the prox shrinks toward zero.
    """
    lo = min(0.0, value) - 1.0
    hi = max(0.0, value) + 1.0
    if box is not None:
        lo, hi = max(lo, -box), min(hi, box)

    def obj(y):
        return lambda1 * abs(y) + (y - value) ** 2 / (2.0 * eta)

    for _ in range(200):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if obj(m1) <= obj(m2):
            hi = m2
        else:
            lo = m1
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def prox_bruteforce(v: np.ndarray, eta: float, lambda1: float,
                    box: float | None = None) -> np.ndarray:
    return np.array([prox_bruteforce_1d(float(c), eta, lambda1, box) for c in v])


def serial_prox_svrg(problem, epochs: int, m: int, eta: float,
                     batch_size: int, sample_rng: np.random.Generator):
    """Plain single-node variance-reduced proximal descent.

    Draws batches from ``sample_rng`` exactly once per inner step, computes
    the batch gradient difference against the snapshot plus the full snapshot
    gradient, and prox-steps. Returns the per-step iterates (post-update).
    """
    x = np.zeros(problem.d)
    snapshot = x.copy()
    iterates = []
    for _ in range(epochs):
        g_snap = problem.full_grad(snapshot)
        x = snapshot.copy()
        for _ in range(m):
            batch = sample_rng.integers(0, problem.n, size=batch_size)
            u = (problem.grad_batch(batch, x)
                 - problem.grad_batch(batch, snapshot) + g_snap)
            x = problem.prox(eta, x - eta * u)
            iterates.append(x.copy())
        snapshot = x.copy()
    return iterates


def mc_quantize_stats(v: np.ndarray, grid, n_samples: int,
                      rng: np.random.Generator):
    """Monte Carlo mean and mean squared error of the vector quantizer.

    Tiles the vector so each sample flows through the library's vectorized
    sampling path on the exact grid under test; coordinates are independent,
    so the tiled draw gives ``n_samples`` independent quantizations.
    """
    from dqsim.quantizer import quantize_on_grid

    d = v.size
    tiled = np.tile(v, n_samples)
    q = quantize_on_grid(tiled, grid, rng)
    decoded = (q.codes * grid.delta).reshape(n_samples, d)
    err_sq = np.sum((decoded - v) ** 2, axis=1)
    return decoded.mean(axis=0), float(err_sq.mean())
