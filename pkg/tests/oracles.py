"""Independent numerical oracles shared by the test modules."""

import numpy as np


def central_diff(f, x, h):
    """Central finite-difference gradient of scalar ``f`` at vector ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def simplex_quadrature(log_density, n=400):
    """Integral of exp(log_density) over the 2-simplex.

    Stick-breaking coordinates x = (u, (1-u)v, (1-u)(1-v)) on an n x n
    midpoint grid, each axis graded by the quintic smoothstep so the
    x_i^(alpha_i - 1) edge singularities (alpha_i < 1) are integrable to
    well below 1e-3.
    """
    s = (np.arange(n) + 0.5) / n
    node = s ** 3 * (10 - 15 * s + 6 * s ** 2)
    jac = 30 * s ** 2 * (1 - s) ** 2
    u, v = np.meshgrid(node, node, indexing="ij")
    w = np.outer(jac, jac) * (1 - u) / n ** 2
    x = np.stack([u, (1 - u) * v, (1 - u) * (1 - v)], axis=-1)
    return float((np.exp(log_density(x)) * w).sum())
