"""Elementwise hot loops: log-gamma, digamma, and max-pool binning.

Each kernel has a compiled loop (``*_numba``) and a vectorized numpy twin
(``*_numpy``) running the same recurrence + asymptotic series, so the two
paths agree to a few ulp. The unsuffixed names dispatch on ``USE_NUMBA``.
Inputs are assumed validated; see :mod:`xvdistill.specfn` for the checked API.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# Arguments are pushed up to this value with the recurrence before the
# asymptotic series is applied; at 10 the truncated tails are < 1e-17.
SHIFT = 10.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_2n / (2n (2n - 1)), n = 1..8
_LGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
])

# B_2n / (2n), n = 1..7
_DIGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
])


@njit
def _lgamma_scalar(x):
    prod = 1.0
    while x < SHIFT:
        prod *= x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = 0.0
    for j in range(_LGAMMA_SERIES.shape[0] - 1, -1, -1):
        series = series * inv2 + _LGAMMA_SERIES[j]
    out = (x - 0.5) * math.log(x) - x + HALF_LOG_2PI + series * inv
    return out - math.log(prod)


@njit
def _digamma_scalar(x):
    acc = 0.0
    while x < SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = 0.0
    for j in range(_DIGAMMA_SERIES.shape[0] - 1, -1, -1):
        series = series * inv2 + _DIGAMMA_SERIES[j]
    return acc + math.log(x) - 0.5 * inv - series * inv2


@njit
def _lgamma_loop(flat):
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = _lgamma_scalar(flat[i])
    return out


@njit
def _digamma_loop(flat):
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = _digamma_scalar(flat[i])
    return out


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    return x, np.ascontiguousarray(x).reshape(-1)


def lgamma_numba(x):
    x, flat = _flat(x)
    return _lgamma_loop(flat).reshape(x.shape)


def digamma_numba(x):
    x, flat = _flat(x)
    return _digamma_loop(flat).reshape(x.shape)


def lgamma_numpy(x):
    x = np.array(x, dtype=np.float64)
    prod = np.ones_like(x)
    small = x < SHIFT
    while small.any():
        prod[small] *= x[small]
        x[small] += 1.0
        small = x < SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in _LGAMMA_SERIES[::-1]:
        series = series * inv2 + c
    out = (x - 0.5) * np.log(x) - x + HALF_LOG_2PI + series * inv
    return out - np.log(prod)


def digamma_numpy(x):
    x = np.array(x, dtype=np.float64)
    acc = np.zeros_like(x)
    small = x < SHIFT
    while small.any():
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in _DIGAMMA_SERIES[::-1]:
        series = series * inv2 + c
    return acc + np.log(x) - 0.5 * inv - series * inv2


@njit
def _maxpool_loop(rows, cols, values, n_rows, n_cols, fill):
    grid = np.full((n_rows, n_cols), fill)
    for i in range(values.shape[0]):
        r = rows[i]
        c = cols[i]
        if values[i] > grid[r, c]:
            grid[r, c] = values[i]
    return grid


def maxpool_numba(rows, cols, values, shape, fill):
    """Per-cell maximum of ``values`` binned at (rows, cols); empty cells get ``fill``."""
    return _maxpool_loop(
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(values, dtype=np.float64),
        int(shape[0]), int(shape[1]), float(fill),
    )


def maxpool_numpy(rows, cols, values, shape, fill):
    grid = np.full(tuple(shape), float(fill))
    np.maximum.at(grid, (np.asarray(rows), np.asarray(cols)),
                  np.asarray(values, dtype=np.float64))
    return grid


if USE_NUMBA:
    lgamma, digamma, maxpool = lgamma_numba, digamma_numba, maxpool_numba
else:
    lgamma, digamma, maxpool = lgamma_numpy, digamma_numpy, maxpool_numpy
