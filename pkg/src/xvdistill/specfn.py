"""Log-gamma, digamma and the multivariate log-beta normalizer.

These accept scalars or arrays. Arguments are validated eagerly: a
non-positive or non-finite value raises :class:`DomainError` instead of
leaking a NaN into a loss several calls later.
"""

import numpy as np

from . import kernels


class DomainError(ValueError):
    """Argument outside the domain of a special function or density."""


def _positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {x!r}")
    if np.any(arr <= 0.0):
        raise DomainError(f"{name} must be > 0, got {x!r}")
    return arr


def _unwrap(arr):
    return float(arr) if arr.ndim == 0 else arr


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    return _unwrap(kernels.lgamma(_positive(x, "log_gamma argument")))


def digamma(x):
    """d/dx ln Gamma(x) for x > 0."""
    return _unwrap(kernels.digamma(_positive(x, "digamma argument")))


def log_beta(alpha):
    """sum_i ln Gamma(alpha_i) - ln Gamma(sum_i alpha_i) along the last axis."""
    alpha = _positive(alpha, "alpha")
    if alpha.ndim == 0 or alpha.shape[-1] < 2:
        raise DomainError("log_beta needs at least two components")
    out = kernels.lgamma(alpha).sum(axis=-1) - kernels.lgamma(alpha.sum(axis=-1))
    return _unwrap(np.asarray(out))
