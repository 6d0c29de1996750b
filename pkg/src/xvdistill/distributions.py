"""Dirichlet and Poisson log-likelihoods, their parameter gradients, and samplers.

All densities work along the last axis and broadcast over leading ones, so
a batch of parameters ``(N, k)`` can be scored against one observation
``(k,)`` or a batch ``(N, k)`` in a single call.
"""

import numpy as np

from . import kernels
from .specfn import DomainError, _positive, _unwrap, log_beta

SMOOTH_EPS = 1e-6


def _match(params, obs, what):
    if params.shape[-1] != obs.shape[-1]:
        raise DomainError(
            f"{what}: parameter dimension {params.shape[-1]} != observation dimension {obs.shape[-1]}"
        )


def smooth_simplex(p, eps=SMOOTH_EPS):
    """Mix ``eps`` into every component and renormalize.

    Ground-level classifier outputs underflow to exact zeros, where the
    Dirichlet log-density is undefined.
    """
    p = np.asarray(p, dtype=np.float64)
    if eps <= 0:
        raise DomainError(f"eps must be > 0, got {eps}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("simplex components must be finite and >= 0")
    if np.any(p.sum(axis=-1) <= 0):
        raise DomainError("cannot smooth an all-zero vector")
    q = p + eps
    return q / q.sum(axis=-1, keepdims=True)


def _simplex_obs(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DomainError(
            "Dirichlet observation has a zero or invalid component; pass it through smooth_simplex first"
        )
    return x


def dirichlet_log_pdf(alpha, x):
    alpha = _positive(alpha, "alpha")
    x = _simplex_obs(x)
    _match(alpha, x, "dirichlet_log_pdf")
    out = -log_beta(alpha) + ((alpha - 1.0) * np.log(x)).sum(axis=-1)
    return _unwrap(np.asarray(out))


def dirichlet_nll_grad(alpha, x):
    """Gradient of -log Dir(x | alpha) with respect to alpha."""
    alpha = _positive(alpha, "alpha")
    x = _simplex_obs(x)
    _match(alpha, x, "dirichlet_nll_grad")
    total = alpha.sum(axis=-1, keepdims=True)
    return kernels.digamma(alpha) - kernels.digamma(total) - np.log(x)


def _counts(k):
    k = np.asarray(k)
    if k.dtype.kind == "f":
        if not np.all(np.isfinite(k)) or np.any(k != np.round(k)):
            raise DomainError("counts must be integers")
    elif k.dtype.kind not in "iu":
        raise DomainError(f"counts must be integers, got dtype {k.dtype}")
    if np.any(k < 0):
        raise DomainError("counts must be >= 0")
    return k.astype(np.float64)


def poisson_log_pmf(lam, k):
    """Joint log-pmf of independent per-class Poisson counts."""
    lam = _positive(lam, "lambda")
    k = _counts(k)
    _match(lam, k, "poisson_log_pmf")
    terms = -lam + k * np.log(lam) - kernels.lgamma(k + 1.0)
    return _unwrap(np.asarray(terms.sum(axis=-1)))


def poisson_nll_grad(lam, k):
    lam = _positive(lam, "lambda")
    k = _counts(k)
    _match(lam, k, "poisson_nll_grad")
    return 1.0 - k / lam


def dirichlet_mean(alpha):
    alpha = _positive(alpha, "alpha")
    return alpha / alpha.sum(axis=-1, keepdims=True)


def sample_dirichlet(alpha, rng):
    """Normalized Gamma variates; numpy's gamma sampler is Marsaglia-Tsang."""
    alpha = _positive(alpha, "alpha")
    g = rng.gamma(alpha)
    s = g.sum(axis=-1, keepdims=True)
    if np.any(s == 0.0):
        # every Gamma draw underflowed; only reachable for alpha << 1e-2
        onehot = (alpha == alpha.max(axis=-1, keepdims=True)).astype(np.float64)
        g = np.where(s == 0.0, onehot, g)
        s = g.sum(axis=-1, keepdims=True)
    return g / s


def sample_poisson(lam, rng):
    lam = _positive(lam, "lambda")
    return rng.poisson(lam).astype(np.int64)
