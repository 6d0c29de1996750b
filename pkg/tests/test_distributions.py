import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xvdistill.distributions import (dirichlet_log_pdf, dirichlet_mean, dirichlet_nll_grad,
                                     poisson_log_pmf, poisson_nll_grad, sample_dirichlet,
                                     sample_poisson, smooth_simplex)
from xvdistill.specfn import DomainError

from .oracles import central_diff, rel_err, simplex_quadrature


# -- smoothing ------------------------------------------------------------------

def test_smooth_one_hot():
    out = smooth_simplex([1.0, 0.0], 1e-6)
    np.testing.assert_allclose(out, [(1 + 1e-6) / (1 + 2e-6), 1e-6 / (1 + 2e-6)], rtol=1e-15)
    np.testing.assert_allclose(out, [0.9999990, 0.0000010], atol=1e-9)
    assert abs(out.sum() - 1) <= 1e-12


def test_smooth_fixed_point():
    np.testing.assert_allclose(smooth_simplex([0.5, 0.5], 1e-6), [0.5, 0.5], rtol=0, atol=1e-16)


def test_smooth_unnormalized_input():
    np.testing.assert_allclose(smooth_simplex([2.0, 2.0, 0.0], 0.5), [2.5 / 5.5, 2.5 / 5.5, 0.5 / 5.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30).filter(lambda p: sum(p) > 0),
       st.floats(1e-9, 1e-1))
def test_smooth_properties(p, eps):
    q = smooth_simplex(p, eps)
    k = len(p)
    assert abs(q.sum() - 1) <= 1e-12
    assert q.min() >= eps / (sum(p) + k * eps) * (1 - 1e-12)


def test_smooth_rejects_zero_vector():
    with pytest.raises(DomainError):
        smooth_simplex([0.0, 0.0])


# -- Dirichlet --------------------------------------------------------------------

def test_dirichlet_uniform_density():
    assert abs(dirichlet_log_pdf([1, 1], [0.3, 0.7])) <= 1e-12


def test_dirichlet_beta22():
    assert abs(dirichlet_log_pdf([2, 2], [0.5, 0.5]) - math.log(1.5)) <= 1e-12


def test_dirichlet_234():
    expected = math.log(3360) + math.log(0.2) + 2 * math.log(0.3) + 3 * math.log(0.5)
    # the closed form evaluates to 2.02287119; 2.0228727 agrees to 2e-6
    assert abs(expected - 2.0228727) < 2e-6
    assert abs(dirichlet_log_pdf([2, 3, 4], [0.2, 0.3, 0.5]) - expected) <= 1e-10


def test_dirichlet_rejects_zero_component():
    with pytest.raises(DomainError, match="smooth_simplex"):
        dirichlet_log_pdf([1, 1], [1.0, 0.0])


def test_dirichlet_rejects_dimension_mismatch():
    with pytest.raises(DomainError):
        dirichlet_log_pdf([1, 1, 1], [0.5, 0.5])


def test_dirichlet_grad_closed_form():
    g = dirichlet_nll_grad([1, 1], [0.5, 0.5])
    np.testing.assert_allclose(g, [-1 + math.log(2)] * 2, atol=1e-12)


def test_dirichlet_grad_symmetric():
    g = dirichlet_nll_grad([3.0] * 5, [0.2] * 5)
    assert np.ptp(g) == 0


def test_dirichlet_grad_fd_two_dim():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = rng.uniform(0.1, 5, 2)
        x = rng.dirichlet([1, 1])
        fd = central_diff(lambda al: -dirichlet_log_pdf(al, x), a, 1e-6)
        assert rel_err(dirichlet_nll_grad(a, x), fd).max() <= 1e-5


def test_dirichlet_grad_fd_100_points():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        k = rng.integers(2, 8)
        a = rng.uniform(0.1, 5, k)
        x = smooth_simplex(rng.dirichlet(np.ones(k)))
        fd = central_diff(lambda al: -dirichlet_log_pdf(al, x), a, 1e-6)
        worst = max(worst, rel_err(dirichlet_nll_grad(a, x), fd, 1e-6).max())
    assert worst <= 1e-4


def test_dirichlet_normalizes_on_simplex():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = rng.uniform(0.5, 5, 3)
        assert abs(simplex_quadrature(lambda x: dirichlet_log_pdf(a, x)) - 1) <= 1e-3


# -- Poisson ----------------------------------------------------------------------

@pytest.mark.parametrize("lam, k, expected", [
    ([1.0], [0], -1.0),
    ([2.0], [2], math.log(2) - 2),
    ([1.0, 2.0], [0, 2], -1 + math.log(2) - 2),
])
def test_poisson_values(lam, k, expected):
    assert abs(poisson_log_pmf(lam, k) - expected) <= 1e-12


def test_poisson_grad_values():
    np.testing.assert_allclose(poisson_nll_grad([3.0], [3]), [0.0], atol=0)
    np.testing.assert_allclose(poisson_nll_grad([2.0], [0]), [1.0], atol=0)


def test_poisson_grad_fd():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(100):
        lam = rng.uniform(0.1, 10, 5)
        k = rng.integers(0, 21, 5)
        fd = central_diff(lambda l: -poisson_log_pmf(l, k), lam, 1e-6)
        worst = max(worst, rel_err(poisson_nll_grad(lam, k), fd, 1e-6).max())
    assert worst <= 1e-6


def test_poisson_normalizes():
    rng = np.random.default_rng(15)
    for lam in rng.uniform(0.1, 20, 20):
        top = math.ceil(lam + 20 * math.sqrt(lam) + 50)
        ks = np.arange(top + 1)[:, None]
        total = np.exp(poisson_log_pmf(np.full((len(ks), 1), lam), ks)).sum()
        assert abs(total - 1) <= 1e-9


def test_poisson_rejects_bad_counts():
    with pytest.raises(DomainError):
        poisson_log_pmf([1.0], [-1])
    with pytest.raises(DomainError):
        poisson_log_pmf([1.0], [0.5])
    with pytest.raises(DomainError):
        poisson_log_pmf([1.0, 2.0], [1])


# -- moments and sampling ---------------------------------------------------------

def test_dirichlet_mean_values():
    np.testing.assert_allclose(dirichlet_mean([1, 3]), [0.25, 0.75])
    np.testing.assert_allclose(dirichlet_mean([2, 3, 5]), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(dirichlet_mean([7.0] * 4), [0.25] * 4)


def test_sample_dirichlet_moments():
    draws = sample_dirichlet(np.full((10000, 2), 5.0), np.random.default_rng(0))
    assert np.abs(draws.mean(axis=0) - dirichlet_mean([5, 5])).max() < 0.02
    assert np.abs(draws.sum(axis=1) - 1).max() <= 1e-12


def test_sample_poisson_moments():
    draws = sample_poisson(np.full(10000, 4.0), np.random.default_rng(0))
    assert abs(draws.mean() - 4) < 0.1
    assert draws.dtype.kind == "i" and draws.min() >= 0


def test_samplers_deterministic():
    a = sample_dirichlet([0.5, 2.0, 3.0], np.random.default_rng(9))
    b = sample_dirichlet([0.5, 2.0, 3.0], np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sample_poisson([3.0, 40.0], np.random.default_rng(9)),
                                  sample_poisson([3.0, 40.0], np.random.default_rng(9)))


def test_sample_dirichlet_tiny_alpha_stays_on_simplex():
    draws = sample_dirichlet(np.full((500, 3), 1e-3), np.random.default_rng(1))
    assert np.all(draws >= 0)
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
