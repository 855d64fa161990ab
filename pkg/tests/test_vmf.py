import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from mpguide import get_backend
from mpguide.guiding import VMFMixture, mean_resultant_length, sample_vmf, vmf_log_pdf, vmf_pdf

from conftest import BACKENDS, fibonacci_sphere, grid_chi2, random_mixture


# [DERIVED]
def test_uniform_limit():
    w = np.array([0.3, -0.4, np.sqrt(1 - 0.25)])
    assert abs(float(vmf_pdf(w, [0.0, 0.0, 1.0], 0.0)) - 1.0 / (4.0 * math.pi)) < 1e-9
    assert abs(float(vmf_pdf(w, [0.0, 0.0, 1.0], 1e-12)) - 1.0 / (4.0 * math.pi)) < 1e-9
    assert 1.0 / (4.0 * math.pi) == pytest.approx(0.0795775, abs=1e-7)


# [DERIVED]
def test_unit_kappa_at_the_mean():
    mu = np.array([0.0, 0.6, 0.8])
    assert float(vmf_pdf(mu, mu, 1.0)) == pytest.approx(math.e / (4.0 * math.pi * math.sinh(1.0)), rel=1e-12)


# [DERIVED]
def test_large_kappa_matches_log_domain():
    mu = np.array([0.0, 0.0, 1.0])
    c = 1.0 - 1e-6
    w = np.array([math.sqrt(1.0 - c * c), 0.0, c])
    k = 1e4
    # log-domain reference: log k - log(2 pi) - log(1 - e^{-2k}) + k (c - 1)
    ref = math.exp(math.log(k) - math.log(2.0 * math.pi) - math.log1p(-math.exp(-2.0 * k)) + k * (c - 1.0))
    assert float(vmf_pdf(w, mu, k)) == pytest.approx(ref, rel=1e-9)
    assert float(np.exp(vmf_log_pdf(w, mu, k))) == pytest.approx(ref, rel=1e-9)


# [DERIVED]
@given(st.floats(1e-3, 1e5), st.floats(-1.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_log_pdf_consistent(kappa, c):
    mu = np.array([0.0, 0.0, 1.0])
    w = np.array([math.sqrt(max(0.0, 1.0 - c * c)), 0.0, c])
    lp = float(vmf_log_pdf(w, mu, kappa))
    p = float(vmf_pdf(w, mu, kappa))
    if p > 1e-300:
        assert math.log(p) == pytest.approx(lp, rel=1e-9, abs=1e-9)


# [DERIVED]
def test_mixture_integrates_to_one():
    rng = np.random.default_rng(7)
    pts = fibonacci_sphere(10**6)
    for _ in range(50):
        mix = random_mixture(rng)
        total = mix.pdf(pts).sum() * 4.0 * math.pi / len(pts)
        assert abs(total - 1.0) < 1e-3


# [DERIVED]
def test_mixture_weights_normalised():
    mix = VMFMixture([[0, 0, 1], [1, 0, 0]], [5.0, 7.0], [3.0, 1.0])
    assert_allclose(mix.weights, [0.75, 0.25])
    assert mix.cdf[-1] == 1.0
    with pytest.raises(ValueError):
        VMFMixture([[0, 0, 1]], [1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        VMFMixture([[0, 0, 1]], [1.0], [0.0])


# [DERIVED]
def test_uniform_lobe_samples_have_zero_mean():
    mix = VMFMixture([[0.0, 0.0, 1.0]], [1e-12], [1.0])
    d, _ = mix.sample(np.random.default_rng(1), 10**6)
    assert np.all(np.abs(d.mean(axis=0)) < 3e-3)


# [DERIVED]
def test_mean_resultant_length_kappa_100():
    mu = np.array([0.48, -0.6, 0.64])
    mix = VMFMixture([mu], [100.0], [1.0])
    d, _ = mix.sample(np.random.default_rng(2), 10**6)
    assert np.linalg.norm(d.mean(axis=0)) == pytest.approx(mean_resultant_length(100.0), rel=1e-2)
    assert mean_resultant_length(100.0) == pytest.approx(1.0 / math.tanh(100.0) - 0.01)


# [DERIVED]
def test_sample_returns_mixture_pdf():
    rng = np.random.default_rng(3)
    mix = random_mixture(rng, 4)
    d, p = mix.sample(rng, 1000)
    assert_allclose(p, mix.pdf(d), rtol=1e-12)
    assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


# [DERIVED]
def test_mixture_sampling_chi_square():
    rng = np.random.default_rng(4)
    mix = random_mixture(rng, 5, log_kappa=(0.0, 1.7))
    d, _ = mix.sample(rng, 10**6)
    assert grid_chi2(d, mix.pdf).pvalue > 0.01


# [DERIVED]
@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("kappa", [1e-9, 0.5, 30.0, 2e4])
def test_kernel_vmf_sampler_matches_the_cosine_law(backend, kappa):
    """Kolmogorov-Smirnov test of mu.omega against the exact vMF cosine CDF."""
    mod = get_backend(backend)
    mu = (0.0, 0.6, -0.8)
    rng = np.random.default_rng(5)
    c = np.empty(20000)
    for i in range(len(c)):
        w = mod.sample_vmf(mu, kappa, rng)
        c[i] = w[0] * mu[0] + w[1] * mu[1] + w[2] * mu[2]
        assert abs(math.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2) - 1.0) < 1e-12

    def cdf(x):
        if kappa < 1e-8:
            return (x + 1.0) / 2.0
        return (np.exp(kappa * (x - 1.0)) - np.exp(-2.0 * kappa)) / -np.expm1(-2.0 * kappa)

    assert stats.kstest(c, cdf).pvalue > 0.01


# [DERIVED]
def test_sample_vmf_vectorised_matches_scalar_frames():
    mu = np.array([[0.0, 0.0, -1.0], [0.6, 0.0, 0.8]])
    out = sample_vmf(mu, np.array([5.0, 50.0]), np.array([0.3, 0.7]), np.array([0.1, 0.9]))
    assert out.shape == (2, 3)
    assert_allclose(np.linalg.norm(out, axis=1), 1.0)
