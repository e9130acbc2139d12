"""
Tests for Gaussian variational posteriors
"""

import numpy as np
import pytest
from scipy import integrate, stats

from src.backend.core.exceptions import ShapeMismatchError
from src.backend.services.autodiff import Tensor, gradcheck
from src.backend.services.variational import (
    RIDGE,
    GaussianVariational,
    LatentNoise,
    entropy,
    init_variational,
    log_prob,
    lower_triangular,
    sample,
    std_normal_log_prob,
)


class TestGaussianVariational:
    """Density, entropy and sampling"""

    @pytest.fixture
    def q(self):
        """Three-dimensional posterior with a full lower-triangular factor"""
        l_factor = np.array([[0.8, 0.0, 0.0], [0.3, 0.5, 0.0], [-0.2, 0.1, 0.4]])
        return GaussianVariational.from_arrays(np.array([0.5, -1.0, 2.0]), l_factor)

    def covariance(self, q):
        l_factor = q.l_factor.data
        return l_factor @ l_factor.T + RIDGE * np.eye(q.dim)

    def test_entropy_closed_form(self, q):
        """Test entropy against scipy"""
        expected = stats.multivariate_normal(q.mu.data, self.covariance(q)).entropy()
        assert entropy(q).item() == pytest.approx(expected, rel=1e-10)

    def test_log_prob_matches_scipy(self, q):
        """Test log-density of single and batched latents"""
        z = np.random.default_rng(0).standard_normal((4, 3))
        reference = stats.multivariate_normal(q.mu.data, self.covariance(q)).logpdf(z)
        np.testing.assert_allclose(log_prob(q, Tensor(z)).data, reference, rtol=1e-10)
        assert log_prob(q, Tensor(z[0])).item() == pytest.approx(reference[0], rel=1e-10)

    def test_rotated_factor_same_density(self, q):
        """Test L and L·Q give the same density for orthogonal Q"""
        rotation, _ = np.linalg.qr(np.random.default_rng(8).standard_normal((3, 3)))
        rotated = GaussianVariational(Tensor(q.mu.data), Tensor(q.l_factor.data @ rotation))
        z = Tensor(np.random.default_rng(9).standard_normal((6, 3)))
        np.testing.assert_allclose(log_prob(rotated, z).data, log_prob(q, z).data, rtol=1e-10)
        assert entropy(rotated).item() == pytest.approx(entropy(q).item(), rel=1e-10)

    def test_entropy_ridge_floor(self, q):
        """Test the ridge bounds entropy below, with equality at L = 0"""
        floor = 0.5 * q.dim * np.log(2.0 * np.pi * np.e * RIDGE)
        collapsed = GaussianVariational.from_arrays(q.mu.data, np.zeros((3, 3)))
        assert entropy(collapsed).item() == pytest.approx(floor, abs=1e-10)
        rng = np.random.default_rng(10)
        for _ in range(5):
            random_q = GaussianVariational.from_arrays(rng.standard_normal(3), rng.standard_normal((3, 3)))
            assert entropy(random_q).item() > floor

    def test_one_dimensional_density_integrates_to_one(self):
        """Test a k = 1 posterior density by trapezoidal quadrature"""
        q = GaussianVariational.from_arrays(np.array([0.7]), np.array([[1.3]]))
        grid = np.arange(-10.0, 10.0 + 5e-4, 1e-3)
        density = np.exp(log_prob(q, Tensor(grid[:, None])).data)
        assert integrate.trapezoid(density, grid) == pytest.approx(1.0, abs=1e-4)
        mean = integrate.trapezoid(grid * density, grid)
        assert mean == pytest.approx(0.7, abs=1e-4)

    def test_std_normal_log_prob(self):
        """Test the standard normal prior density"""
        z = np.random.default_rng(1).standard_normal((5, 3))
        expected = stats.norm.logpdf(z).sum(axis=1)
        np.testing.assert_allclose(std_normal_log_prob(Tensor(z)).data, expected, rtol=1e-12)

    def test_zero_noise_gives_mean(self, q):
        """Test frozen zero noise maps every draw to μ"""
        draws = sample(q, 3, noise=LatentNoise.zeros(3, 3)).data
        np.testing.assert_array_equal(draws, np.tile(q.mu.data, (3, 1)))

    def test_sample_moments(self, q):
        """Test empirical mean and covariance of many draws"""
        draws = sample(q, 20000, rng=np.random.default_rng(4)).data
        np.testing.assert_allclose(draws.mean(axis=0), q.mu.data, atol=0.03)
        np.testing.assert_allclose(np.cov(draws.T), self.covariance(q), atol=0.03)

    def test_monte_carlo_entropy(self, q):
        """Test the mean negative log-density of draws estimates the entropy"""
        draws = sample(q, 20000, rng=np.random.default_rng(9))
        values = -log_prob(q, draws).data
        standard_error = values.std(ddof=1) / np.sqrt(values.size)
        assert abs(values.mean() - entropy(q).item()) < 3.0 * standard_error

    def test_from_arrays_keeps_lower_triangle(self):
        """Test the factor is projected to lower-triangular"""
        q = GaussianVariational.from_arrays(np.zeros(2), np.ones((2, 2)))
        np.testing.assert_array_equal(q.l_factor.data, [[1.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(lower_triangular(np.ones((2, 2))), [[1.0, 0.0], [1.0, 1.0]])

    def test_init_variational(self):
        """Test the initial factor is 0.1·I"""
        q = init_variational(5, np.random.default_rng(0))
        np.testing.assert_array_equal(q.l_factor.data, 0.1 * np.eye(5))
        assert q.mu.shape == (5,)

    def test_shape_checks(self, q):
        """Test mismatched μ, L, noise and latents are rejected"""
        with pytest.raises(ShapeMismatchError):
            GaussianVariational(Tensor(np.zeros(3)), Tensor(np.eye(2)))
        with pytest.raises(ShapeMismatchError):
            sample(q, 2, noise=LatentNoise.zeros(3, 3))
        with pytest.raises(ShapeMismatchError):
            log_prob(q, Tensor(np.zeros(4)))

    def test_entropy_gradient(self, q):
        """Test the entropy gradient with respect to L"""
        fn = lambda l_factor: entropy(GaussianVariational(Tensor(q.mu.data), l_factor))
        assert gradcheck(fn, [q.l_factor.data]) < 1e-4

    def test_log_prob_gradient(self, q):
        """Test log-density gradients with respect to μ, L and z"""
        z = np.random.default_rng(3).standard_normal((2, 3))
        fn = lambda mu, l_factor, latent: log_prob(GaussianVariational(mu, l_factor), latent).sum()
        assert gradcheck(fn, [q.mu.data, q.l_factor.data, z]) < 1e-4

    def test_sample_gradient(self, q):
        """Test reparameterized draws differentiate through μ and L"""
        noise = LatentNoise.draw(2, 3, np.random.default_rng(6))
        fn = lambda mu, l_factor: std_normal_log_prob(sample(GaussianVariational(mu, l_factor), 2, noise=noise)).sum()
        assert gradcheck(fn, [q.mu.data, q.l_factor.data]) < 1e-4
