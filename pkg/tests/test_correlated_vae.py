"""
Unit Tests for the Correlated VAE
=================================
AR(1) covariance algebra, KL closed forms, the training loss and the E2E delay law.

Run with: pytest tests/test_correlated_vae.py -v
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy.stats import kstest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.correlated_vae import (
    CorrelatedVAE,
    DiagPosterior,
    LatentPosterior,
    NotTrainedError,
    PriorSpec,
    TrainingDivergedError,
    VAEConfig,
    ar1_cholesky,
    ar1_cov,
    ar1_det,
    elbo,
    kl_ar1,
    kl_ar1_batch,
    kl_diag,
    latent_nll_ar1,
    reparam_sample,
    sum_law,
    train,
)
from src.data_pipeline import Normalization, synthetic_windows


# ============================================================================
# AR(1) Covariance Tests
# ============================================================================


class TestAR1Covariance:
    """Test suite for the AR(1) covariance, determinant and Cholesky factor."""

    def test_zero_correlation(self):
        np.testing.assert_array_equal(ar1_cov(0.0, 3.0, 4), 3.0 * np.eye(4))

    def test_two_by_two(self):
        np.testing.assert_allclose(ar1_cov(0.5, 2.0, 2), [[2.0, 1.0], [1.0, 2.0]])

    def test_symmetric(self):
        c = ar1_cov(-0.7, 1.3, 5)
        assert (c == c.T).all()

    def test_det_hand_values(self):
        assert ar1_det(0.0, 2.0, 3) == pytest.approx(8.0)
        assert ar1_det(0.5, 2.0, 2) == pytest.approx(3.0)

    def test_det_matches_lu(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = int(rng.integers(1, 7))
            rho, s = rng.uniform(-0.95, 0.95), rng.uniform(0.1, 5.0)
            lu = np.linalg.det(ar1_cov(rho, s, d))
            assert ar1_det(rho, s, d) == pytest.approx(lu, rel=1e-10)

    def test_cholesky_two_by_two(self):
        rho, s = 0.6, 2.0
        expected = math.sqrt(s) * np.array([[1.0, 0.0], [rho, math.sqrt(1 - rho**2)]])
        np.testing.assert_allclose(ar1_cholesky(rho, s, 2), expected)

    def test_cholesky_zero_correlation(self):
        np.testing.assert_allclose(ar1_cholesky(0.0, 4.0, 3), 2.0 * np.eye(3))

    def test_cholesky_reconstruction(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d = int(rng.integers(1, 7))
            rho, s = rng.uniform(-0.95, 0.95), rng.uniform(0.1, 5.0)
            chol = ar1_cholesky(rho, s, d)
            assert np.max(np.abs(chol @ chol.T - ar1_cov(rho, s, d))) < 1e-10
            assert np.allclose(chol, np.tril(chol))

    @pytest.mark.parametrize("rho, s", [(1.0, 1.0), (-1.0, 1.0), (0.5, 0.0)])
    def test_out_of_range(self, rho, s):
        with pytest.raises(ValueError):
            ar1_cov(rho, s, 2)


# ============================================================================
# Reparametrization Tests
# ============================================================================


class TestReparam:
    """Test suite for z = mu + L eps."""

    def test_zero_noise(self):
        post = LatentPosterior(np.array([1.0, -2.0]), 1.5, 0.3)
        np.testing.assert_array_equal(reparam_sample(post, np.zeros(2)), post.mu)

    @pytest.mark.slow
    def test_sample_covariance(self):
        post = LatentPosterior(np.array([0.2, 0.1]), 2.0, 0.6)
        z = reparam_sample(post, np.random.default_rng(2).standard_normal((1_000_000, 2)))
        assert np.max(np.abs(np.cov(z.T) - post.cov)) < 0.02 * post.scale

    def test_gradient_in_mu_is_identity(self):
        post = LatentPosterior(np.array([0.5, 0.5]), 1.0, 0.4)
        eps = np.array([0.3, -1.1])
        step = 1e-6
        jac = np.zeros((2, 2))
        for k in range(2):
            shifted = post.mu.copy()
            shifted[k] += step
            moved = reparam_sample(LatentPosterior(shifted, 1.0, 0.4), eps)
            jac[:, k] = (moved - reparam_sample(post, eps)) / step
        np.testing.assert_allclose(jac, np.eye(2), atol=1e-6)


# ============================================================================
# KL Tests
# ============================================================================


class TestKL:
    """Test suite for the KL closed forms."""

    def test_diag_posterior_equals_prior(self):
        assert kl_diag(DiagPosterior(np.zeros(2), np.ones(2)), PriorSpec()) == pytest.approx(0.0)

    def test_diag_scalar_value(self):
        post = DiagPosterior(np.array([1.0]), np.array([1.0]))
        assert kl_diag(post, PriorSpec((0.0,), 1.0)) == pytest.approx(0.5)

    def test_ar1_posterior_equals_prior(self):
        prior = PriorSpec((0.5, -0.5), 2.0)
        post = LatentPosterior(np.array([0.5, -0.5]), 4.0, 0.0)
        assert kl_ar1(post, prior) == pytest.approx(0.0, abs=1e-12)

    def test_ar1_grows_with_correlation(self):
        values = [kl_ar1(LatentPosterior(np.zeros(2), 1.0, r), PriorSpec()) for r in (0.0, 0.3, 0.6, 0.9, 0.999)]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert values[-1] > 3.0

    def test_ar1_equals_diag_at_zero_correlation(self):
        mu = np.array([0.3, -1.0])
        a = kl_ar1(LatentPosterior(mu, 0.7, 0.0), PriorSpec())
        b = kl_diag(DiagPosterior(mu, np.array([0.7, 0.7])), PriorSpec())
        assert a == pytest.approx(b)

    def test_ar1_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            post = LatentPosterior(rng.normal(size=2), rng.uniform(0.05, 5.0), rng.uniform(-0.99, 0.99))
            assert kl_ar1(post, PriorSpec()) >= 0.0

    @pytest.mark.slow
    def test_ar1_matches_monte_carlo(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            post = LatentPosterior(rng.uniform(-3, 3, size=2), rng.uniform(0.1, 5.0), rng.uniform(-0.9, 0.9))
            estimate, stderr = _monte_carlo_kl(post, rng)
            closed = kl_ar1(post, PriorSpec())
            assert abs(estimate - closed) < max(0.01 * closed, 4 * stderr)

    @pytest.mark.slow
    def test_diag_matches_monte_carlo(self):
        rng = np.random.default_rng(40)
        for _ in range(50):
            post = DiagPosterior(rng.uniform(-3, 3, size=2), rng.uniform(0.1, 5.0, size=2))
            estimate, stderr = _monte_carlo_kl(post, rng)
            closed = kl_diag(post, PriorSpec())
            assert abs(estimate - closed) < max(0.01 * closed, 4 * stderr)

    def test_batch_gradients(self):
        """kl_ar1_batch derivatives against central differences."""
        rng = np.random.default_rng(5)
        mu, log_s, rho = rng.normal(size=(3, 2)), rng.normal(size=3), rng.uniform(-0.8, 0.8, size=3)
        prior = PriorSpec((0.2, -0.1), 1.5)
        _, g_mu, g_log_s, g_rho = kl_ar1_batch(mu, log_s, rho, prior)
        h = 1e-6

        def kl(m, ls, r):
            return kl_ar1_batch(m, ls, r, prior)[0]

        for k in range(2):
            e = np.zeros_like(mu)
            e[:, k] = h
            np.testing.assert_allclose((kl(mu + e, log_s, rho) - kl(mu - e, log_s, rho)) / (2 * h), g_mu[:, k], rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose((kl(mu, log_s + h, rho) - kl(mu, log_s - h, rho)) / (2 * h), g_log_s, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose((kl(mu, log_s, rho + h) - kl(mu, log_s, rho - h)) / (2 * h), g_rho, rtol=1e-5, atol=1e-8)

    def test_batch_matches_scalar(self):
        post = LatentPosterior(np.array([0.4, 0.9]), 0.8, -0.35)
        kl, *_ = kl_ar1_batch(post.mu[None], np.log([post.scale]), np.array([post.rho]), PriorSpec())
        assert kl[0] == pytest.approx(kl_ar1(post, PriorSpec()))

    def test_latent_nll_gradients(self):
        rng = np.random.default_rng(6)
        pairs = rng.normal(size=(2, 5, 2))
        mu, log_s, rho = rng.normal(size=(2, 2)), rng.normal(size=2) * 0.3, np.array([0.4, -0.2])
        _, g_mu, g_log_s, g_rho = latent_nll_ar1(pairs, mu, log_s, rho)
        h = 1e-6

        def nll(m, ls, r):
            return latent_nll_ar1(pairs, m, ls, r)[0]

        e = np.zeros_like(mu)
        e[:, 1] = h
        np.testing.assert_allclose((nll(mu + e, log_s, rho) - nll(mu - e, log_s, rho)) / (2 * h), g_mu[:, 1], rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose((nll(mu, log_s + h, rho) - nll(mu, log_s - h, rho)) / (2 * h), g_log_s, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose((nll(mu, log_s, rho + h) - nll(mu, log_s, rho - h)) / (2 * h), g_rho, rtol=1e-5, atol=1e-8)


# ============================================================================
# ELBO Tests
# ============================================================================


class TestELBO:
    """Test suite for the negative ELBO."""

    def test_perfect_reconstruction_at_prior(self):
        x = np.arange(6.0)
        post = LatentPosterior(np.zeros(2), 1.0, 0.0)
        assert elbo(x, x[None], post, PriorSpec()) == pytest.approx(0.5 * 6 * math.log(2 * math.pi))
        assert elbo(x, x[None], post, PriorSpec(), include_constant=False) == pytest.approx(0.0)

    def test_kl_term_independent_of_decoder(self):
        x = np.zeros(4)
        a, b = np.ones((1, 4)), 2 * np.ones((1, 4))
        for post in (LatentPosterior(np.zeros(2), 1.0, 0.0), LatentPosterior(np.ones(2), 0.5, 0.7)):
            gap = elbo(x, b, post, PriorSpec()) - elbo(x, a, post, PriorSpec())
            assert gap == pytest.approx(0.5 * 16 - 0.5 * 4)

    def test_many_samples_agree_with_one_in_expectation(self, trained):
        model, windows = trained
        window = windows[0]
        post = model.posterior(window)
        rng = np.random.default_rng(7)

        def estimate(n):
            z = reparam_sample(post, rng.standard_normal((n, 2)))
            return elbo(window, model.decode(z).reshape(n, -1), post, model.config.prior)

        singles = np.array([estimate(1) for _ in range(200)])
        stderr = singles.std(ddof=1) / math.sqrt(len(singles))
        assert abs(singles.mean() - estimate(1000)) < 3 * stderr


# ============================================================================
# Model Tests
# ============================================================================


class TestCorrelatedVAE:
    """Test suite for training, inference and checkpoints."""

    def test_loss_gradients_match_finite_differences(self):
        config = _tiny_config()
        model = CorrelatedVAE(config, seed=1)
        X = synthetic_windows(3, config.window, 0.5, seed=1)
        eps = np.random.default_rng(8).standard_normal((2, 3, 2))
        _assert_gradients_match(model, X, eps)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_on_random_networks(self, seed):
        """Random small architectures, each checked through reparametrization and the AR(1) KL."""
        rng = np.random.default_rng(100 + seed)
        config = _tiny_config(
            window=int(rng.integers(3, 7)),
            conv_channels=int(rng.integers(1, 4)),
            hidden_units=int(rng.integers(2, 5)),
            prior=PriorSpec(tuple(rng.uniform(-0.5, 0.5, size=2)), float(rng.uniform(0.5, 2.0))),
        )
        model = CorrelatedVAE(config, seed=seed)
        X = synthetic_windows(int(rng.integers(2, 5)), config.window, float(rng.uniform(-0.8, 0.8)), seed=seed)
        eps = rng.standard_normal((2, len(X), 2))
        _assert_gradients_match(model, X, eps)

    def test_diag_loss_gradients(self):
        config = _tiny_config(posterior="diag")
        model = CorrelatedVAE(config, seed=2)
        X = synthetic_windows(2, config.window, 0.0, seed=2)
        eps = np.random.default_rng(9).standard_normal((1, 2, 2))
        model.zero_grad()
        model.loss_and_grads(X, eps=eps)
        head_bias = model.encoder.parameters()[-1]
        analytic = head_bias.grad.copy()
        h = 1e-6
        for k in range(4):
            original = head_bias.values[k]
            head_bias.values[k] = original + h
            up = model.loss_and_grads(X, eps=eps)[0]
            head_bias.values[k] = original - h
            down = model.loss_and_grads(X, eps=eps)[0]
            head_bias.values[k] = original
            assert (up - down) / (2 * h) == pytest.approx(analytic[k], rel=1e-4, abs=1e-8)

    @pytest.mark.slow
    def test_loss_halves_within_fifty_epochs(self):
        config = _tiny_config(epochs=50, conv_channels=4, hidden_units=16)
        X = synthetic_windows(256, config.window, 0.7, seed=3)
        _, history = train(X, config, seed=3)
        curve = history.curve["mean_loss"].to_numpy()
        assert len(curve) == 50
        assert curve[-1] < 0.5 * curve[0]

    @pytest.mark.slow
    @pytest.mark.parametrize("rho", [0.7, -0.7])
    def test_correlation_sign_learned(self, rho):
        config = _tiny_config(epochs=40, conv_channels=4, hidden_units=16)
        X = synthetic_windows(256, config.window, rho, seed=4)
        val = synthetic_windows(64, config.window, rho, seed=5)
        model, history = train(X, config, seed=4, validation=val)
        assert np.sign(history.curve["mean_rho"].iloc[-1]) == np.sign(rho)
        assert np.sign(np.mean(model.encode(val)["rho"])) == np.sign(rho)

    def test_same_seed_same_curve(self):
        config = _tiny_config(epochs=3)
        X = synthetic_windows(40, config.window, 0.3, seed=6)
        _, a = train(X, config, seed=6)
        _, b = train(X, config, seed=6)
        assert a.curve.equals(b.curve)
        assert a.scatter.equals(b.scatter)

    def test_zero_epochs_keeps_initialization(self, tmp_path):
        config = _tiny_config(epochs=0)
        model, history = train(synthetic_windows(8, config.window, 0.0, seed=7), config, seed=7)
        assert history.curve.empty
        fresh = CorrelatedVAE(config, seed=7)
        for a, b in zip(model.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(a.values, b.values)

    def test_window_mismatch(self):
        model = CorrelatedVAE(_tiny_config(), seed=0)
        with pytest.raises(ValueError):
            model.fit(np.zeros((4, 2, 5)))

    def test_divergence_reports_epoch(self):
        config = _tiny_config(epochs=5, learning_rate=1e200)
        with pytest.raises(TrainingDivergedError) as info:
            train(synthetic_windows(16, config.window, 0.0, seed=8), config, seed=8)
        assert info.value.epoch >= 1

    def test_untrained_model_has_no_law(self):
        model = CorrelatedVAE(_tiny_config(), seed=0)
        with pytest.raises(NotTrainedError):
            model.e2e_law(np.zeros((2, 4)))

    def test_checkpoint_round_trip(self, tmp_path, trained):
        model, windows = trained
        model.save(str(tmp_path / "bs_0.npz"))
        loaded = CorrelatedVAE.load(str(tmp_path / "bs_0.npz"))
        for key in ("mu", "s", "rho"):
            np.testing.assert_array_equal(loaded.encode(windows)[key], model.encode(windows)[key])
        assert loaded.normalization == model.normalization
        assert loaded.config == model.config


# ============================================================================
# E2E Law Tests
# ============================================================================


class TestE2ELaw:
    """Test suite for the Gaussian E2E delay law."""

    def test_independent_sum(self):
        law = sum_law((3.0, 2.0), 1.0, 0.0)
        assert (law.mean, law.variance) == (pytest.approx(5.0), pytest.approx(2.0))

    def test_correlated_variance(self):
        assert sum_law((0.0, 0.0), 2.0, 0.5).variance == pytest.approx(6.0)

    def test_destandardized(self):
        law = sum_law((1.0, -1.0), 1.0, 0.0, std=(2.0, 3.0), mean=(10.0, 20.0))
        assert law.mean == pytest.approx(12.0 + 17.0)
        assert law.variance == pytest.approx(4.0 + 9.0)

    def test_samples_follow_law(self, trained):
        model, windows = trained
        law = model.e2e_law(windows[0])
        draws = model.sample_e2e(windows[0], 100_000, np.random.default_rng(10))
        assert kstest(draws, law.cdf).statistic < 0.02

    def test_channel_laws_sum_to_e2e_mean(self, trained):
        model, windows = trained
        total = model.e2e_law(windows[1]).mean
        parts = model.channel_law(windows[1], 0).mean + model.channel_law(windows[1], 1).mean
        assert parts == pytest.approx(total)


# ============================================================================
# Helpers and Fixtures
# ============================================================================


def _tiny_config(**overrides) -> VAEConfig:
    fields = dict(window=4, conv_channels=2, kernel_size=3, hidden_units=3, epochs=2, batch_size=8)
    fields.update(overrides)
    return VAEConfig(**fields)


def _assert_gradients_match(model: CorrelatedVAE, X: np.ndarray, eps: np.ndarray, h: float = 1e-6):
    """Every parameter tensor's reverse-mode gradient against central differences (relative norm)."""
    model.zero_grad()
    model.loss_and_grads(X, eps=eps)
    analytic = [p.grad.copy() for p in model.parameters()]

    for tensor, grad in zip(model.parameters(), analytic):
        numeric = np.zeros_like(tensor.values)
        for idx in np.ndindex(tensor.shape):
            original = tensor.values[idx]
            tensor.values[idx] = original + h
            up = model.loss_and_grads(X, eps=eps)[0]
            tensor.values[idx] = original - h
            down = model.loss_and_grads(X, eps=eps)[0]
            tensor.values[idx] = original
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(grad - numeric) / scale < 1e-4


@pytest.fixture
def trained():
    config = _tiny_config(epochs=2)
    windows = synthetic_windows(32, config.window, 0.5, seed=11)
    model, _ = train(windows, config, seed=11, normalization=Normalization((4.0, 6.0), (2.0, 1.5)))
    return model, windows


def _monte_carlo_kl(post, rng, n: int = 1_000_000):
    """Mean and standard error of log q(z) - log p(z) under z ~ q, p the standard normal prior."""
    z = reparam_sample(post, rng.standard_normal((n, 2)))
    cov = post.cov
    resid = z - post.mu
    log_q = -0.5 * np.einsum("ni,ij,nj->n", resid, np.linalg.inv(cov), resid) - 0.5 * math.log(np.linalg.det(cov))
    log_p = -0.5 * np.sum(z**2, axis=1)
    ratio = log_q - log_p
    return ratio.mean(), ratio.std() / math.sqrt(n)
