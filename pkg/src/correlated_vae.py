"""
Correlated VAE Module
=====================
Purpose: Learn the joint law of (transmission delay, compute delay) from delay windows

The encoder maps a standardized window (2 x W) to a Gaussian posterior over the latent
z = [tau_t * T, tau_p] with first-order autoregressive covariance C = s * R(rho),
R(rho)[i, j] = rho^|i-j|. s is the per-dimension variance.

Training loss per window (minimized):
    mean over L samples of 1/2 ||x - decoder(mu + L_chol eps)||^2
  + KL(q || prior)
  + latent_target_weight * Gaussian NLL of the window's delay pairs under q

The last term ties latent coordinates to the two delay channels, so rho is the learned
correlation between transmission and compute delay and the E2E delay law is read off q.
A diagonal-covariance posterior is available as the baseline VAE.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from src.data_pipeline import InputWindow, Normalization
from src.nn_backprop import (
    SGD,
    Conv1D,
    Dense,
    Network,
    NonFiniteError,
    ReLU,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

LATENT_DIM = 2
LOG_S_BOUND = 20.0
# tanh(7.25) = 1 - 1e-6; keeps log(1 - rho^2) finite
ATANH_RHO_BOUND = 7.25
SCATTER_POINTS = 64


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")


class NotTrainedError(RuntimeError):
    """The model has no trained parameters or standardization statistics."""


# ==========================================
# DISTRIBUTION TYPES
# ==========================================


@dataclass(frozen=True)
class PriorSpec:
    mu_prior: Tuple[float, ...] = (0.0, 0.0)
    sigma_prior: float = 1.0

    def __post_init__(self):
        if not self.sigma_prior > 0:
            raise ValueError(f"sigma_prior must be > 0, got {self.sigma_prior}")

    @property
    def var(self) -> float:
        return self.sigma_prior**2

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.mu_prior, dtype=float)


@dataclass(frozen=True)
class LatentPosterior:
    mu: np.ndarray
    scale: float
    rho: float

    def __post_init__(self):
        _check_ar1(self.rho, self.scale, len(self.mu))

    @property
    def d(self) -> int:
        return len(self.mu)

    @property
    def cov(self) -> np.ndarray:
        return ar1_cov(self.rho, self.scale, self.d)


@dataclass(frozen=True)
class DiagPosterior:
    mu: np.ndarray
    s_vec: np.ndarray

    def __post_init__(self):
        if not (np.asarray(self.s_vec) > 0).all():
            raise ValueError(f"diagonal variances must be > 0, got {self.s_vec}")

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.s_vec)


@dataclass(frozen=True)
class GaussianLaw:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def cdf(self, x) -> np.ndarray:
        if self.variance == 0:
            return (np.asarray(x) >= self.mean).astype(float)
        return norm.cdf(x, loc=self.mean, scale=self.std)


# ==========================================
# AR(1) COVARIANCE
# ==========================================


def _check_ar1(rho: float, s: float, d: int):
    if not abs(rho) < 1.0:
        raise ValueError(f"AR(1) correlation must satisfy |rho| < 1, got {rho}")
    if not s > 0:
        raise ValueError(f"AR(1) scale must be > 0, got {s}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")


def _lags(d: int) -> np.ndarray:
    i, j = np.indices((d, d))
    return i - j


def ar1_correlation(rho, d: int) -> np.ndarray:
    """R(rho) for a scalar rho, or a stack (..., d, d) for an array of rhos."""
    rho = np.asarray(rho, dtype=float)[..., None, None]
    return rho ** np.abs(_lags(d))


def ar1_correlation_drho(rho, d: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)[..., None, None]
    lag = np.abs(_lags(d))
    return np.where(lag > 0, lag * rho ** np.maximum(lag - 1, 0), 0.0)


def ar1_cov(rho: float, s: float, d: int) -> np.ndarray:
    _check_ar1(rho, s, d)
    return s * ar1_correlation(rho, d)


def ar1_det(rho: float, s: float, d: int) -> float:
    _check_ar1(rho, s, d)
    return s**d * (1.0 - rho**2) ** (d - 1)


def ar1_logdet(rho: float, s: float, d: int) -> float:
    _check_ar1(rho, s, d)
    return d * math.log(s) + (d - 1) * math.log1p(-(rho**2))


def _unit_cholesky(rho, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of R(rho) and its derivative in rho (broadcast over rho)."""
    rho = np.asarray(rho, dtype=float)[..., None, None]
    lag = _lags(d)
    col = np.indices((d, d))[1]
    root = np.sqrt(1.0 - rho**2)
    c = np.where(col == 0, 1.0, root)
    dc = np.where(col == 0, 0.0, -rho / root)
    power = rho ** np.maximum(lag, 0)
    dpower = np.where(lag > 0, lag * rho ** np.maximum(lag - 1, 0), 0.0)
    lower = lag >= 0
    return np.where(lower, power * c, 0.0), np.where(lower, dpower * c + power * dc, 0.0)


def ar1_cholesky(rho: float, s: float, d: int) -> np.ndarray:
    """Lower-triangular L with L L^T = s R(rho); row i is the AR(1) recursion z_i = rho z_{i-1} + noise."""
    _check_ar1(rho, s, d)
    unit, _ = _unit_cholesky(rho, d)
    return math.sqrt(s) * unit


def ar1_cholesky_drho(rho: float, s: float, d: int) -> np.ndarray:
    _check_ar1(rho, s, d)
    _, dunit = _unit_cholesky(rho, d)
    return math.sqrt(s) * dunit


def reparam_sample(post: Union[LatentPosterior, DiagPosterior], eps: np.ndarray) -> np.ndarray:
    """z = mu + L eps; eps may carry leading batch dimensions."""
    eps = np.asarray(eps, dtype=float)
    if isinstance(post, DiagPosterior):
        return post.mu + np.sqrt(post.s_vec) * eps
    chol = ar1_cholesky(post.rho, post.scale, post.d)
    return post.mu + eps @ chol.T


# ==========================================
# KL DIVERGENCES
# ==========================================


def kl_diag(post: DiagPosterior, prior: PriorSpec) -> float:
    """KL(N(mu, diag(s)) || N(mu_prior, sigma_prior^2 I))."""
    s = np.asarray(post.s_vec, dtype=float)
    if not (s > 0).all():
        raise ValueError("diagonal variances must be > 0")
    ratio = s / prior.var
    delta = np.asarray(post.mu, dtype=float) - prior.mu
    return float(0.5 * np.sum(ratio + delta**2 / prior.var - 1.0 - np.log(ratio)))


def kl_ar1(post: LatentPosterior, prior: PriorSpec) -> float:
    """KL(N(mu, s R(rho)) || N(mu_prior, sigma_prior^2 I)); the log-det term is ln ar1_det."""
    d = post.d
    _check_ar1(post.rho, post.scale, d)
    delta = np.asarray(post.mu, dtype=float) - prior.mu
    return float(
        0.5
        * (
            d * post.scale / prior.var
            + np.sum(delta**2) / prior.var
            - d
            + d * math.log(prior.var)
            - ar1_logdet(post.rho, post.scale, d)
        )
    )


def kl_ar1_batch(
    mu: np.ndarray, log_s: np.ndarray, rho: np.ndarray, prior: PriorSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-row KL and its gradients with respect to (mu, log s, rho)."""
    d = mu.shape[1]
    s = np.exp(log_s)
    delta = mu - prior.mu
    one_minus = 1.0 - rho**2
    kl = 0.5 * (
        d * s / prior.var
        + np.sum(delta**2, axis=1) / prior.var
        - d
        + d * (math.log(prior.var) - log_s)
        - (d - 1) * np.log(one_minus)
    )
    return kl, delta / prior.var, 0.5 * (d * s / prior.var - d), (d - 1) * rho / one_minus


def kl_diag_batch(
    mu: np.ndarray, log_s: np.ndarray, prior: PriorSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.exp(log_s)
    delta = mu - prior.mu
    kl = 0.5 * np.sum(s / prior.var + delta**2 / prior.var - 1.0 - (log_s - math.log(prior.var)), axis=1)
    return kl, delta / prior.var, 0.5 * (s / prior.var - 1.0)


# ==========================================
# LATENT DELAY TARGET
# ==========================================


def latent_nll_ar1(
    pairs: np.ndarray, mu: np.ndarray, log_s: np.ndarray, rho: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean Gaussian NLL (without normalizer) of pairs (B, W, d) under N(mu, s R(rho)),
    with gradients in (mu, log s, rho).
    """
    d = mu.shape[1]
    s = np.exp(log_s)
    corr = ar1_correlation(rho, d)
    inv = np.linalg.inv(corr)
    dcorr = ar1_correlation_drho(rho, d)
    resid = pairs - mu[:, None, :]

    quad = np.einsum("bwi,bij,bwj->b", resid, inv, resid) / pairs.shape[1]
    logdet = d * log_s + (d - 1) * np.log1p(-(rho**2))
    nll = 0.5 * (quad / s + logdet)

    grad_mu = -np.einsum("bij,bj->bi", inv, resid.mean(axis=1)) / s[:, None]
    grad_log_s = 0.5 * (d - quad / s)
    sandwich = inv @ dcorr @ inv
    dquad = np.einsum("bwi,bij,bwj->b", resid, sandwich, resid) / pairs.shape[1]
    grad_rho = 0.5 * (-dquad / s - 2.0 * (d - 1) * rho / (1.0 - rho**2))
    return nll, grad_mu, grad_log_s, grad_rho


def latent_nll_diag(
    pairs: np.ndarray, mu: np.ndarray, log_s: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.exp(log_s)
    resid = pairs - mu[:, None, :]
    msq = np.mean(resid**2, axis=1)
    nll = 0.5 * np.sum(msq / s + log_s, axis=1)
    return nll, -resid.mean(axis=1) / s, 0.5 * (1.0 - msq / s)


# ==========================================
# ELBO
# ==========================================


def elbo(
    x: np.ndarray,
    recons: np.ndarray,
    post: Union[LatentPosterior, DiagPosterior],
    prior: PriorSpec,
    include_constant: bool = True,
) -> float:
    """
    Negative ELBO of one input: unit-variance Gaussian reconstruction averaged over the
    L decoded samples in `recons` (L, D), plus the closed-form KL.
    """
    x = np.asarray(x, dtype=float).ravel()
    recons = np.asarray(recons, dtype=float).reshape(-1, x.size)
    if recons.shape[0] < 1:
        raise ValueError("elbo needs at least one decoded sample")
    recon = 0.5 * float(np.mean(np.sum((recons - x) ** 2, axis=1)))
    if include_constant:
        recon += 0.5 * x.size * math.log(2.0 * math.pi)
    kl = kl_diag(post, prior) if isinstance(post, DiagPosterior) else kl_ar1(post, prior)
    return recon + kl


def sum_law(
    mu: Sequence[float],
    s: float,
    rho: float,
    std: Sequence[float] = (1.0, 1.0),
    mean: Sequence[float] = (0.0, 0.0),
) -> GaussianLaw:
    """Law of z_1 + z_2 after destandardization z_k -> mean_k + std_k z_k."""
    m = float(mean[0] + std[0] * mu[0] + mean[1] + std[1] * mu[1])
    var = s * (std[0] ** 2 + std[1] ** 2 + 2.0 * rho * std[0] * std[1])
    return GaussianLaw(m, float(var))


# ==========================================
# MODEL
# ==========================================


@dataclass(frozen=True)
class VAEConfig:
    window: int = 16
    conv_channels: int = 8
    kernel_size: int = 3
    hidden_units: int = 16
    posterior: str = "ar1"
    prior: PriorSpec = PriorSpec()
    latent_target_weight: float = 1.0
    l_samples_train: int = 1
    l_samples_eval: int = 64
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip: Optional[float] = 5.0

    def __post_init__(self):
        if self.posterior not in ("ar1", "diag"):
            raise ValueError(f"posterior must be 'ar1' or 'diag', got {self.posterior!r}")
        if self.l_samples_train < 1 or self.l_samples_eval < 1:
            raise ValueError("sample counts per ELBO term must be >= 1")

    @classmethod
    def from_training(cls, section) -> "VAEConfig":
        return cls(
            window=section.window,
            conv_channels=section.conv_channels,
            kernel_size=section.kernel_size,
            hidden_units=section.hidden_units,
            posterior=section.posterior,
            prior=PriorSpec((section.prior_mu,) * LATENT_DIM, section.prior_sigma),
            latent_target_weight=section.latent_target_weight,
            l_samples_train=section.l_samples_train,
            l_samples_eval=section.l_samples_eval,
            epochs=section.epochs,
            batch_size=section.batch_size,
            learning_rate=section.learning_rate,
            momentum=section.momentum,
            grad_clip=section.grad_clip,
        )


@dataclass
class TrainingHistory:
    curve: pd.DataFrame
    scatter: pd.DataFrame


class CorrelatedVAE:
    """
    Encoder: conv1d(2->C) -> ReLU -> conv1d(C->C) -> ReLU -> dense(->H) -> ReLU -> dense(->4)
    Decoder: dense(2->H) -> ReLU -> dense(H->2W)

    Heads: ar1 = (mu_1, mu_2, log s, atanh rho); diag = (mu_1, mu_2, log s_1, log s_2).
    """

    def __init__(self, config: VAEConfig, seed: int = 0, bs_id: int = -1):
        self.config = config
        self.bs_id = bs_id
        self.seed = seed
        self.normalization: Optional[Normalization] = None
        self.trained = False

        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        C, k, H, W = config.conv_channels, config.kernel_size, config.hidden_units, config.window
        conv1 = Conv1D(2, C, k, rng=rng)
        conv2 = Conv1D(C, C, k, rng=rng)
        flat = C * conv2.output_width(conv1.output_width(W))
        self.encoder = Network(
            [conv1, ReLU(), conv2, ReLU(), Dense(flat, H, rng), ReLU(), Dense(H, 2 + 2, rng)]
        )
        self.decoder = Network([Dense(LATENT_DIM, H, rng), ReLU(), Dense(H, 2 * W, rng)])

    @property
    def is_ar1(self) -> bool:
        return self.config.posterior == "ar1"

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def zero_grad(self):
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    # -------------------------
    # Encoding
    # -------------------------
    def _heads(self, X: np.ndarray) -> Tuple[np.ndarray, ...]:
        h = self.encoder.forward(X)
        mu = h[:, :2]
        if self.is_ar1:
            log_s = np.clip(h[:, 2], -LOG_S_BOUND, LOG_S_BOUND)
            b = np.clip(h[:, 3], -ATANH_RHO_BOUND, ATANH_RHO_BOUND)
            masks = (np.abs(h[:, 2]) < LOG_S_BOUND, np.abs(h[:, 3]) < ATANH_RHO_BOUND)
            return mu, log_s, np.tanh(b), masks
        log_s = np.clip(h[:, 2:4], -LOG_S_BOUND, LOG_S_BOUND)
        return mu, log_s, None, (np.abs(h[:, 2:4]) < LOG_S_BOUND,)

    def encode(self, X: np.ndarray) -> Dict[str, np.ndarray]:
        """Posterior parameters for a batch (B, 2, W): mu (B, 2), s (B,) or (B, 2), rho (B,)."""
        mu, log_s, rho, _ = self._heads(np.asarray(X, dtype=float))
        out = {"mu": mu, "s": np.exp(log_s)}
        out["rho"] = rho if rho is not None else np.zeros(len(mu))
        return out

    def posterior(self, window: Union[InputWindow, np.ndarray]) -> Union[LatentPosterior, DiagPosterior]:
        values = window.values if isinstance(window, InputWindow) else np.asarray(window)
        enc = self.encode(values[None])
        if self.is_ar1:
            return LatentPosterior(enc["mu"][0], float(enc["s"][0]), float(enc["rho"][0]))
        return DiagPosterior(enc["mu"][0], enc["s"][0])

    def decode(self, z: np.ndarray) -> np.ndarray:
        W = self.config.window
        return self.decoder.forward(np.atleast_2d(z)).reshape(-1, 2, W)

    # -------------------------
    # Loss
    # -------------------------
    def loss_and_grads(
        self,
        X: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        n_samples: Optional[int] = None,
        eps: Optional[np.ndarray] = None,
    ) -> Tuple[float, Dict[str, float]]:
        """
        Mean training loss over the batch X (B, 2, W). Parameter gradients are accumulated
        into the encoder/decoder tensors. `eps` (L, B, 2) fixes the reparametrization noise.
        """
        X = np.asarray(X, dtype=float)
        B = X.shape[0]
        flat = X.reshape(B, -1)
        pairs = X.transpose(0, 2, 1)
        prior = self.config.prior
        lam = self.config.latent_target_weight
        if eps is None:
            L = n_samples or self.config.l_samples_train
            rng = rng or np.random.default_rng(0)
            eps = rng.standard_normal((L, B, LATENT_DIM))
        L = eps.shape[0]

        mu, log_s, rho, masks = self._heads(X)
        sqrt_s = np.exp(0.5 * log_s)
        d_mu = np.zeros_like(mu)
        d_log_s = np.zeros_like(log_s)
        d_rho = np.zeros(B)

        if self.is_ar1:
            unit, dunit = _unit_cholesky(rho, LATENT_DIM)

        recon = 0.0
        for l in range(L):
            if self.is_ar1:
                u = np.einsum("bij,bj->bi", unit, eps[l])
                z = mu + sqrt_s[:, None] * u
            else:
                u = eps[l]
                z = mu + sqrt_s * u
            diff = self.decoder.forward(z) - flat
            recon += 0.5 * float(np.sum(diff**2)) / (B * L)
            dz = self.decoder.backward(diff / (B * L))
            d_mu += dz
            if self.is_ar1:
                d_log_s += 0.5 * np.sum(dz * sqrt_s[:, None] * u, axis=1)
                d_rho += np.sum(dz * sqrt_s[:, None] * np.einsum("bij,bj->bi", dunit, eps[l]), axis=1)
            else:
                d_log_s += 0.5 * dz * sqrt_s * u

        if self.is_ar1:
            kl, k_mu, k_log_s, k_rho = kl_ar1_batch(mu, log_s, rho, prior)
            nll, n_mu, n_log_s, n_rho = latent_nll_ar1(pairs, mu, log_s, rho)
            d_rho += (k_rho + lam * n_rho) / B
        else:
            kl, k_mu, k_log_s = kl_diag_batch(mu, log_s, prior)
            nll, n_mu, n_log_s = latent_nll_diag(pairs, mu, log_s)
        d_mu += (k_mu + lam * n_mu) / B
        d_log_s += (k_log_s + lam * n_log_s) / B

        d_heads = np.zeros((B, 4))
        d_heads[:, :2] = d_mu
        if self.is_ar1:
            d_heads[:, 2] = d_log_s * masks[0]
            d_heads[:, 3] = d_rho * (1.0 - rho**2) * masks[1]
        else:
            d_heads[:, 2:4] = d_log_s * masks[0]
        self.encoder.backward(d_heads)

        loss = recon + float(np.mean(kl)) + lam * float(np.mean(nll))
        stats = {
            "recon": recon,
            "kl": float(np.mean(kl)),
            "latent_nll": float(np.mean(nll)),
            "mean_rho": float(np.mean(rho)) if rho is not None else 0.0,
            "mean_s": float(np.mean(np.exp(log_s))),
        }
        return loss, stats

    # -------------------------
    # Training
    # -------------------------
    def fit(
        self,
        windows: np.ndarray,
        seed: int = 0,
        normalization: Optional[Normalization] = None,
        epochs: Optional[int] = None,
        validation: Optional[np.ndarray] = None,
    ) -> TrainingHistory:
        """
        Minibatch SGD over `windows` (n, 2, W). Per epoch the curve records the mean
        training loss and the mean (rho, s) over the validation windows (training
        windows when none are given).
        """
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[0] == 0:
            raise ValueError("training needs a non-empty (n, 2, W) window array")
        if windows.shape[1:] != (2, self.config.window):
            raise ValueError(
                f"windows have shape {windows.shape[1:]}, model expects (2, {self.config.window})"
            )
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        probe = windows if validation is None or len(validation) == 0 else np.asarray(validation)
        self.normalization = normalization or self.normalization
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, 1]))
        optimizer = SGD(self.parameters(), cfg.learning_rate, cfg.momentum, cfg.grad_clip)

        curve_rows, scatter_rows = [], []
        n = windows.shape[0]
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for batch, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                try:
                    loss, _ = self.loss_and_grads(windows[idx], rng)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(epoch, batch, str(exc)) from exc
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, batch, f"loss is {loss}")
                optimizer.step()
                total += loss * len(idx)

            enc = self.encode(probe)
            curve_rows.append(
                {
                    "epoch": epoch,
                    "mean_loss": total / n,
                    "mean_rho": float(np.mean(enc["rho"])),
                    "mean_s": float(np.mean(enc["s"])),
                }
            )
            scatter_rows.extend(self._scatter(epoch, enc["mu"][:SCATTER_POINTS]))
            logger.debug(f"BS {self.bs_id} epoch {epoch}: loss {total / n:.4f}")

        self.trained = True
        curve = pd.DataFrame(curve_rows, columns=["epoch", "mean_loss", "mean_rho", "mean_s"])
        scatter = pd.DataFrame(scatter_rows, columns=["epoch", "bs_id", "mu_tau_t_ms", "mu_tau_p_ms"])
        if len(curve):
            logger.info(
                f"BS {self.bs_id}: trained {epochs} epochs on {n} windows, "
                f"loss {curve['mean_loss'].iloc[0]:.3f} -> {curve['mean_loss'].iloc[-1]:.3f}, "
                f"mean rho {curve['mean_rho'].iloc[-1]:.3f}"
            )
        return TrainingHistory(curve, scatter)

    def _scatter(self, epoch: int, mu: np.ndarray) -> List[dict]:
        ms = self.normalization.destandardize(mu, axis=1) if self.normalization else mu
        return [
            {"epoch": epoch, "bs_id": self.bs_id, "mu_tau_t_ms": float(a), "mu_tau_p_ms": float(b)}
            for a, b in ms
        ]

    # -------------------------
    # Inference
    # -------------------------
    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError(f"model for BS {self.bs_id} has not been trained")
        if self.normalization is None:
            raise NotTrainedError(f"model for BS {self.bs_id} has no standardization statistics")

    def e2e_law(self, window: Union[InputWindow, np.ndarray]) -> GaussianLaw:
        self._require_trained()
        post = self.posterior(window)
        norm_ = self.normalization
        if isinstance(post, DiagPosterior):
            m = float(sum(norm_.mean[k] + norm_.std[k] * post.mu[k] for k in range(2)))
            var = float(sum(post.s_vec[k] * norm_.std[k] ** 2 for k in range(2)))
            return GaussianLaw(m, var)
        return sum_law(post.mu, post.scale, post.rho, norm_.std, norm_.mean)

    def channel_law(self, window: Union[InputWindow, np.ndarray], channel: int) -> GaussianLaw:
        """Marginal law in ms of one latent channel (0 = transmission, 1 = compute)."""
        self._require_trained()
        post = self.posterior(window)
        s = post.s_vec[channel] if isinstance(post, DiagPosterior) else post.scale
        mean = self.normalization.mean[channel] + self.normalization.std[channel] * post.mu[channel]
        return GaussianLaw(float(mean), float(s * self.normalization.std[channel] ** 2))

    def sample_e2e(self, window: Union[InputWindow, np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
        """E2E delays in ms from reparametrized latent draws."""
        self._require_trained()
        z = reparam_sample(self.posterior(window), rng.standard_normal((n, LATENT_DIM)))
        return self.normalization.destandardize(z, axis=1).sum(axis=1)

    def validation_loss(self, windows: np.ndarray, seed: int = 0) -> float:
        """Mean loss with l_samples_eval samples; leaves parameters untouched."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, 2]))
        loss, _ = self.loss_and_grads(windows, rng, self.config.l_samples_eval)
        self.zero_grad()
        return loss

    # -------------------------
    # Persistence
    # -------------------------
    def save(self, path: str):
        arrays = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        arrays.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        meta = {
            "config": {**asdict(self.config), "prior": asdict(self.config.prior)},
            "bs_id": self.bs_id,
            "seed": self.seed,
            "trained": self.trained,
            "normalization": asdict(self.normalization) if self.normalization else None,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> "CorrelatedVAE":
        arrays, meta = load_checkpoint(path)
        cfg = dict(meta["config"])
        prior = cfg.pop("prior")
        config = VAEConfig(prior=PriorSpec(tuple(prior["mu_prior"]), prior["sigma_prior"]), **cfg)
        model = cls(config, seed=meta["seed"], bs_id=meta["bs_id"])
        model.encoder.load_state_dict(
            {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
        )
        model.decoder.load_state_dict(
            {k[len("decoder."):]: v for k, v in arrays.items() if k.startswith("decoder.")}
        )
        model.trained = meta["trained"]
        if meta["normalization"]:
            n = meta["normalization"]
            model.normalization = Normalization(tuple(n["mean"]), tuple(n["std"]))
        return model


def train(
    windows: np.ndarray,
    config: VAEConfig,
    seed: int = 0,
    normalization: Optional[Normalization] = None,
    bs_id: int = -1,
    validation: Optional[np.ndarray] = None,
) -> Tuple[CorrelatedVAE, TrainingHistory]:
    model = CorrelatedVAE(config, seed=seed, bs_id=bs_id)
    history = model.fit(windows, seed=seed, normalization=normalization, validation=validation)
    return model, history


def e2e_delay_distribution(model: CorrelatedVAE, window: Union[InputWindow, np.ndarray]) -> GaussianLaw:
    """Gaussian law (ms) of tau_t * T + tau_p under the model's posterior for `window`."""
    return model.e2e_law(window)
