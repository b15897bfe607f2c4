"""
Risk Module
===========
Purpose: Value-at-Risk and Conditional Value-at-Risk of delay

alpha is the tail mass everywhere: VaR_alpha is the smallest threshold exceeded with
probability at most alpha, and CVaR_alpha the mean of the worst alpha share of the law
(the auxiliary function t + E[(X - t)^+] / alpha at t = VaR_alpha).
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

# Absorbs float error in alpha * n when counting the tail
TAIL_TOL = 1e-9


@dataclass(frozen=True)
class RiskEstimate:
    var_ms: float
    cvar_ms: float
    alpha: float
    source: str

    def __post_init__(self):
        if not (math.isfinite(self.var_ms) and math.isfinite(self.cvar_ms)):
            raise ValueError("risk estimates must be finite")


def _samples(samples: Sequence[float]) -> np.ndarray:
    values = np.asarray(samples, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("risk measures need at least one sample")
    if not np.isfinite(values).all():
        raise ValueError("risk samples must be finite")
    return values


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def var_empirical(samples: Sequence[float], alpha: float) -> float:
    """Smallest sample value t with (fraction of samples > t) <= alpha."""
    _check_alpha(alpha)
    x = np.sort(_samples(samples))
    n = x.size
    exceed = n - np.searchsorted(x, x, side="right")
    ok = np.flatnonzero(exceed <= alpha * n + TAIL_TOL)
    return float(x[ok[0]])


def cvar_empirical(samples: Sequence[float], alpha: float) -> float:
    """
    VaR + E[(X - VaR)^+] / alpha over the empirical law.

    When alpha * n is an integer this is the mean of the samples strictly above VaR; otherwise
    the atom at VaR carries the part of the alpha tail the strict exceedances leave uncovered.
    A tail with no strict exceedance gives VaR.
    """
    x = _samples(samples)
    var = var_empirical(x, alpha)
    excess = np.maximum(x - var, 0.0)
    return float(var + excess.mean() / alpha)


def cvar_rockafellar(samples: Sequence[float], alpha: float) -> Tuple[float, float]:
    """
    Minimize phi(t) = t + E[(X - t)^+] / alpha over the sample points.
    Returns (minimum, smallest minimizer).
    """
    _check_alpha(alpha)
    x = np.sort(_samples(samples))
    n = x.size
    # E[(X - t)^+] at every sample point t = x[i], from suffix sums
    suffix = np.cumsum(x[::-1])[::-1]
    above = n - np.searchsorted(x, x, side="right")
    start = n - above
    tail_sum = np.where(above > 0, suffix[np.minimum(start, n - 1)], 0.0)
    excess = (tail_sum - above * x) / n
    phi = x + excess / alpha
    best = phi.min()
    i = int(np.flatnonzero(phi <= best + 1e-12 * max(1.0, abs(best)))[0])
    return float(phi[i]), float(x[i])


def cvar_gaussian(mean: float, variance: float, alpha: float) -> float:
    """mu + sigma * pdf(q) / alpha with q the standard normal upper-alpha quantile."""
    _check_alpha(alpha)
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return float(mean)
    q = norm.isf(alpha)
    return float(mean + math.sqrt(variance) * norm.pdf(q) / alpha)


def var_gaussian(mean: float, variance: float, alpha: float) -> float:
    _check_alpha(alpha)
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    return float(mean + math.sqrt(variance) * norm.isf(alpha))


def estimate_empirical(samples: Sequence[float], alpha: float) -> RiskEstimate:
    x = _samples(samples)
    return RiskEstimate(var_empirical(x, alpha), cvar_empirical(x, alpha), alpha, "empirical")


def estimate_gaussian(mean: float, variance: float, alpha: float) -> RiskEstimate:
    return RiskEstimate(
        var_gaussian(mean, variance, alpha), cvar_gaussian(mean, variance, alpha), alpha, "gaussian"
    )
