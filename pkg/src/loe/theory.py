"""Smooth relaxation of the label minimisation and its EM reading.

The formulas are implemented as printed, including two conventions that do
not agree with the trainer:

* the un-normalised joint pairs the prior weight ``log alpha`` with the
  anomaly loss, while the posterior pairs ``log alpha`` with the normal loss;
* ``posterior_normal`` therefore tends to ``alpha`` (not ``1 - alpha``) as
  ``beta -> 0``.

Everything runs in log space so ``beta`` up to 1e8 cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ConfigurationError


def log_odds(alpha: float) -> float:
    return math.log(alpha) - math.log(1.0 - alpha)


@dataclass(frozen=True)
class RelaxationParams:
    beta: float
    alpha: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")

    @property
    def c_alpha(self) -> float:
        return log_odds(self.alpha)


def smooth_neg_min(l_n, l_a, beta: float):
    """beta^-1 log(exp(-beta L_n) + exp(-beta L_a)), shifted by the max exponent."""
    if not beta > 0:
        raise ConfigurationError("beta must be positive")
    l_n, l_a = np.asarray(l_n, dtype=np.float64), np.asarray(l_a, dtype=np.float64)
    hi = -np.minimum(l_n, l_a)
    gap = np.abs(l_n - l_a)
    out = np.asarray(hi + np.log1p(np.exp(-beta * gap)) / beta)
    # the addition can round one ulp past the log(2)/beta ceiling; step back
    cap = math.log(2.0) / beta
    over = (out - hi) > cap
    while np.any(over):
        out = np.where(over, np.nextafter(out, -np.inf), out)
        over = (out - hi) > cap
    return float(out) if out.ndim == 0 else out


def unnormalized_joint(l_n, l_a, y, alpha: float, beta: float):
    """log p(x, y) = y (log a - beta L_a) + (1 - y)(log(1 - a) - beta L_n)."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    out = (y * (math.log(alpha) - beta * np.asarray(l_a))
           + (1.0 - y) * (math.log(1.0 - alpha) - beta * np.asarray(l_n)))
    return float(out) if np.ndim(out) == 0 else out


def _posterior_logits(l_n, l_a, alpha, beta):
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    l_n, l_a = np.asarray(l_n, dtype=np.float64), np.asarray(l_a, dtype=np.float64)
    normal = -beta * l_n + math.log(alpha)
    anomaly = -beta * l_a + math.log(1.0 - alpha)
    return normal, anomaly


def posterior_normal(l_n, l_a, alpha: float, beta: float):
    """p(y=0 | x) = e^{-b L_n + log a} / (e^{-b L_n + log a} + e^{-b L_a + log(1-a)})."""
    normal, anomaly = _posterior_logits(l_n, l_a, alpha, beta)
    out = expit(normal - anomaly)
    return float(out) if np.ndim(out) == 0 else out


def posterior_anomaly(l_n, l_a, alpha: float, beta: float):
    normal, anomaly = _posterior_logits(l_n, l_a, alpha, beta)
    out = expit(anomaly - normal)
    return float(out) if np.ndim(out) == 0 else out


def hard_classifier(l_n, l_a, c_threshold: float = 0.0):
    """0 if L_n < L_a + C else 1; equality counts as anomalous."""
    out = np.where(np.asarray(l_n) < np.asarray(l_a) + c_threshold, 0, 1)
    return int(out) if out.ndim == 0 else out


def expected_loss(l_n, l_a, p_normal) -> float:
    """Posterior expectation of sum_i (1 - y_i) L_n + y_i L_a with p(y_i=0) = p_normal."""
    p = np.asarray(p_normal, dtype=np.float64)
    return float(np.sum(p * np.asarray(l_n) + (1.0 - p) * np.asarray(l_a)))


def em_iterate(l_n, l_a, alpha: float, beta: float, steps: int = 1, update=None):
    """Alternate E-steps (posteriors) and Q evaluations.

    With frozen losses the sequence is constant. ``update(posteriors)``, if
    given, plays the role of the M-step and returns the next ``(L_n, L_a)``.
    Returns a list of ``(Q, posterior_normal_vector)``.
    """
    l_n, l_a = np.asarray(l_n, dtype=np.float64), np.asarray(l_a, dtype=np.float64)
    out = []
    for _ in range(steps):
        post = np.atleast_1d(posterior_normal(l_n, l_a, alpha, beta))
        out.append((expected_loss(l_n, l_a, post), post))
        if update is not None:
            l_n, l_a = (np.asarray(a, dtype=np.float64) for a in update(post))
    return out


def log_marginal(l_n, l_a, alpha: float, beta: float) -> float:
    """log sum_y prod_i p(x_i, y_i) under the un-normalised joint."""
    l_n, l_a = np.atleast_1d(l_n), np.atleast_1d(l_a)
    terms = np.stack([unnormalized_joint(l_n, l_a, np.zeros_like(l_n), alpha, beta),
                      unnormalized_joint(l_n, l_a, np.ones_like(l_n), alpha, beta)])
    return float(np.sum(logsumexp(terms, axis=0)))
