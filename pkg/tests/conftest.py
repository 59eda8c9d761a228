"""Shared fixtures and independent numeric oracles used across the suite."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import beta as beta_dist

from adaptex.model import PriorSpec


def binary_entropy(p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return -(p * np.log(p) + (1 - p) * np.log(1 - p))


def beta_bernoulli_mutual_information(a: float, b: float) -> float:
    """Quadrature oracle for I(y; phi) with phi ~ Beta(a, b), y | phi Bernoulli.

    I = H_binary(E[phi]) - E[H_binary(phi)], the inner expectation integrated
    against the Beta density.
    """
    mean = a / (a + b)
    expected_conditional, _ = integrate.quad(
        lambda p: beta_dist.pdf(p, a, b) * binary_entropy(p), 0.0, 1.0, limit=200
    )
    return float(binary_entropy(mean) - expected_conditional)


def grid_posterior_theta(prior: PriorSpec, difficulties, y, lo=-6.0, hi=6.0, points=2001):
    """Dense grid-quadrature posterior (mean, sd) of one ability given known
    difficulties. Independent of the variational path it checks."""
    grid = np.linspace(lo, hi, points)
    difficulties = np.asarray(difficulties, dtype=float)
    y = np.asarray(y, dtype=float)
    x = grid[:, None] - difficulties[None, :]
    loglik = (y[None, :] * (-np.logaddexp(0, -x)) + (1 - y[None, :]) * (-np.logaddexp(0, x))).sum(axis=1)
    logp = -0.5 * ((grid - prior.theta_mean) / prior.theta_sd) ** 2 + loglik
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = float((grid * w).sum())
    sd = float(np.sqrt(((grid - mean) ** 2 * w).sum()))
    return mean, sd


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def prior():
    return PriorSpec()
