"""Per-candidate design scores: information gain, expected utility, free energy.

Every estimator here treats a candidate design as a binary-outcome experiment
described by a latent sampler plus a success-probability map, so the same
nested Monte Carlo machinery scores logistic-model items and Beta-Bernoulli
treatment arms alike. Scores combine into the expected free energy
G = -(EIG + utility), minimized by the selection policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np

from .inference import BetaPosterior, GroupedTreatmentPosterior, InferenceFailure, beta_predictive
from .model import sigmoid

LIKELIHOOD_FLOOR = 1e-300


@dataclass
class ClampDiagnostics:
    """Counts likelihood-floor clamps so degenerate inner averages are visible."""

    floor_hits: int = 0

    def register(self, n: int) -> None:
        self.floor_hits += int(n)


@dataclass(frozen=True)
class SampleBudget:
    """Monte Carlo budget: outer draws N, inner marginal draws M, utility draws S."""

    n_outer: int = 1000
    n_inner: int = 1000
    s_util: int = 1000

    def __post_init__(self):
        if min(self.n_outer, self.n_inner, self.s_util) < 1:
            raise ValueError("all sample counts must be at least 1")


@dataclass(frozen=True)
class PreferencePrior:
    """Strength of the outcome preference; gamma = 0 recovers pure information seeking."""

    gamma: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class DesignScore:
    design_id: int
    eig: float
    utility: float
    efe: float

    @classmethod
    def from_parts(cls, design_id: int, eig: float, utility: float) -> "DesignScore":
        return cls(design_id=design_id, eig=eig, utility=utility, efe=expected_free_energy(eig, utility))

    def as_dict(self) -> dict:
        return {"design_id": self.design_id, "eig": self.eig, "utility": self.utility, "efe": self.efe}


def scores_to_json_rows(scores) -> list[dict]:
    return [s.as_dict() for s in scores]


class BinaryDesign(Protocol):
    """A candidate experiment with one binary outcome."""

    def sample_latents(self, n: int, rng) -> np.ndarray: ...

    def success_prob(self, latents) -> np.ndarray: ...


@dataclass(frozen=True)
class BetaBernoulliDesign:
    """Bernoulli outcome with a Beta posterior over its success probability."""

    alpha: float
    beta: float

    def sample_latents(self, n: int, rng) -> np.ndarray:
        return rng.beta(self.alpha, self.beta, size=n)

    def success_prob(self, latents) -> np.ndarray:
        return np.asarray(latents, dtype=float)


@dataclass(frozen=True)
class IrtJointDesign:
    """Logistic-model item targeting the (ability, difficulty) pair jointly.

    Point masses (sd 0) are allowed on either latent; with a point-mass
    difficulty this reduces to targeting the ability alone.
    """

    theta_mean: float
    theta_sd: float
    delta_mean: float
    delta_sd: float

    def sample_latents(self, n: int, rng) -> np.ndarray:
        theta = rng.normal(self.theta_mean, self.theta_sd, size=n)
        delta = rng.normal(self.delta_mean, self.delta_sd, size=n)
        return np.column_stack([theta, delta])

    def success_prob(self, latents) -> np.ndarray:
        latents = np.asarray(latents, dtype=float)
        return sigmoid(latents[:, 0] - latents[:, 1])


def _clamped_log(values, diagnostics: ClampDiagnostics | None) -> np.ndarray:
    below = values < LIKELIHOOD_FLOOR
    if np.any(below) and diagnostics is not None:
        diagnostics.register(np.count_nonzero(below))
    return np.log(np.maximum(values, LIKELIHOOD_FLOOR))


def eig_nested_mc(
    design: BinaryDesign,
    budget: SampleBudget,
    rng,
    diagnostics: ClampDiagnostics | None = None,
) -> float:
    """Nested Monte Carlo estimate of the expected information gain.

    Averages log p(y_s | v_s) - log [(1/M) sum_m p(y_s | v_m)] over N outer
    draws (v_s, y_s) from the design, with one independent inner sample set
    shared across outer draws. Inner averages are clamped at the likelihood
    floor before the log.
    """
    outer = design.sample_latents(budget.n_outer, rng)
    p_outer = np.clip(design.success_prob(outer), 0.0, 1.0)
    y = rng.random(budget.n_outer) < p_outer
    inner = design.sample_latents(budget.n_inner, rng)
    inner_p1 = float(np.mean(np.clip(design.success_prob(inner), 0.0, 1.0)))
    lik = np.where(y, p_outer, 1.0 - p_outer)
    marginal = np.where(y, inner_p1, 1.0 - inner_p1)
    return float(np.mean(_clamped_log(lik, diagnostics) - _clamped_log(marginal, diagnostics)))


def eig_joint_theta_delta(
    posterior,
    participant_id: int,
    item_id: int,
    budget: SampleBudget,
    rng,
    diagnostics: ClampDiagnostics | None = None,
) -> float:
    """Information gain about (theta_i, delta_j) jointly from one response."""
    if not 0 <= participant_id < posterior.n_participants:
        raise ValueError(f"unknown participant index {participant_id}")
    if not 0 <= item_id < posterior.n_items:
        raise ValueError(f"unknown item index {item_id}")
    design = IrtJointDesign(
        theta_mean=float(posterior.theta_mean[participant_id]),
        theta_sd=float(posterior.theta_sd[participant_id]),
        delta_mean=float(posterior.delta_mean[item_id]),
        delta_sd=float(posterior.delta_sd[item_id]),
    )
    return eig_nested_mc(design, budget, rng, diagnostics)


class MarginalBound(NamedTuple):
    eig_bound: float
    marginal_q1: float


def eig_marginal_bound(
    design: BinaryDesign,
    budget: SampleBudget,
    rng,
    opt_steps: int = 200,
    opt_lr: float = 0.1,
    opt_samples: int = 64,
    fixed_marginal_q1: float | None = None,
    diagnostics: ClampDiagnostics | None = None,
) -> MarginalBound:
    """Variational upper bound on the EIG via a fitted Bernoulli outcome marginal.

    The marginal q(y) = inverse-logit(m) is tightened by stochastic gradient;
    for any q the expectation of the returned estimate is EIG + KL(p(y) || q),
    hence an upper bound, with equality at the fitted optimum. The fitted
    q(y=1) is returned for reuse by utility terms.
    """
    if fixed_marginal_q1 is None:
        m = 0.0
        for step in range(opt_steps):
            latents = design.sample_latents(opt_samples, rng)
            p = np.clip(design.success_prob(latents), 0.0, 1.0)
            y = rng.random(opt_samples) < p
            m -= opt_lr * (sigmoid(m) - float(np.mean(y)))
            if not math.isfinite(m):
                raise InferenceFailure(step, "marginal optimization diverged")
        q1 = sigmoid(m)
    else:
        if not 0.0 < fixed_marginal_q1 < 1.0:
            raise ValueError("fixed marginal must lie strictly inside (0, 1)")
        q1 = float(fixed_marginal_q1)

    latents = design.sample_latents(budget.n_outer, rng)
    p = np.clip(design.success_prob(latents), 0.0, 1.0)
    y = rng.random(budget.n_outer) < p
    lik = np.where(y, p, 1.0 - p)
    marginal = np.where(y, q1, 1.0 - q1)
    bound = float(np.mean(_clamped_log(lik, diagnostics) - _clamped_log(marginal, diagnostics)))
    return MarginalBound(eig_bound=bound, marginal_q1=q1)


def beta_eig_batch(alphas, betas, s: int, rng) -> np.ndarray:
    """Monte Carlo Beta-Bernoulli EIG for a whole batch of (alpha, beta) cells.

    Per cell: draw phi from the posterior and y | phi, then average
    log p(y | phi) - log predictive(y), with the closed-form predictive
    alpha/(alpha+beta). Unbiased for the exact information gain.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    phi = rng.beta(alphas[None, :], betas[None, :], size=(s, alphas.size))
    y = rng.random((s, alphas.size)) < phi
    pred1 = alphas / (alphas + betas)
    lik = np.where(y, phi, 1.0 - phi)
    marginal = np.where(y, pred1[None, :], 1.0 - pred1[None, :])
    return np.mean(_clamped_log(lik, None) - _clamped_log(marginal, None), axis=0)


def eig_beta_posterior(post: BetaPosterior, s: int, rng) -> float:
    """Monte Carlo EIG for a single Beta-Bernoulli arm."""
    return float(beta_eig_batch([post.alpha], [post.beta], s, rng)[0])


def eig_beta_bernoulli(gp: GroupedTreatmentPosterior, treatment: int, group: int, s: int, rng) -> float:
    """EIG about a (treatment, group) success probability from one more outcome."""
    return eig_beta_posterior(gp.get(treatment, group), s, rng)


def utility_discrimination(
    gp: GroupedTreatmentPosterior,
    treatment: int,
    pref: PreferencePrior,
    group_weights=(0.5, 0.5),
) -> float:
    """Preference for outcomes that match the group label: gamma [q(y=z) - q(y!=z)].

    Group marginals default to a balanced half/half pool; the additive
    normalization constant of the preference prior is dropped since only
    differences across designs matter.
    """
    w = np.asarray(group_weights, dtype=float)
    if w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("group weights must be a probability vector")
    q1_z1 = gp.predictive(treatment, 1)
    q1_z0 = gp.predictive(treatment, 0)
    p_match = w[1] * q1_z1 + w[0] * (1.0 - q1_z0)
    p_mismatch = w[1] * (1.0 - q1_z1) + w[0] * q1_z0
    return pref.gamma * (p_match - p_mismatch)


def utility_success_preference(post: BetaPosterior, pref: PreferencePrior) -> float:
    """Preference for successful outcomes: gamma [q(y=1) - q(y=0)]."""
    q1 = beta_predictive(post)
    return pref.gamma * (2.0 * q1 - 1.0)


@dataclass
class DurationModel:
    """Per-item log-normal completion-time posteriors plus the slowness penalty.

    Completion time is modeled as log tau ~ N(mu_j, exp(eta_j)) with Gaussian
    posteriors over mu_j and eta_j. Items likely to exceed sigma_tau seconds
    are penalized by up to gamma_slow.
    """

    mu_mean: np.ndarray
    mu_sd: np.ndarray
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    sigma_tau: float = 20.0
    gamma_slow: float = 0.5

    def __post_init__(self):
        self.mu_mean = np.asarray(self.mu_mean, dtype=float)
        self.mu_sd = np.asarray(self.mu_sd, dtype=float)
        self.eta_mean = np.asarray(self.eta_mean, dtype=float)
        self.eta_sd = np.asarray(self.eta_sd, dtype=float)
        if not self.sigma_tau > 0:
            raise ValueError("sigma_tau must be positive")
        if self.gamma_slow < 0:
            raise ValueError("gamma_slow must be nonnegative")
        if np.any(self.mu_sd < 0) or np.any(self.eta_sd < 0):
            raise ValueError("posterior sds must be nonnegative")

    @property
    def n_items(self) -> int:
        return len(self.mu_mean)

    @classmethod
    def from_prior(
        cls,
        n_items: int,
        mu0: float = math.log(10.0),
        mu_sd0: float = 1.5,
        eta0: float = -0.5,
        eta_sd0: float = 0.75,
        sigma_tau: float = 20.0,
        gamma_slow: float = 0.5,
    ) -> "DurationModel":
        return cls(
            mu_mean=np.full(n_items, mu0),
            mu_sd=np.full(n_items, mu_sd0),
            eta_mean=np.full(n_items, eta0),
            eta_sd=np.full(n_items, eta_sd0),
            sigma_tau=sigma_tau,
            gamma_slow=gamma_slow,
        )


def utility_slow_penalty(dm: DurationModel, item_id: int, s: int, rng) -> float:
    """Expected slowness cost -gamma_slow P(tau > sigma_tau), estimated by sampling.

    Draws (mu, eta) from their Gaussian posteriors and log tau ~ N(mu, exp eta);
    always lies in [-gamma_slow, 0].
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    if not 0 <= item_id < dm.n_items:
        raise ValueError(f"unknown item index {item_id}")
    mu = rng.normal(dm.mu_mean[item_id], dm.mu_sd[item_id], size=s)
    eta = rng.normal(dm.eta_mean[item_id], dm.eta_sd[item_id], size=s)
    log_tau = rng.normal(mu, np.exp(eta))
    exceed = float(np.mean(log_tau > math.log(dm.sigma_tau)))
    return -dm.gamma_slow * exceed


def expected_free_energy(eig: float, utility: float) -> float:
    """G = -(EIG + utility); at utility 0 its argmin is the EIG argmax."""
    if not (math.isfinite(eig) and math.isfinite(utility)):
        raise ValueError("eig and utility must be finite")
    return -(eig + utility)


def score_testing_candidates(
    posterior,
    participant_id: int,
    candidate_items,
    budget: SampleBudget,
    rng,
    diagnostics: ClampDiagnostics | None = None,
) -> list[DesignScore]:
    """Pure information-gain scores for the remaining items of one participant."""
    return [
        DesignScore.from_parts(
            j, eig_joint_theta_delta(posterior, participant_id, j, budget, rng, diagnostics), 0.0
        )
        for j in candidate_items
    ]


def score_treatment_candidates(
    gp: GroupedTreatmentPosterior,
    group: int,
    candidates,
    pref: PreferencePrior,
    s: int,
    rng,
    group_weights=(0.5, 0.5),
) -> list[DesignScore]:
    """EIG-plus-discrimination-utility scores for one participant's candidate arms."""
    return [
        DesignScore.from_parts(
            j,
            eig_beta_bernoulli(gp, j, group, s, rng),
            utility_discrimination(gp, j, pref, group_weights),
        )
        for j in candidates
    ]
