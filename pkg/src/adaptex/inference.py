"""Posterior estimation.

Two routes. Stochastic mean-field variational inference fits independent
Gaussian factors over the logistic-model latents by descending the variational
free energy E_q[log q - log p(y, v)] with reparameterized gradients. Exact
conjugate Beta-Bernoulli updating tracks per-(treatment, group) success
probabilities for adaptive treatment assignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    PriorSpec,
    batch_grad_log_joint,
    batch_log_joint,
    log_sigmoid,
    normal_logpdf,
    pack_records,
    sigmoid,
)

SNAPSHOT_VERSION = 1


class InferenceFailure(RuntimeError):
    """Raised when stochastic optimization produces a non-finite state."""

    def __init__(self, step: int, message: str = "optimization diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ViConfig:
    step_count: int = 500
    learning_rate: float = 0.05
    mc_samples_per_step: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.step_count < 1:
            raise ValueError("step_count must be at least 1")
        if self.mc_samples_per_step < 1:
            raise ValueError("mc_samples_per_step must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def fit_gaussian_mean_field(grad_fn, init_mean, init_sd, cfg: ViConfig, precond=None):
    """Generic mean-field Gaussian fit by stochastic gradient on the free energy.

    grad_fn maps a batch of latent draws (S, dim) to gradients of
    log p(y, v) with the same shape. Standard deviations are optimized on a
    log scale, where the entropy gradient is +1 per coordinate.  An optional
    fixed diagonal preconditioner rescales the mean updates; it compensates
    for curvature differences of several orders of magnitude between latents
    touched by many observations and latents touched by none.
    """
    mu = np.array(init_mean, dtype=float)
    rho = np.log(np.array(init_sd, dtype=float))
    if precond is None:
        precond = np.ones_like(mu)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    for step in range(cfg.step_count):
        eps = rng.standard_normal((cfg.mc_samples_per_step, mu.size))
        sigma = np.exp(rho)
        v = mu[None, :] + sigma[None, :] * eps
        g = grad_fn(v)
        g_mu = g.mean(axis=0)
        g_rho = (g * eps).mean(axis=0) * sigma
        mu = mu + lr * precond * g_mu
        rho = rho + lr * (1.0 + g_rho)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(rho))):
            raise InferenceFailure(step)
    return mu, np.exp(rho)


def gaussian_mean_field_free_energy(mean, sd, log_density_fn, s: int, rng) -> float:
    """Unbiased Monte Carlo estimate of E_q[log q(v) - log p(y, v)]."""
    if s < 1:
        raise ValueError("s must be at least 1")
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    eps = rng.standard_normal((s, mean.size))
    v = mean[None, :] + sd[None, :] * eps
    log_q = normal_logpdf(v, mean[None, :], sd[None, :]).sum(axis=1)
    return float(np.mean(log_q - log_density_fn(v)))


@dataclass
class MeanFieldPosterior:
    """Per-latent Gaussian (mean, sd) factors for theta, delta, and b.

    With calibrated_delta=True the difficulties are known constants rather
    than fitted latents; their sd entries are exactly zero and b stays at its
    prior (nothing ties it to the data once delta is fixed).
    """

    theta_mean: np.ndarray
    theta_sd: np.ndarray
    delta_mean: np.ndarray
    delta_sd: np.ndarray
    b_mean: float
    b_sd: float
    calibrated_delta: bool = False

    def __post_init__(self):
        self.theta_mean = np.asarray(self.theta_mean, dtype=float)
        self.theta_sd = np.asarray(self.theta_sd, dtype=float)
        self.delta_mean = np.asarray(self.delta_mean, dtype=float)
        self.delta_sd = np.asarray(self.delta_sd, dtype=float)
        self.b_mean = float(self.b_mean)
        self.b_sd = float(self.b_sd)
        if not np.all(self.theta_sd > 0) or not self.b_sd > 0:
            raise ValueError("posterior sds must be strictly positive")
        if self.calibrated_delta:
            if not np.all(self.delta_sd == 0):
                raise ValueError("calibrated difficulties must have sd 0")
        elif not np.all(self.delta_sd > 0):
            raise ValueError("posterior sds must be strictly positive")

    @property
    def n_participants(self) -> int:
        return len(self.theta_mean)

    @property
    def n_items(self) -> int:
        return len(self.delta_mean)

    @classmethod
    def from_prior(cls, prior: PriorSpec, n_participants: int, n_items: int) -> "MeanFieldPosterior":
        return cls(
            theta_mean=np.full(n_participants, prior.theta_mean),
            theta_sd=np.full(n_participants, prior.theta_sd),
            delta_mean=np.full(n_items, prior.b_mean),
            delta_sd=np.full(n_items, prior.delta_sd),
            b_mean=prior.b_mean,
            b_sd=prior.b_sd,
        )

    @classmethod
    def calibrated(cls, prior: PriorSpec, n_participants: int, difficulties) -> "MeanFieldPosterior":
        difficulties = np.asarray(difficulties, dtype=float)
        return cls(
            theta_mean=np.full(n_participants, prior.theta_mean),
            theta_sd=np.full(n_participants, prior.theta_sd),
            delta_mean=difficulties,
            delta_sd=np.zeros_like(difficulties),
            b_mean=prior.b_mean,
            b_sd=prior.b_sd,
            calibrated_delta=True,
        )

    def expand_participants(self, n_participants: int, prior: PriorSpec) -> "MeanFieldPosterior":
        """Ensure the theta block covers n_participants, padding new arrivals
        with prior entries. Already-large blocks are returned unchanged (log
        replay over a snapshot re-registers participants the snapshot knows)."""
        extra = n_participants - self.n_participants
        if extra <= 0:
            return self
        return replace(
            self,
            theta_mean=np.concatenate([self.theta_mean, np.full(extra, prior.theta_mean)]),
            theta_sd=np.concatenate([self.theta_sd, np.full(extra, prior.theta_sd)]),
        )

    def to_json(self) -> str:
        latents = {}
        for i in range(self.n_participants):
            latents[f"theta_{i}"] = {"mean": float(self.theta_mean[i]), "sd": float(self.theta_sd[i])}
        for j in range(self.n_items):
            latents[f"delta_{j}"] = {"mean": float(self.delta_mean[j]), "sd": float(self.delta_sd[j])}
        latents["b"] = {"mean": self.b_mean, "sd": self.b_sd}
        return json.dumps(
            {
                "version": SNAPSHOT_VERSION,
                "calibrated_delta": self.calibrated_delta,
                "latents": latents,
            }
        )

    @classmethod
    def from_json(cls, doc: str) -> "MeanFieldPosterior":
        payload = json.loads(doc)
        if payload.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {payload.get('version')}")
        latents = payload["latents"]
        n_p = sum(1 for k in latents if k.startswith("theta_"))
        n_i = sum(1 for k in latents if k.startswith("delta_"))
        return cls(
            theta_mean=np.array([latents[f"theta_{i}"]["mean"] for i in range(n_p)]),
            theta_sd=np.array([latents[f"theta_{i}"]["sd"] for i in range(n_p)]),
            delta_mean=np.array([latents[f"delta_{j}"]["mean"] for j in range(n_i)]),
            delta_sd=np.array([latents[f"delta_{j}"]["sd"] for j in range(n_i)]),
            b_mean=latents["b"]["mean"],
            b_sd=latents["b"]["sd"],
            calibrated_delta=bool(payload.get("calibrated_delta", False)),
        )


def _record_counts(pid, iid, n_participants, n_items):
    c_theta = np.bincount(pid, minlength=n_participants) if len(pid) else np.zeros(n_participants)
    c_delta = np.bincount(iid, minlength=n_items) if len(iid) else np.zeros(n_items)
    return c_theta, c_delta


def _curvature_precond(curvature_bound):
    """Mean-update preconditioner 1/max(1, curvature bound).

    Coordinates whose bound stays at or below 1 keep the plain SGD step
    bit-for-bit; only heavily observed latents are damped.
    """
    return 1.0 / np.maximum(1.0, np.asarray(curvature_bound, dtype=float))


def fit_mean_field(
    prior: PriorSpec,
    data,
    cfg: ViConfig,
    *,
    n_participants: int,
    n_items: int | None = None,
    init: MeanFieldPosterior | None = None,
    item_difficulties=None,
) -> MeanFieldPosterior:
    """Fit the mean-field posterior of the logistic model by stochastic VI.

    Deterministic under a fixed cfg.seed. A previous posterior may be passed
    as init to warm-start refits after each new response. When
    item_difficulties is given the difficulties are treated as calibrated
    constants and only the abilities are fitted.

    The mean updates are preconditioned by the inverse of a per-latent
    curvature bound (prior precision plus 1/4 per touching observation, the
    Bernoulli maximum); plain uniform-rate SGD is unstable once popular items
    accumulate hundreds of observations.
    """
    if item_difficulties is not None:
        difficulties = np.asarray(item_difficulties, dtype=float)
        n_items = len(difficulties)
        pid, iid, y = pack_records(data, n_participants, n_items)
        if init is not None and not init.calibrated_delta:
            raise ValueError("warm start for a calibrated fit requires a calibrated posterior")

        def grad_fn(v):
            g = -(v - prior.theta_mean) / prior.theta_sd**2
            if len(y):
                x = v[:, pid] - difficulties[iid][None, :]
                resid = y[None, :] - sigmoid(x)
                for s in range(v.shape[0]):
                    g[s] += np.bincount(pid, weights=resid[s], minlength=n_participants)
            return g

        c_theta, _ = _record_counts(pid, iid, n_participants, n_items)
        precond = _curvature_precond(1.0 / prior.theta_sd**2 + 0.25 * c_theta)
        init_mean = init.theta_mean if init is not None else np.full(n_participants, prior.theta_mean)
        init_sd = init.theta_sd if init is not None else np.full(n_participants, prior.theta_sd)
        mu, sd = fit_gaussian_mean_field(grad_fn, init_mean, init_sd, cfg, precond=precond)
        return MeanFieldPosterior(
            theta_mean=mu,
            theta_sd=sd,
            delta_mean=difficulties,
            delta_sd=np.zeros_like(difficulties),
            b_mean=prior.b_mean,
            b_sd=prior.b_sd,
            calibrated_delta=True,
        )

    if n_items is None:
        raise ValueError("n_items is required when difficulties are latent")
    pid, iid, y = pack_records(data, n_participants, n_items)
    if init is not None and init.calibrated_delta:
        raise ValueError("cannot warm-start a full fit from a calibrated posterior")

    def grad_fn(v):
        theta_b = v[:, :n_participants]
        delta_b = v[:, n_participants : n_participants + n_items]
        b_b = v[:, -1]
        g_theta, g_delta, g_b = batch_grad_log_joint(theta_b, delta_b, b_b, prior, pid, iid, y)
        return np.concatenate([g_theta, g_delta, g_b[:, None]], axis=1)

    c_theta, c_delta = _record_counts(pid, iid, n_participants, n_items)
    precond = _curvature_precond(
        np.concatenate(
            [
                1.0 / prior.theta_sd**2 + 0.25 * c_theta,
                1.0 / prior.delta_sd**2 + 0.25 * c_delta,
                [1.0 / prior.b_sd**2 + n_items / prior.delta_sd**2],
            ]
        )
    )
    if init is None:
        init = MeanFieldPosterior.from_prior(prior, n_participants, n_items)
    init_mean = np.concatenate([init.theta_mean, init.delta_mean, [init.b_mean]])
    init_sd = np.concatenate([init.theta_sd, init.delta_sd, [init.b_sd]])
    mu, sd = fit_gaussian_mean_field(grad_fn, init_mean, init_sd, cfg, precond=precond)
    return MeanFieldPosterior(
        theta_mean=mu[:n_participants],
        theta_sd=sd[:n_participants],
        delta_mean=mu[n_participants : n_participants + n_items],
        delta_sd=sd[n_participants : n_participants + n_items],
        b_mean=float(mu[-1]),
        b_sd=float(sd[-1]),
    )


def variational_free_energy(
    posterior: MeanFieldPosterior, prior: PriorSpec, data, s: int, rng
) -> float:
    """Monte Carlo free-energy estimate for the logistic model under q = posterior."""
    n_p, n_i = posterior.n_participants, posterior.n_items
    pid, iid, y = pack_records(data, n_p, n_i)
    if posterior.calibrated_delta:
        difficulties = posterior.delta_mean

        def log_density(v):
            lp = normal_logpdf(v, prior.theta_mean, prior.theta_sd).sum(axis=1)
            if len(y):
                x = v[:, pid] - difficulties[iid][None, :]
                lp = lp + (y[None, :] * log_sigmoid(x) + (1.0 - y[None, :]) * log_sigmoid(-x)).sum(axis=1)
            return lp

        return gaussian_mean_field_free_energy(posterior.theta_mean, posterior.theta_sd, log_density, s, rng)

    def log_density(v):
        return batch_log_joint(
            v[:, :n_p], v[:, n_p : n_p + n_i], v[:, -1], prior, pid, iid, y
        )

    mean = np.concatenate([posterior.theta_mean, posterior.delta_mean, [posterior.b_mean]])
    sd = np.concatenate([posterior.theta_sd, posterior.delta_sd, [posterior.b_sd]])
    return gaussian_mean_field_free_energy(mean, sd, log_density, s, rng)


@dataclass(frozen=True)
class BetaPosterior:
    """Conjugate success-probability posterior; uniform prior is Beta(1, 1)."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("Beta parameters must be finite")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta parameters must be positive")


def beta_update(post: BetaPosterior, y: int) -> BetaPosterior:
    """Add one Bernoulli observation: (alpha + y, beta + 1 - y). Order-independent."""
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    return BetaPosterior(post.alpha + y, post.beta + (1 - y))


def beta_predictive(post: BetaPosterior) -> float:
    """Posterior-predictive success probability alpha / (alpha + beta)."""
    return post.alpha / (post.alpha + post.beta)


@dataclass
class GroupedTreatmentPosterior:
    """Complete grid of Beta posteriors over (treatment, group) cells."""

    table: dict = field(default_factory=dict)
    treatments: tuple = ()
    groups: tuple = (0, 1)

    @classmethod
    def uniform(cls, n_treatments: int, groups=(0, 1)) -> "GroupedTreatmentPosterior":
        treatments = tuple(range(n_treatments))
        table = {(j, z): BetaPosterior() for j in treatments for z in groups}
        return cls(table=table, treatments=treatments, groups=tuple(groups))

    def _check(self, treatment: int, group: int):
        if (treatment, group) not in self.table:
            raise KeyError(f"no posterior for treatment={treatment}, group={group}")

    def get(self, treatment: int, group: int) -> BetaPosterior:
        self._check(treatment, group)
        return self.table[(treatment, group)]

    def update(self, treatment: int, group: int, y: int) -> None:
        self._check(treatment, group)
        self.table[(treatment, group)] = beta_update(self.table[(treatment, group)], y)

    def predictive(self, treatment: int, group: int) -> float:
        return beta_predictive(self.get(treatment, group))

    def mixture_mean(self, treatment: int) -> float:
        """Posterior-mean reward of a treatment under equal group weights."""
        return float(np.mean([beta_predictive(self.get(treatment, z)) for z in self.groups]))

    def observation_count(self) -> float:
        return sum(p.alpha + p.beta - 2.0 for p in self.table.values())

    def to_json(self) -> str:
        rows = [
            {"treatment": j, "group": z, "alpha": p.alpha, "beta": p.beta}
            for (j, z), p in sorted(self.table.items())
        ]
        return json.dumps(rows)

    @classmethod
    def from_json(cls, doc: str) -> "GroupedTreatmentPosterior":
        rows = json.loads(doc)
        table = {
            (int(r["treatment"]), int(r["group"])): BetaPosterior(float(r["alpha"]), float(r["beta"]))
            for r in rows
        }
        treatments = tuple(sorted({j for j, _ in table}))
        groups = tuple(sorted({z for _, z in table}))
        for j in treatments:
            for z in groups:
                if (j, z) not in table:
                    raise ValueError("grouped posterior grid is incomplete")
        return cls(table=table, treatments=treatments, groups=groups)
