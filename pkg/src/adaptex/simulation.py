"""Oracle-replay and synthetic simulation harness.

Adaptive-testing runs replay a complete response grid (the oracle), scoring
remaining items by joint information gain and stopping per the configured
rule; bandit runs benchmark treatment-assignment policies on Bernoulli arms
with Beta(2, 2) rewards in two setups (A: one parameter per arm; B: one per
arm and participant group). A constructed variant estimates the time saved by
penalizing slow items.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .inference import (
    BetaPosterior,
    GroupedTreatmentPosterior,
    MeanFieldPosterior,
    ViConfig,
    fit_gaussian_mean_field,
    fit_mean_field,
)
from .model import LatentState, PriorSpec, ResponseRecord, irt_success_prob, sample_prior
from .objectives import (
    ClampDiagnostics,
    DesignScore,
    DurationModel,
    SampleBudget,
    beta_eig_batch,
    score_testing_candidates,
    utility_slow_penalty,
)
from .policies import (
    PolicyDecision,
    StoppingConfig,
    exploration_sampling_weights,
    sample_arm,
    select_greedy_eig,
    select_min_efe,
    select_uniform_fixed,
    thompson_probabilities,
)


def _spawn_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class OracleDataset:
    """Complete response grid over participants x items for counterfactual replay."""

    y: np.ndarray
    z: np.ndarray | None = None
    durations: np.ndarray | None = None
    truth: LatentState | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        if self.y.ndim != 2:
            raise ValueError("the response grid must be 2-D (participants x items)")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("oracle outcomes must be binary")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=int)
            if self.z.shape != (self.n_participants,):
                raise ValueError("z must hold one group label per participant")
            if not np.isin(self.z, (0, 1)).all():
                raise ValueError("group labels must be binary")
        if self.durations is not None:
            self.durations = np.asarray(self.durations, dtype=float)
            if self.durations.shape != self.y.shape:
                raise ValueError("durations must cover the full grid")
            if not np.all(self.durations > 0):
                raise ValueError("durations must be positive")

    @property
    def n_participants(self) -> int:
        return self.y.shape[0]

    @property
    def n_items(self) -> int:
        return self.y.shape[1]

    def record(self, participant_id: int, item_id: int, timestamp: int = 0) -> ResponseRecord:
        return ResponseRecord(
            participant_id=participant_id,
            item_id=item_id,
            y=int(self.y[participant_id, item_id]),
            z=None if self.z is None else int(self.z[participant_id]),
            duration_s=None if self.durations is None else float(self.durations[participant_id, item_id]),
            timestamp=timestamp,
        )

    def to_jsonl(self, path) -> None:
        """One record per line: {participant_id, item_id, y, z?, duration_s?}."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for i in range(self.n_participants):
                for j in range(self.n_items):
                    row = {"participant_id": i, "item_id": j, "y": int(self.y[i, j])}
                    if self.z is not None:
                        row["z"] = int(self.z[i])
                    if self.durations is not None:
                        row["duration_s"] = float(self.durations[i, j])
                    fh.write(json.dumps(row) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "OracleDataset":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        if not rows:
            raise ValueError("oracle file is empty")
        n_p = max(r["participant_id"] for r in rows) + 1
        n_i = max(r["item_id"] for r in rows) + 1
        y = np.full((n_p, n_i), -1, dtype=int)
        z = np.full(n_p, -1, dtype=int) if any("z" in r for r in rows) else None
        durations = np.zeros((n_p, n_i)) if any("duration_s" in r for r in rows) else None
        for r in rows:
            i, j = int(r["participant_id"]), int(r["item_id"])
            if y[i, j] != -1:
                raise ValueError(f"duplicate oracle record for participant {i}, item {j}")
            y[i, j] = int(r["y"])
            if z is not None:
                if "z" not in r:
                    raise ValueError("group labels must cover every record or none")
                if z[i] != -1 and z[i] != int(r["z"]):
                    raise ValueError(f"inconsistent group label for participant {i}")
                z[i] = int(r["z"])
            if durations is not None:
                if "duration_s" not in r:
                    raise ValueError("durations must cover every record or none")
                durations[i, j] = float(r["duration_s"])
        if (y == -1).any():
            raise ValueError("oracle grid is incomplete")
        return cls(y=y, z=z, durations=durations)


def generate_synthetic_oracle(
    prior: PriorSpec,
    n_participants: int,
    n_items: int,
    seed: int,
    *,
    with_groups: bool = False,
    with_durations: bool = False,
    duration_log_mean: float = 2.0,
    duration_log_sd: float = 0.5,
) -> OracleDataset:
    """Sample ground truth from the prior and fill the full Bernoulli grid.

    The generating latent state is embedded as truth. Groups are fair-coin
    labels; durations are iid log-normal.
    """
    if n_participants < 1 or n_items < 1:
        raise ValueError("counts must be at least 1")
    rng = np.random.default_rng(seed)
    truth = sample_prior(prior, n_participants, n_items, rng)
    p = irt_success_prob(truth.theta[:, None], truth.delta[None, :])
    y = (rng.random((n_participants, n_items)) < p).astype(int)
    z = rng.integers(0, 2, size=n_participants) if with_groups else None
    durations = None
    if with_durations:
        durations = np.exp(rng.normal(duration_log_mean, duration_log_sd, size=(n_participants, n_items)))
    return OracleDataset(y=y, z=z, durations=durations, truth=truth)


@dataclass
class SimReport:
    """Everything an adaptive-testing replay produced."""

    trials_per_participant: np.ndarray
    item_frequencies: np.ndarray
    posterior: MeanFieldPosterior
    theta_at_finish: np.ndarray
    theta_sd_at_finish: np.ndarray
    per_participant_ig: np.ndarray
    mean_information_gain: float
    negative_ig_participants: list[int]
    decisions: list[dict]
    clamp_count: int
    prior: PriorSpec

    def to_json(self) -> str:
        return json.dumps(
            {
                "trials_per_participant": self.trials_per_participant.tolist(),
                "item_frequencies": self.item_frequencies.tolist(),
                "mean_trials": float(self.trials_per_participant.mean()),
                "mean_information_gain": self.mean_information_gain,
                "per_participant_ig": self.per_participant_ig.tolist(),
                "negative_ig_participants": self.negative_ig_participants,
                "theta_mean": self.posterior.theta_mean.tolist(),
                "theta_sd": self.posterior.theta_sd.tolist(),
                "delta_mean": self.posterior.delta_mean.tolist(),
                "delta_sd": self.posterior.delta_sd.tolist(),
                "clamp_count": self.clamp_count,
                "decisions": self.decisions,
            }
        )


def information_gain(prior_sd: float, posterior_sd: float) -> float:
    """Entropy reduction between Gaussian marginals: ln(prior_sd / posterior_sd).

    Negative values (posterior wider than prior) are allowed and flagged in
    reports.
    """
    if prior_sd <= 0 or posterior_sd <= 0:
        raise ValueError("sds must be positive")
    return math.log(prior_sd / posterior_sd)


def run_adaptive_testing_sim(
    oracle: OracleDataset,
    stop: StoppingConfig,
    budget: SampleBudget,
    cfg: ViConfig,
    *,
    prior: PriorSpec | None = None,
    max_trials: int | None = None,
    keep_scores: bool = False,
) -> SimReport:
    """Replay the adaptive-testing loop against a complete oracle.

    Participants arrive in index order; each step scores the participant's
    remaining items by joint (ability, difficulty) information gain, applies
    the greedy rule with stopping, looks up the oracle answer, and refits the
    posterior with a warm start. All randomness derives from cfg.seed.
    """
    prior = prior or PriorSpec()
    n_p, n_i = oracle.n_participants, oracle.n_items
    posterior = MeanFieldPosterior.from_prior(prior, n_p, n_i)
    records: list[ResponseRecord] = []
    diagnostics = ClampDiagnostics()
    trials = np.zeros(n_p, dtype=int)
    freq = np.zeros(n_i, dtype=int)
    theta_at_finish = np.zeros(n_p)
    theta_sd_at_finish = np.zeros(n_p)
    decisions: list[dict] = []
    seed_root = np.random.SeedSequence(cfg.seed)
    step_counter = 0

    for pid in range(n_p):
        remaining = list(range(n_i))
        while True:
            if not remaining or (max_trials is not None and trials[pid] >= max_trials):
                break
            score_rng, fit_seed = _step_seeds(seed_root, step_counter)
            scores = score_testing_candidates(posterior, pid, remaining, budget, score_rng, diagnostics)
            decision = select_greedy_eig(scores, stop, int(trials[pid]))
            decisions.append(_decision_row(pid, step_counter, decision, keep_scores))
            if decision.stopped:
                break
            chosen = decision.chosen
            records.append(oracle.record(pid, chosen, timestamp=step_counter))
            remaining.remove(chosen)
            trials[pid] += 1
            freq[chosen] += 1
            posterior = fit_mean_field(
                prior,
                records,
                replace(cfg, seed=fit_seed),
                n_participants=n_p,
                n_items=n_i,
                init=posterior,
            )
            step_counter += 1
        theta_at_finish[pid] = posterior.theta_mean[pid]
        theta_sd_at_finish[pid] = posterior.theta_sd[pid]

    ig = np.log(prior.theta_sd / posterior.theta_sd)
    negative = [int(i) for i in np.nonzero(ig < 0)[0]]
    return SimReport(
        trials_per_participant=trials,
        item_frequencies=freq,
        posterior=posterior,
        theta_at_finish=theta_at_finish,
        theta_sd_at_finish=theta_sd_at_finish,
        per_participant_ig=ig,
        mean_information_gain=float(ig.mean()),
        negative_ig_participants=negative,
        decisions=decisions,
        clamp_count=diagnostics.floor_hits,
        prior=prior,
    )


def _step_seeds(seed_root: np.random.SeedSequence, step: int):
    children = np.random.SeedSequence(entropy=seed_root.entropy, spawn_key=(step,)).spawn(2)
    return np.random.default_rng(children[0]), int(children[1].generate_state(1)[0])


def _decision_row(pid: int, step: int, decision: PolicyDecision, keep_scores: bool) -> dict:
    chosen_score = None
    if decision.chosen is not None:
        chosen_score = next(s for s in decision.scores if s.design_id == decision.chosen)
    row = {
        "participant": pid,
        "step": step,
        "chosen": decision.chosen,
        "max_eig": max((s.eig for s in decision.scores), default=None),
        "eig": None if chosen_score is None else chosen_score.eig,
        "utility": None if chosen_score is None else chosen_score.utility,
        "efe": None if chosen_score is None else chosen_score.efe,
    }
    if keep_scores:
        row["scores"] = [s.as_dict() for s in decision.scores]
    return row


@dataclass(frozen=True)
class BanditPolicy:
    """Treatment-assignment policy: uniform, thompson, exploration,
    active-inference, or oracle-best (a debugging reference)."""

    name: str
    gamma: float = 0.1
    mc_samples: int = 256

    def __post_init__(self):
        known = {"uniform", "thompson", "exploration", "active-inference", "oracle-best"}
        if self.name not in known:
            raise ValueError(f"unknown policy {self.name!r}; expected one of {sorted(known)}")


@dataclass
class BanditEnv:
    """Bernoulli bandit: per-arm rewards (setup A) or per-(arm, group) (setup B)."""

    setup: str
    true_rewards: np.ndarray

    def __post_init__(self):
        if self.setup not in ("A", "B"):
            raise ValueError("setup must be 'A' or 'B'")
        self.true_rewards = np.asarray(self.true_rewards, dtype=float)
        expected_ndim = 1 if self.setup == "A" else 2
        if self.true_rewards.ndim != expected_ndim:
            raise ValueError(f"setup {self.setup} expects {expected_ndim}-D rewards")
        if self.true_rewards.min() < 0 or self.true_rewards.max() > 1:
            raise ValueError("rewards must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.true_rewards.shape[0]

    @property
    def arm_means(self) -> np.ndarray:
        """Unconditional expected reward per arm (group mixture in setup B)."""
        if self.setup == "A":
            return self.true_rewards
        return self.true_rewards.mean(axis=1)

    def draw(self, arm: int, group: int, rng) -> int:
        p = self.true_rewards[arm] if self.setup == "A" else self.true_rewards[arm, group]
        return int(rng.random() < p)

    @classmethod
    def sample(cls, setup: str, k: int, rng) -> "BanditEnv":
        """Fresh environment with Beta(2, 2) reward draws."""
        shape = (k,) if setup == "A" else (k, 2)
        return cls(setup=setup, true_rewards=rng.beta(2.0, 2.0, size=shape))


@dataclass
class BanditReport:
    """Trajectory of one bandit run, sufficient for all four benchmark metrics."""

    setup: str
    arms: np.ndarray
    outcomes: np.ndarray
    groups: np.ndarray | None
    mean_trajectory: np.ndarray
    final_alpha: np.ndarray
    final_beta: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.arms)

    def final_arm_means(self) -> np.ndarray:
        means = self.final_alpha / (self.final_alpha + self.final_beta)
        return means if means.ndim == 1 else means.mean(axis=1)

    def estimated_best_arm(self) -> int:
        return int(np.argmax(self.final_arm_means()))


def run_treatment_sim(env: BanditEnv, policy: BanditPolicy, horizon: int, seed: int) -> BanditReport:
    """Run one treatment-assignment episode under the given policy.

    Participant groups alternate 0, 1 deterministically in setup B. Rows of
    the posterior-mean trajectory are taken before each step's update.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng_env, rng_policy = _spawn_rngs(seed, 2)
    k = env.k
    grouped = env.setup == "B"
    shape = (k,) if not grouped else (k, 2)
    alpha = np.ones(shape)
    beta = np.ones(shape)
    counts = np.zeros(k, dtype=int)
    arms = np.zeros(horizon, dtype=int)
    outcomes = np.zeros(horizon, dtype=int)
    groups = np.zeros(horizon, dtype=int) if grouped else None
    trajectory = np.zeros((horizon, k))

    for t in range(horizon):
        z = (t % 2) if grouped else 0
        means = alpha / (alpha + beta)
        arm_means = means if not grouped else means.mean(axis=1)
        trajectory[t] = arm_means
        if policy.name == "uniform":
            arm = select_uniform_fixed(counts)
        elif policy.name == "oracle-best":
            arm = int(np.argmax(env.arm_means))
        elif policy.name in ("thompson", "exploration"):
            posts = _posterior_cells(alpha, beta)
            p = thompson_probabilities(posts, policy.mc_samples, rng_policy)
            weights = p if policy.name == "thompson" else exploration_sampling_weights(p)
            arm = sample_arm(weights, rng_policy)
        else:  # active-inference
            # information gain is contextual (the current group's cell); the
            # outcome preference targets the arm's overall success rate, the
            # same group mixture that defines the best treatment
            a_z = alpha[:, z] if grouped else alpha
            b_z = beta[:, z] if grouped else beta
            eigs = beta_eig_batch(a_z, b_z, policy.mc_samples, rng_policy)
            utils = policy.gamma * (2.0 * arm_means - 1.0)
            scores = [DesignScore.from_parts(j, float(eigs[j]), float(utils[j])) for j in range(k)]
            arm = select_min_efe(scores).chosen
        y = env.draw(arm, z, rng_env)
        if grouped:
            alpha[arm, z] += y
            beta[arm, z] += 1 - y
        else:
            alpha[arm] += y
            beta[arm] += 1 - y
        counts[arm] += 1
        arms[t] = arm
        outcomes[t] = y
        if grouped:
            groups[t] = z

    return BanditReport(
        setup=env.setup,
        arms=arms,
        outcomes=outcomes,
        groups=groups,
        mean_trajectory=trajectory,
        final_alpha=alpha,
        final_beta=beta,
    )


def _posterior_cells(alpha, beta):
    if alpha.ndim == 1:
        return [BetaPosterior(float(a), float(b)) for a, b in zip(alpha, beta)]
    gp = GroupedTreatmentPosterior.uniform(alpha.shape[0])
    for j in range(alpha.shape[0]):
        for z in (0, 1):
            gp.table[(j, z)] = BetaPosterior(float(alpha[j, z]), float(beta[j, z]))
    return gp


def best_arm_identification(report: BanditReport, env: BanditEnv) -> int:
    """1 iff the final estimated-best arm is the true best arm (lowest-index ties)."""
    return int(report.estimated_best_arm() == int(np.argmax(env.arm_means)))


def policy_regret(report: BanditReport, env: BanditEnv) -> float:
    """True-reward gap between the best arm and the finally estimated best arm."""
    means = env.arm_means
    return float(means.max() - means[report.estimated_best_arm()])


def average_regret(report: BanditReport, env: BanditEnv) -> float:
    """Per-step shortfall versus always playing the best arm, in true rewards."""
    means = env.arm_means
    return float(means.max() - means[report.arms].mean())


def exploitation_probability(report: BanditReport) -> float:
    """Fraction of steps that played an arm of maximal posterior-mean reward."""
    row_max = report.mean_trajectory.max(axis=1)
    played = report.mean_trajectory[np.arange(report.horizon), report.arms]
    return float(np.mean(played >= row_max))


@dataclass
class TimeSavedResult:
    """Per-step duration differences between the pure-EIG pick and the
    slowness-penalized pick, with the mean and its 95% interval."""

    diffs: np.ndarray
    mean: float
    ci_lo: float
    ci_hi: float

    @classmethod
    def from_diffs(cls, diffs) -> "TimeSavedResult":
        diffs = np.asarray(diffs, dtype=float)
        if diffs.size == 0:
            return cls(diffs=diffs, mean=0.0, ci_lo=0.0, ci_hi=0.0)
        mean = float(diffs.mean())
        half = 1.96 * float(diffs.std(ddof=1)) / math.sqrt(diffs.size) if diffs.size > 1 else 0.0
        return cls(diffs=diffs, mean=mean, ci_lo=mean - half, ci_hi=mean + half)


def _refit_duration_item(log_durations, dm: DurationModel, item_id: int, seed: int) -> None:
    """Fit the Gaussian posteriors of one item's (mu, eta) by the shared VI core.

    Data curvature grows linearly with the observation count, so the mean
    updates are preconditioned by 1/(prior precision + 4n).
    """
    obs = np.asarray(log_durations, dtype=float)
    n = len(obs)
    prior_mu, prior_mu_sd = float(dm.mu_mean[item_id]), float(dm.mu_sd[item_id])
    prior_eta, prior_eta_sd = float(dm.eta_mean[item_id]), float(dm.eta_sd[item_id])

    def grad_fn(v):
        mu, eta = v[:, 0], v[:, 1]
        inv_var = np.exp(-2.0 * eta)
        centered = obs[None, :] - mu[:, None]
        g_mu = -(mu - prior_mu) / prior_mu_sd**2 + (centered * inv_var[:, None]).sum(axis=1)
        g_eta = -(eta - prior_eta) / prior_eta_sd**2 - n + (centered**2 * inv_var[:, None]).sum(axis=1)
        return np.column_stack([g_mu, g_eta])

    precond = 1.0 / np.maximum(
        1.0, np.array([1.0 / prior_mu_sd**2 + 4.0 * n, 1.0 / prior_eta_sd**2 + 4.0 * n])
    )
    cfg = ViConfig(step_count=300, learning_rate=0.05, mc_samples_per_step=8, seed=seed)
    init_mean = np.array([dm.mu_mean[item_id], dm.eta_mean[item_id]])
    init_sd = np.array([max(dm.mu_sd[item_id], 1e-6), max(dm.eta_sd[item_id], 1e-6)])
    mean, sd = fit_gaussian_mean_field(grad_fn, init_mean, init_sd, cfg, precond=precond)
    dm.mu_mean[item_id], dm.mu_sd[item_id] = mean[0], sd[0]
    dm.eta_mean[item_id], dm.eta_sd[item_id] = mean[1], sd[1]


def time_saved_estimate(
    oracle: OracleDataset,
    dm: DurationModel,
    stop: StoppingConfig,
    budget: SampleBudget,
    cfg: ViConfig,
    seed: int,
    *,
    prior: PriorSpec | None = None,
    max_trials: int | None = None,
) -> TimeSavedResult:
    """Per-trial time saved by folding the slowness penalty into selection.

    At each replay step the pure-EIG argmax and the penalty-aware EFE argmin
    are both computed; the difference of their oracle durations is recorded
    and the run advances with the penalty-aware choice. With gamma_slow = 0
    the two selections coincide and every difference is exactly zero.
    """
    if oracle.durations is None:
        raise ValueError("time-saved estimation needs an oracle with durations")
    if dm.n_items != oracle.n_items:
        raise ValueError("duration model must cover the oracle's items")
    prior = prior or PriorSpec()
    n_p, n_i = oracle.n_participants, oracle.n_items
    dm = DurationModel(
        mu_mean=dm.mu_mean.copy(),
        mu_sd=dm.mu_sd.copy(),
        eta_mean=dm.eta_mean.copy(),
        eta_sd=dm.eta_sd.copy(),
        sigma_tau=dm.sigma_tau,
        gamma_slow=dm.gamma_slow,
    )
    posterior = MeanFieldPosterior.from_prior(prior, n_p, n_i)
    records: list[ResponseRecord] = []
    log_durations: list[list[float]] = [[] for _ in range(n_i)]
    diffs: list[float] = []
    seed_root = np.random.SeedSequence(seed)
    step_counter = 0

    for pid in range(n_p):
        remaining = list(range(n_i))
        trials_done = 0
        while True:
            if not remaining or (max_trials is not None and trials_done >= max_trials):
                break
            score_rng, fit_seed = _step_seeds(seed_root, step_counter)
            eig_scores = score_testing_candidates(posterior, pid, remaining, budget, score_rng)
            eig_decision = select_greedy_eig(eig_scores, stop, trials_done)
            if eig_decision.stopped:
                break
            penalized = [
                DesignScore.from_parts(
                    s.design_id,
                    s.eig,
                    utility_slow_penalty(dm, s.design_id, budget.s_util, score_rng),
                )
                for s in eig_scores
            ]
            efe_choice = select_min_efe(penalized).chosen
            diffs.append(
                float(oracle.durations[pid, eig_decision.chosen] - oracle.durations[pid, efe_choice])
            )
            records.append(oracle.record(pid, efe_choice, timestamp=step_counter))
            remaining.remove(efe_choice)
            trials_done += 1
            log_durations[efe_choice].append(math.log(oracle.durations[pid, efe_choice]))
            _refit_duration_item(log_durations[efe_choice], dm, efe_choice, seed=fit_seed)
            posterior = fit_mean_field(
                prior,
                records,
                replace(cfg, seed=fit_seed),
                n_participants=n_p,
                n_items=n_i,
                init=posterior,
            )
            step_counter += 1

    return TimeSavedResult.from_diffs(diffs)
