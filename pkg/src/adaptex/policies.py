"""Selection policies: greedy information gain with stopping, free-energy
minimization, Thompson sampling, exploration sampling, and static baselines.

All tie-breaks are lowest-index so that runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import BetaPosterior, GroupedTreatmentPosterior
from .objectives import DesignScore, scores_to_json_rows

WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class StoppingConfig:
    """Stop once the best candidate's EIG falls below epsilon, after min_trials."""

    epsilon: float = 0.01
    min_trials: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.min_trials < 0:
            raise ValueError("min_trials must be nonnegative")


@dataclass
class PolicyDecision:
    """Outcome of one selection step; chosen is None when the policy stops."""

    chosen: int | None
    scores: list[DesignScore] = field(default_factory=list)
    sampling_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.sampling_weights is not None:
            w = np.asarray(self.sampling_weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
                raise ValueError("sampling weights must be a probability vector")
            self.sampling_weights = w
        if self.chosen is not None and self.scores:
            if self.chosen not in {s.design_id for s in self.scores}:
                raise ValueError("chosen design must be among the candidates")

    @property
    def stopped(self) -> bool:
        return self.chosen is None

    def as_dict(self, seed=None) -> dict:
        return {
            "candidates": [s.design_id for s in self.scores],
            "scores": scores_to_json_rows(self.scores),
            "chosen": self.chosen,
            "weights": None if self.sampling_weights is None else [float(w) for w in self.sampling_weights],
            "seed": seed,
        }


def _argbest(scores, key, better):
    best = scores[0]
    for s in scores[1:]:
        if better(key(s), key(best)):
            best = s
    return best


def select_greedy_eig(scores, stop: StoppingConfig, trials_done: int) -> PolicyDecision:
    """Highest-EIG candidate, stopping once max EIG < epsilon after min_trials."""
    scores = list(scores)
    if not scores:
        return PolicyDecision(chosen=None, scores=[])
    # ties keep the earliest (lowest design_id after the sort)
    scores.sort(key=lambda s: s.design_id)
    best = _argbest(scores, key=lambda s: s.eig, better=lambda a, b: a > b)
    if trials_done >= stop.min_trials and best.eig < stop.epsilon:
        return PolicyDecision(chosen=None, scores=scores)
    return PolicyDecision(chosen=best.design_id, scores=scores)


def select_min_efe(scores, allow_no_action: bool = False) -> PolicyDecision:
    """Lowest expected free energy; the no-action option has G = 0 when enabled.

    No-action wins ties against actions, so with a uniform per-test cost folded
    into the utilities this stops exactly when every action has positive G.
    """
    scores = list(scores)
    if not scores:
        return PolicyDecision(chosen=None, scores=[])
    scores.sort(key=lambda s: s.design_id)
    best = _argbest(scores, key=lambda s: s.efe, better=lambda a, b: a < b)
    if allow_no_action and best.efe >= 0.0:
        return PolicyDecision(chosen=None, scores=scores)
    return PolicyDecision(chosen=best.design_id, scores=scores)


def _posterior_arrays(posteriors):
    """Normalize per-arm posteriors to (alphas, betas) arrays.

    Accepts a sequence of BetaPosterior (one cell per arm) or a
    GroupedTreatmentPosterior, whose arms are scored by the mean of a draw
    from every group cell.
    """
    if isinstance(posteriors, GroupedTreatmentPosterior):
        alphas = np.array(
            [[posteriors.get(j, z).alpha for z in posteriors.groups] for j in posteriors.treatments]
        )
        betas = np.array(
            [[posteriors.get(j, z).beta for z in posteriors.groups] for j in posteriors.treatments]
        )
        return alphas, betas
    alphas = np.array([p.alpha for p in posteriors], dtype=float)
    betas = np.array([p.beta for p in posteriors], dtype=float)
    return alphas, betas


def thompson_probabilities(posteriors, s: int, rng) -> np.ndarray:
    """Monte Carlo estimate of P(arm j maximizes the expected reward).

    Each of the s joint draws samples every arm's parameters (both group
    parameters for grouped posteriors, compared through their mixture mean)
    and credits the argmax arm.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    alphas, betas = _posterior_arrays(posteriors)
    if alphas.shape[0] < 2:
        raise ValueError("need at least two arms")
    draws = rng.beta(alphas[None, ...], betas[None, ...], size=(s,) + alphas.shape)
    values = draws if draws.ndim == 2 else draws.mean(axis=-1)
    counts = np.bincount(values.argmax(axis=1), minlength=alphas.shape[0])
    return counts / float(s)


def exploration_sampling_weights(p) -> np.ndarray:
    """Reweight Thompson probabilities by p (1 - p), renormalized.

    Any two-arm input yields exactly (0.5, 0.5) because p(1-p) is symmetric
    under p <-> 1-p; the degenerate all-zero case falls back to a point mass
    on the argmax of p.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("p must be a probability vector")
    w = p * (1.0 - p)
    total = w.sum()
    if total <= 0.0:
        out = np.zeros_like(p)
        out[int(np.argmax(p))] = 1.0
        return out
    if len(p) == 2:
        return np.array([0.5, 0.5])
    return w / total


def sample_arm(weights, rng) -> int:
    """Inverse-CDF draw from a weight vector; deterministic under a fixed seed."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("weights must be a probability vector")
    cdf = np.cumsum(w)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(w) - 1)


def select_uniform_fixed(administration_counts) -> int:
    """Least-administered arm (lowest index on ties): the even-split baseline."""
    counts = np.asarray(administration_counts)
    if counts.size == 0:
        raise ValueError("counts must be non-empty")
    return int(np.argmin(counts))
