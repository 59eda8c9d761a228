"""One-parameter logistic response model: priors, joint log-density, item bank.

The generative model used throughout the adaptive-testing engine is

    p(y_ij = 1 | theta_i, delta_j) = sigmoid(theta_i - delta_j)

with Gaussian priors theta_i ~ N(theta_mean, theta_sd), b ~ N(b_mean, b_sd)
and item difficulties centered on the shared intercept, delta_j ~ N(b, delta_sd).
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def sigmoid(x):
    """Numerically stable logistic function, elementwise; scalar in, scalar out."""
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow, via log1p(exp(-x))."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def irt_success_prob(theta_i, delta_j):
    """Success probability of the logistic response model.

    Monotone increasing in ability, decreasing in difficulty, and
    antisymmetric: irt_success_prob(a, b) + irt_success_prob(b, a) == 1.
    """
    if not (np.all(np.isfinite(theta_i)) and np.all(np.isfinite(delta_j))):
        raise ValueError("ability and difficulty must be finite")
    return sigmoid(np.asarray(theta_i, dtype=float) - np.asarray(delta_j, dtype=float))


def normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the latent priors. Second arguments are standard deviations."""

    theta_mean: float = 0.0
    theta_sd: float = 2.0
    delta_sd: float = 1.0
    b_mean: float = 0.0
    b_sd: float = 1.0

    def __post_init__(self):
        for name in ("theta_sd", "delta_sd", "b_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ResponseRecord:
    """One graded trial: participant, item, binary outcome, optional metadata."""

    participant_id: int
    item_id: int
    y: int
    z: int | None = None
    duration_s: float | None = None
    timestamp: int = 0

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError("y must be 0 or 1")
        if self.z is not None and self.z not in (0, 1):
            raise ValueError("z must be 0 or 1 when present")
        if self.duration_s is not None and not self.duration_s > 0:
            raise ValueError("duration_s must be positive when present")


@dataclass
class LatentState:
    """A complete assignment of abilities, difficulties, and the intercept."""

    theta: np.ndarray
    delta: np.ndarray
    b: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.b = float(self.b)
        if not (
            np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.delta))
            and math.isfinite(self.b)
        ):
            raise ValueError("latent values must be finite")


def pack_records(data, n_participants: int, n_items: int):
    """Index arrays (pid, iid, y) for a record list, with bounds validation."""
    pid = np.fromiter((r.participant_id for r in data), dtype=int, count=len(data))
    iid = np.fromiter((r.item_id for r in data), dtype=int, count=len(data))
    y = np.fromiter((r.y for r in data), dtype=float, count=len(data))
    if len(data):
        if pid.min() < 0 or pid.max() >= n_participants:
            raise ValueError("record references an unknown participant index")
        if iid.min() < 0 or iid.max() >= n_items:
            raise ValueError("record references an unknown item index")
    return pid, iid, y


def log_joint(state: LatentState, prior: PriorSpec, data) -> float:
    """Joint log-density log p(y, theta, delta, b): Gaussian priors plus Bernoulli terms."""
    pid, iid, y = pack_records(data, len(state.theta), len(state.delta))
    lp = float(normal_logpdf(state.b, prior.b_mean, prior.b_sd))
    lp += float(np.sum(normal_logpdf(state.delta, state.b, prior.delta_sd)))
    lp += float(np.sum(normal_logpdf(state.theta, prior.theta_mean, prior.theta_sd)))
    if len(y):
        x = state.theta[pid] - state.delta[iid]
        lp += float(np.sum(y * log_sigmoid(x) + (1.0 - y) * log_sigmoid(-x)))
    return lp


def batch_log_joint(theta_b, delta_b, b_b, prior: PriorSpec, pid, iid, y):
    """log p(y, v) for a batch of latent draws; shapes (S, n_p), (S, n_i), (S,)."""
    lp = normal_logpdf(b_b, prior.b_mean, prior.b_sd)
    lp = lp + normal_logpdf(delta_b, b_b[:, None], prior.delta_sd).sum(axis=1)
    lp = lp + normal_logpdf(theta_b, prior.theta_mean, prior.theta_sd).sum(axis=1)
    if len(y):
        x = theta_b[:, pid] - delta_b[:, iid]
        lp = lp + (y[None, :] * log_sigmoid(x) + (1.0 - y[None, :]) * log_sigmoid(-x)).sum(axis=1)
    return lp


def batch_grad_log_joint(theta_b, delta_b, b_b, prior: PriorSpec, pid, iid, y):
    """Analytic gradients of batch_log_joint with respect to theta, delta, b.

    The Bernoulli term contributes (y - p) to d/dtheta and -(y - p) to d/ddelta.
    """
    S, n_p = theta_b.shape
    n_i = delta_b.shape[1]
    g_theta = -(theta_b - prior.theta_mean) / prior.theta_sd**2
    g_delta = -(delta_b - b_b[:, None]) / prior.delta_sd**2
    g_b = -(b_b - prior.b_mean) / prior.b_sd**2 + (delta_b - b_b[:, None]).sum(axis=1) / prior.delta_sd**2
    if len(y):
        x = theta_b[:, pid] - delta_b[:, iid]
        resid = y[None, :] - sigmoid(x)
        for s in range(S):
            g_theta[s] += np.bincount(pid, weights=resid[s], minlength=n_p)
            g_delta[s] -= np.bincount(iid, weights=resid[s], minlength=n_i)
    return g_theta, g_delta, g_b


def grad_log_joint(state: LatentState, prior: PriorSpec, data):
    """Gradient of log_joint at a single latent state: (d_theta, d_delta, d_b)."""
    pid, iid, y = pack_records(data, len(state.theta), len(state.delta))
    g_theta, g_delta, g_b = batch_grad_log_joint(
        state.theta[None, :], state.delta[None, :], np.array([state.b]), prior, pid, iid, y
    )
    return g_theta[0], g_delta[0], float(g_b[0])


def sample_prior(prior: PriorSpec, n_participants: int, n_items: int, rng) -> LatentState:
    """Draw a latent state from the prior. Draw order is b, delta, theta."""
    if n_participants < 1 or n_items < 1:
        raise ValueError("counts must be at least 1")
    b = float(rng.normal(prior.b_mean, prior.b_sd))
    delta = rng.normal(b, prior.delta_sd, size=n_items)
    theta = rng.normal(prior.theta_mean, prior.theta_sd, size=n_participants)
    return LatentState(theta=theta, delta=delta, b=b)


_WHITESPACE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return _WHITESPACE.sub(" ", text.strip().lower())


@dataclass(frozen=True)
class Item:
    item_id: int
    prompt: str
    accepted_answers: tuple[str, ...]


@dataclass(frozen=True)
class ItemBank:
    """Ordered bank of prompts with normalized accepted answers."""

    items: tuple[Item, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if ids != list(range(len(ids))):
            raise ValueError("item_ids must be unique and contiguous from 0")
        for it in self.items:
            if not it.prompt:
                raise ValueError(f"item {it.item_id} has an empty prompt")
            if not it.accepted_answers:
                raise ValueError(f"item {it.item_id} has no accepted answers")

    def __len__(self) -> int:
        return len(self.items)

    def prompt(self, item_id: int) -> str:
        return self.items[item_id].prompt

    def grade(self, item_id: int, raw_answer: str) -> int:
        """1 if the normalized answer matches any accepted answer, else 0."""
        if not 0 <= item_id < len(self.items):
            raise ValueError(f"unknown item_id {item_id}")
        return int(normalize_answer(raw_answer) in self.items[item_id].accepted_answers)

    @classmethod
    def from_rows(cls, rows) -> "ItemBank":
        items = []
        for row in rows:
            answers = tuple(
                normalize_answer(a) for a in str(row["accepted_answers"]).split("|") if a.strip()
            )
            items.append(
                Item(item_id=int(row["item_id"]), prompt=str(row["prompt"]), accepted_answers=answers)
            )
        items.sort(key=lambda it: it.item_id)
        return cls(items=tuple(items))

    @classmethod
    def from_csv(cls, path) -> "ItemBank":
        """Load from CSV with header item_id,prompt,accepted_answers (pipe-separated)."""
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"item_id", "prompt", "accepted_answers"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"item bank CSV missing columns: {sorted(missing)}")
            return cls.from_rows(reader)

    @classmethod
    def bundled_sample(cls) -> "ItemBank":
        """The sample bank shipped with the package (15 general-knowledge items)."""
        ref = resources.files("adaptex").joinpath("data/sample_items.csv")
        with resources.as_file(ref) as path:
            return cls.from_csv(path)
