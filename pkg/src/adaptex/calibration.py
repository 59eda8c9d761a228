"""Reliability binning of predicted success probabilities against outcomes.

A live misspecification diagnostic: if the engine's predicted q(y=1) values
are calibrated, each bin's empirical success rate should straddle the
diagonal within its 95% credible interval.
"""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

BISECTION_TOL = 1e-8
DEFAULT_BINS = 10


@dataclass(frozen=True)
class ReliabilityBin:
    bin_lo: float
    bin_hi: float
    n: int
    mean_prediction: float
    empirical_rate: float
    credible_lo: float
    credible_hi: float


def beta_ppf(q: float, alpha: float, beta: float) -> float:
    """Inverse CDF of Beta(alpha, beta) by bisection on the regularized
    incomplete beta function, to within 1e-8."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be inside (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if betainc(alpha, beta, mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def beta_credible_interval(successes: int, failures: int, level: float = 0.95):
    """Equal-tailed interval for E[y] under the uniform-prior Beta posterior."""
    alpha = 1.0 + successes
    beta = 1.0 + failures
    tail = 0.5 * (1.0 - level)
    return beta_ppf(tail, alpha, beta), beta_ppf(1.0 - tail, alpha, beta)


def reliability_bins(predictions, n_bins: int = DEFAULT_BINS) -> list[ReliabilityBin]:
    """Equal-width reliability bins over [0, 1] for (q(y=1), y) pairs.

    Each occupied bin reports its mean prediction, empirical success rate, and
    a 95% Beta(1+s, 1+f) credible interval; empty bins are emitted with n=0
    and the full-width interval.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    pairs = [(float(q), int(y)) for q, y in predictions]
    for q, y in pairs:
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"prediction {q} outside [0, 1]")
        if y not in (0, 1):
            raise ValueError("observed outcomes must be 0 or 1")

    totals = np.zeros(n_bins, dtype=int)
    successes = np.zeros(n_bins, dtype=int)
    pred_sums = np.zeros(n_bins, dtype=float)
    for q, y in pairs:
        idx = min(int(q * n_bins), n_bins - 1)
        totals[idx] += 1
        successes[idx] += y
        pred_sums[idx] += q

    bins = []
    for idx in range(n_bins):
        lo, hi = idx / n_bins, (idx + 1) / n_bins
        n = int(totals[idx])
        if n == 0:
            bins.append(
                ReliabilityBin(
                    bin_lo=lo,
                    bin_hi=hi,
                    n=0,
                    mean_prediction=math.nan,
                    empirical_rate=math.nan,
                    credible_lo=0.0,
                    credible_hi=1.0,
                )
            )
            continue
        s = int(successes[idx])
        ci_lo, ci_hi = beta_credible_interval(s, n - s)
        rate = s / n
        bins.append(
            ReliabilityBin(
                bin_lo=lo,
                bin_hi=hi,
                n=n,
                mean_prediction=pred_sums[idx] / n,
                empirical_rate=rate,
                credible_lo=min(ci_lo, rate),
                credible_hi=max(ci_hi, rate),
            )
        )
    return bins


def reliability_csv(bins) -> str:
    """CSV rows (bin_lo, bin_hi, n, mean_prediction, empirical_rate, lo, hi)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin_lo", "bin_hi", "n", "mean_prediction", "empirical_rate", "lo", "hi"])
    for b in bins:
        writer.writerow(
            [
                f"{b.bin_lo:.6g}",
                f"{b.bin_hi:.6g}",
                b.n,
                "" if math.isnan(b.mean_prediction) else f"{b.mean_prediction:.6g}",
                "" if math.isnan(b.empirical_rate) else f"{b.empirical_rate:.6g}",
                f"{b.credible_lo:.6g}",
                f"{b.credible_hi:.6g}",
            ]
        )
    return buf.getvalue()
