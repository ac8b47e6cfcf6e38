"""Small statistical containers shared by the estimators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with standard error and a confidence interval.

    ``log_value`` is carried separately because importance-sampling means can
    sit far below the smallest positive double.
    """

    value: float
    stderr: float
    ci_low: float
    ci_high: float
    reps: int
    hits: int
    log_value: float = float("nan")

    @property
    def zero_hits(self) -> bool:
        return self.hits == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_hits"] = self.zero_hits
        return d


def wilson_interval(hits: int, reps: int, confidence: float = 0.95) -> tuple[float, float]:
    if reps <= 0:
        raise ValueError("reps must be positive")
    z = norm.ppf(0.5 + confidence / 2.0)
    p = hits / reps
    denom = 1.0 + z * z / reps
    centre = (p + z * z / (2 * reps)) / denom
    half = z * math.sqrt(p * (1 - p) / reps + z * z / (4 * reps * reps)) / denom
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == reps else min(1.0, centre + half)
    return lo, hi


def proportion(hits: int, reps: int, confidence: float = 0.95) -> Estimate:
    p = hits / reps
    lo, hi = wilson_interval(hits, reps, confidence)
    se = math.sqrt(p * (1 - p) / reps)
    return Estimate(p, se, lo, hi, reps, hits, math.log(p) if hits else -math.inf)


def mean_estimate(values: np.ndarray, confidence: float = 0.95) -> Estimate:
    values = np.asarray(values, dtype=float)
    r = values.size
    m = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(r)) if r > 1 else float("nan")
    z = norm.ppf(0.5 + confidence / 2.0)
    hits = int(np.count_nonzero(values))
    log_m = math.log(m) if m > 0 else (-math.inf if m == 0 else float("nan"))
    return Estimate(m, se, m - z * se, m + z * se, r, hits, log_m)


def log_mean_estimate(log_terms: np.ndarray, confidence: float = 0.95) -> Estimate:
    """Mean of ``exp(log_terms)`` computed in log space.

    Entries equal to ``-inf`` are exact zeros. ``value``/``stderr`` are the
    plain-scale numbers (may underflow to 0); ``log_value`` never does.
    """
    log_terms = np.asarray(log_terms, dtype=float)
    r = log_terms.size
    hits = int(np.count_nonzero(np.isfinite(log_terms)))
    z = norm.ppf(0.5 + confidence / 2.0)
    if hits == 0:
        return Estimate(0.0, 0.0, 0.0, 0.0, r, 0, -math.inf)
    top = float(np.max(log_terms))
    scaled = np.exp(log_terms - top)
    m_scaled = scaled.mean()
    se_scaled = scaled.std(ddof=1) / math.sqrt(r) if r > 1 else float("nan")
    log_m = float(logsumexp(log_terms) - math.log(r))
    scale = math.exp(top) if top < 700 else math.inf
    m = m_scaled * scale
    se = se_scaled * scale
    return Estimate(m, se, m - z * se, m + z * se, r, hits, log_m)
