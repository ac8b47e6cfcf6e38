"""Corridor confinement of centred random walks.

For a walk ``S`` with step variance ``sigma2`` and a corridor ``(f, g)`` scaled
by ``a_n``, the log-probability of staying inside behaves like

    (a_n^2 / n) log P  ->  -H_1(f, g),   H_t(f, g) = (pi^2 sigma2 / 2) int_0^t ds / (g_s - f_s)^2.

This module evaluates ``H_t`` by quadrature, estimates confinement
probabilities by Monte Carlo, and computes them exactly for lattice walks by
forward dynamic programming.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from .profiles import BarrierProfile, outward
from .stats import Estimate, proportion


class NonIntegrableError(ValueError):
    """The corridor width vanishes on a set where 1/(g - f)^2 is not integrable."""


class EndpointSingularityWarning(UserWarning):
    """The corridor width vanishes at an end of the integration range."""


class WidthBudgetError(RuntimeError):
    """The DP state space exceeds its budget."""


class StepLaw:
    """Step distribution of a walk, optionally paired with a nonnegative mark.

    Build with :meth:`lattice`, :meth:`pm1`, :meth:`gaussian` or
    :meth:`from_spine`. Lattice laws (integer support) enable the exact DP.
    """

    def __init__(self, values=None, probs=None, joint: Callable | None = None,
                 mark: Callable | None = None, variance: float | None = None,
                 name: str = "step"):
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.probs = None if probs is None else np.asarray(probs, dtype=float)
        self._joint = joint
        self._mark = mark
        self.name = name
        if self.values is not None:
            if abs(self.probs.sum() - 1.0) > 1e-12:
                raise ValueError("step probabilities must sum to 1")
            self._cum = np.cumsum(self.probs)
            self._cum[-1] = 1.0
            mean = float(self.probs @ self.values)
            self.variance = float(self.probs @ (self.values - mean) ** 2)
            self.mean = mean
        else:
            self.variance = variance
            self.mean = 0.0

    @classmethod
    def lattice(cls, values: Sequence[int], probs: Sequence[float], mark=None) -> "StepLaw":
        v = np.asarray(values, dtype=float)
        if np.any(v != np.round(v)):
            raise ValueError("lattice steps must be integers")
        return cls(v, probs, mark=mark, name="lattice")

    @classmethod
    def pm1(cls, mark=None) -> "StepLaw":
        return cls.lattice([-1, 1], [0.5, 0.5], mark=mark)

    @classmethod
    def gaussian(cls, sigma: float = 1.0) -> "StepLaw":
        return cls(joint=lambda rng, shape: (sigma * rng.standard_normal(shape),
                                             np.zeros(shape)),
                   variance=sigma * sigma, name="gaussian")

    @classmethod
    def from_spine(cls, sl) -> "StepLaw":
        """Spine step with its sibling weight xi as the mark."""
        return cls(joint=sl.sample_steps, variance=None, name="spine")

    @property
    def is_lattice(self) -> bool:
        return self.values is not None

    def pmf(self) -> tuple[int, np.ndarray]:
        """``(smin, p)`` with ``p[k] = P(X = smin + k)``."""
        if not self.is_lattice:
            raise ValueError("pmf only for lattice steps")
        v = self.values.astype(np.int64)
        smin = int(v.min())
        p = np.zeros(int(v.max()) - smin + 1)
        np.add.at(p, v - smin, self.probs)
        return smin, p

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.is_lattice:
            idx = np.minimum(np.searchsorted(self._cum, rng.random(shape), side="right"),
                             self.values.size - 1)
            return self.values[idx]
        return self._joint(rng, shape)[0]

    def sample_with_marks(self, rng, shape) -> tuple[np.ndarray, np.ndarray]:
        if self._joint is not None:
            return self._joint(rng, shape)
        x = self.sample(rng, shape)
        xi = self._mark(rng, shape) if self._mark is not None else np.zeros(shape)
        return x, xi


# --------------------------------------------------------------------------


def mogulskii_rate(profile: BarrierProfile, t: float, sigma2: float) -> float:
    """H_t(f, g) = (pi^2 sigma2 / 2) int_0^t ds / (g_s - f_s)^2.

    A width that vanishes at an endpoint triggers
    :class:`EndpointSingularityWarning`; a width that vanishes inside or makes
    the integral diverge raises :class:`NonIntegrableError`.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return 0.0
    grid = np.linspace(0.0, t, 4097)
    w = profile.width(grid)
    if np.any(w[1:-1] <= 0):
        raise NonIntegrableError("g - f vanishes inside the integration range")
    if w[0] <= 0 or w[-1] <= 0:
        warnings.warn("g - f vanishes at an endpoint; integrable singularity assumed",
                      EndpointSingularityWarning, stacklevel=2)
    points = None
    if profile.knots is not None:
        inner = profile.knots[(profile.knots > 0) & (profile.knots < t)]
        points = inner if inner.size else None

    def integrand(s):
        return 1.0 / float(profile.width(np.array([s]))[0]) ** 2

    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            limit = 50 if points is None else 4 * len(points) + 50
            val, _ = quad(integrand, 0.0, t, points=points, limit=max(limit, 1000),
                          epsabs=0.0, epsrel=1e-11)
        except (IntegrationWarning, ZeroDivisionError) as exc:
            raise NonIntegrableError(f"quadrature of 1/(g-f)^2 failed: {exc}") from exc
    return 0.5 * math.pi**2 * sigma2 * val


# --------------------------------------------------------------------------


def _default_a_n(n: int) -> float:
    return n ** (1 / 3)


def mc_confinement_prob(step: StepLaw, profile: BarrierProfile, n: int,
                        a_n: float | None = None, start_z: float = 0.0,
                        target: tuple[float, float] | None = None, with_marks: bool = False,
                        reps: int = 100_000, rng: np.random.Generator | None = None,
                        chunk_cells: int = 4_000_000) -> Estimate:
    """Monte Carlo estimate of
    P_{z a_n}[S_j / a_n in [f_{j/n}, g_{j/n}] for all j <= n, S_n / a_n in target, (E_n)]
    with a Wilson interval. ``E_n`` requires every mark ``xi_j <= n``.
    """
    if rng is None:
        raise ValueError("rng required")
    a = _default_a_n(n) if a_n is None else a_n
    lo, hi = profile.corridor(n, a)
    start = start_z * a
    if not lo[0] <= start <= hi[0]:
        raise ValueError("start lies outside the corridor at time 0")
    tlo, thi = (-np.inf, np.inf) if target is None else outward(target[0] * a, target[1] * a)
    chunk = max(1, chunk_cells // max(n, 1))
    hits = 0
    for done in range(0, reps, chunk):
        m = min(chunk, reps - done)
        if n == 0:
            ok = np.full(m, tlo <= start <= thi)
        else:
            if with_marks:
                x, xi = step.sample_with_marks(rng, (m, n))
            else:
                x = step.sample(rng, (m, n))
            pos = np.cumsum(x, axis=1)
            pos += start
            ok = np.all((pos >= lo[1:]) & (pos <= hi[1:]), axis=1)
            ok &= (pos[:, -1] >= tlo) & (pos[:, -1] <= thi)
            if with_marks:
                ok &= np.all(xi <= n, axis=1)
        hits += int(np.count_nonzero(ok))
    return proportion(hits, reps)


def lattice_corridor(profile: BarrierProfile, n: int, a_n: float | None = None):
    """Integer bounds ``ceil(a_n f(j/n))``, ``floor(a_n g(j/n))`` after outward rounding."""
    a = _default_a_n(n) if a_n is None else a_n
    lo, hi = profile.corridor(n, a)
    big = 2**62
    return (np.ceil(np.clip(lo, -big, big)).astype(np.int64),
            np.floor(np.clip(hi, -big, big)).astype(np.int64))


def exact_confinement_dp(step: StepLaw, lower_path, upper_path, n: int,
                         target: tuple[int, int] | None = None, start: int = 0,
                         width_budget: int = 2_000_000, log: bool = False) -> float:
    """Exact P[lower_j <= S_j <= upper_j for j = 0..n, S_n in target] for a lattice walk.

    Forward DP over the reachable integer states; mass is rescaled each step
    and the scale kept in log form, so deep small probabilities do not
    underflow. ``log=True`` returns the natural log of the probability.
    """
    smin, pmf = step.pmf()
    lower = np.asarray(lower_path, dtype=np.int64)
    upper = np.asarray(upper_path, dtype=np.int64)
    if lower.size < n + 1 or upper.size < n + 1:
        raise ValueError("barrier paths need n + 1 entries")
    neg = -math.inf if log else 0.0
    if not lower[0] <= start <= upper[0]:
        return neg
    lo = start
    dist = np.ones(1)
    log_scale = 0.0
    for j in range(1, n + 1):
        # support of the convolution is [lo + smin, lo + len(dist) - 1 + smin + len(pmf) - 1]
        new_lo = max(int(lower[j]), lo + smin)
        new_hi = min(int(upper[j]), lo + dist.size - 1 + smin + pmf.size - 1)
        if new_hi < new_lo:
            return neg
        if new_hi - new_lo + 1 > width_budget:
            raise WidthBudgetError(f"DP width {new_hi - new_lo + 1} exceeds budget {width_budget}")
        full = np.convolve(dist, pmf)
        off = new_lo - (lo + smin)
        dist = full[off:off + new_hi - new_lo + 1]
        lo = new_lo
        total = dist.sum()
        if total == 0.0:
            return neg
        if total < 1e-200:
            dist = dist / total
            log_scale += math.log(total)
    if target is not None:
        a = max(int(target[0]) - lo, 0)
        b = min(int(target[1]) - lo, dist.size - 1)
        mass = float(dist[a:b + 1].sum()) if b >= a else 0.0
    else:
        mass = float(dist.sum())
    if log:
        return math.log(mass) + log_scale if mass > 0 else -math.inf
    return mass * math.exp(log_scale)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateRow:
    n: int
    a_n: float
    estimate: float
    stderr: float
    scaled_log: float
    target_constant: float


def rate_convergence_report(step: StepLaw, profile: BarrierProfile, n_list: Sequence[int],
                            sigma2: float, a_n_rule: Callable[[int], float] = _default_a_n,
                            method: str = "dp", start_z: float = 0.0,
                            target: tuple[float, float] | None = None,
                            reps: int = 100_000, rng=None) -> list[RateRow]:
    """Rows of ``(n, a_n, P, stderr, (a_n^2/n) log P, -H_1(f, g))``."""
    target_const = -mogulskii_rate(profile, 1.0, sigma2)
    rows = []
    for n in n_list:
        a = a_n_rule(n)
        if method == "dp":
            lo, hi = lattice_corridor(profile, n, a)
            tgt = None
            if target is not None:
                tlo, thi = outward(target[0] * a, target[1] * a)
                tgt = (math.ceil(tlo), math.floor(thi))
            logp = exact_confinement_dp(step, lo, hi, n, tgt, start=int(round(start_z * a)),
                                        log=True)
            p, se = math.exp(logp), 0.0
        elif method == "mc":
            est = mc_confinement_prob(step, profile, n, a, start_z, target, reps=reps, rng=rng)
            p, se = est.value, est.stderr
            logp = math.log(p) if p > 0 else -math.inf
        else:
            raise ValueError("method must be 'dp' or 'mc'")
        rows.append(RateRow(n, a, p, se, a * a / n * logp, target_const))
    return rows


def confinement_over_starts(step: StepLaw, profile: BarrierProfile, n: int,
                            starts_z: Sequence[float], a_n: float | None = None,
                            target: tuple[float, float] | None = None) -> dict:
    """DP log-probabilities for several starting points and their supremum (scaled)."""
    a = _default_a_n(n) if a_n is None else a_n
    lo, hi = lattice_corridor(profile, n, a)
    tgt = None
    if target is not None:
        tlo, thi = outward(target[0] * a, target[1] * a)
        tgt = (math.ceil(tlo), math.floor(thi))
    scaled = {}
    for z in starts_z:
        lp = exact_confinement_dp(step, lo, hi, n, tgt, start=int(round(z * a)), log=True)
        scaled[float(z)] = a * a / n * lp
    return {"scaled_by_start": scaled, "sup": max(scaled.values())}


def write_report_csv(rows: Sequence[RateRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(RateRow.__dataclass_fields__))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
