"""Reproduction laws of the branching random walk and their boundary-case normalisation.

A reproduction law is the law of the point process of children displacements
of one individual. The log-moment functional is

    kappa(theta) = log E[ sum_{l in L} exp(theta * l) ].

A law is in the *boundary case* when E[sum e^l] = 1 and E[sum l e^l] = 0. Any law
for which ``theta * kappa'(theta) = kappa(theta)`` has a positive root
``theta_star`` is brought there by the affine map
``l -> theta_star * l - kappa(theta_star)``; the variance functional is then
``sigma2 = E[sum l^2 e^l] = theta_star**2 * kappa''(theta_star)``.

Three families are provided:

* :class:`TableLaw` - finitely many realisations, each with a probability.
  Moments are exact and the realisations can be enumerated.
* :class:`PoissonGaussianLaw` - ``1 + Poisson(mean - 1)`` children with i.i.d.
  Gaussian displacements. Moments have closed forms.
* :class:`SamplerLaw` - any user sampler; moments are Monte Carlo estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, ndtri
from scipy.stats import poisson

from ._rng import child_keys, derive_rng, key_uniform
from .stats import Estimate

ENUMERATION_TOL = 1e-12
ROOT_RESIDUAL_TOL = 1e-10
THETA_SCAN = np.geomspace(1e-3, 50.0, 600)


class MomentDivergenceError(ArithmeticError):
    """A log-moment is infinite, or looks infinite under Monte Carlo."""


class NoBoundaryNormalizationError(ValueError):
    """theta * kappa'(theta) - kappa(theta) has no positive root on the scan range."""


class DegenerateLawError(ValueError):
    """All displacements coincide, so sigma2 would be 0."""


class NumericalError(ArithmeticError):
    """A root or derivative could not be resolved to the requested tolerance."""


# --------------------------------------------------------------------------
# intensity measures: the objects that moments are computed from


class _DiscreteIntensity:
    """Atomic measure ``sum_i w_i delta_{v_i}`` equal to E[sum_{l in L} delta_l].

    When built from Monte Carlo draws, ``groups`` tags each child with its
    realisation so that standard errors can be formed per realisation.
    """

    def __init__(self, values, weights, groups=None, n_groups=0, exact=True):
        self.values = np.asarray(values, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.groups = groups
        self.n_groups = n_groups
        self.exact = exact
        if not np.all(np.isfinite(self.values)):
            raise MomentDivergenceError("moment diverges: non-finite displacement in law")
        self._top = float(self.values.max())
        self._top_mass = float(self.weights[self.values == self._top].sum())
        self._distinct = np.unique(self.values).size

    @property
    def degenerate(self) -> bool:
        return self._distinct == 1

    def _tilt(self, theta: float):
        d = self.values - self._top
        logw = np.log(self.weights) + theta * d
        log_z = float(logsumexp(logw))
        pi = np.exp(logw - log_z)
        return d, pi, log_z

    def kappa(self, theta: float) -> float:
        _, _, log_z = self._tilt(theta)
        k = theta * self._top + log_z
        if not math.isfinite(k):
            raise MomentDivergenceError(f"moment diverges at theta={theta}")
        return k

    def kappa_derivs(self, theta: float) -> tuple[float, float, float]:
        d, pi, log_z = self._tilt(theta)
        mean_d = float(pi @ d)
        k0 = theta * self._top + log_z
        k1 = self._top + mean_d
        k2 = float(pi @ (d - mean_d) ** 2)
        return k0, k1, k2

    def boundary_gap(self, theta: float) -> float:
        """theta * kappa'(theta) - kappa(theta), evaluated without cancellation."""
        d, pi, log_z = self._tilt(theta)
        return theta * float(pi @ d) - log_z

    def gap_limit(self) -> float:
        return -math.log(self._top_mass)

    def moment(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.weights @ fn(self.values))

    def moment_stderr(self, fn) -> float:
        if self.exact:
            return 0.0
        per_real = np.bincount(self.groups, weights=fn(self.values), minlength=self.n_groups)
        return float(per_real.std(ddof=1) / math.sqrt(self.n_groups))

    def check_finite_mc(self, theta: float) -> None:
        """Reject a Monte Carlo moment that a single realisation dominates."""
        if self.exact:
            return
        terms = np.bincount(self.groups, weights=np.exp(theta * (self.values - self._top)),
                            minlength=self.n_groups)
        total = terms.sum()
        if not np.isfinite(total) or terms.max() > 0.5 * total:
            raise MomentDivergenceError(
                f"moment diverges (empirically infinite): one of {self.n_groups} "
                f"realisations carries over half of E[sum exp({theta} l)]")


class _GaussianIntensity:
    """Intensity ``mean * N(loc, sd^2)`` of a Poisson-Gaussian law (closed forms)."""

    exact = True

    def __init__(self, mean: float, loc: float, sd: float):
        self.mean, self.loc, self.sd = mean, loc, sd

    @property
    def degenerate(self) -> bool:
        return self.sd == 0.0

    def kappa(self, theta):
        return math.log(self.mean) + theta * self.loc + 0.5 * (theta * self.sd) ** 2

    def kappa_derivs(self, theta):
        return self.kappa(theta), self.loc + theta * self.sd**2, self.sd**2

    def boundary_gap(self, theta):
        return 0.5 * (theta * self.sd) ** 2 - math.log(self.mean)

    def gap_limit(self):
        return math.inf

    def moment(self, fn):
        # Gauss-Hermite quadrature, exact for the polynomial-times-exponential moments used here
        x, w = np.polynomial.hermite_e.hermegauss(80)
        vals = self.loc + self.sd * x
        return float(self.mean * (w @ fn(vals)) / math.sqrt(2 * math.pi))

    def moment_stderr(self, fn):
        return 0.0

    def check_finite_mc(self, theta):
        return None


# --------------------------------------------------------------------------
# law classes


class ReproductionLaw:
    """Base class. Subclasses are immutable; every sampler takes an explicit RNG."""

    name: str = "law"
    params: dict

    @property
    def enumerable(self) -> bool:
        return False

    @property
    def descriptor(self) -> dict:
        return {"name": self.name, **self.params}

    def sample(self, rng: np.random.Generator, n_parents: int) -> tuple[np.ndarray, np.ndarray]:
        """Children of ``n_parents`` independent parents.

        Returns ``(counts, displacements)`` with displacements grouped by parent
        in parent order.
        """
        raise NotImplementedError

    def sample_keyed(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Children of the parents with the given node keys: ``(counts, disps, child_keys)``."""
        raise NotImplementedError

    def intensity(self, budget: int | None = None, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def affine(self, scale: float, shift: float) -> "ReproductionLaw":
        """The law of ``scale * l + shift`` applied to every child."""
        raise NotImplementedError

    @property
    def mean_offspring(self) -> float:
        raise NotImplementedError

    @property
    def max_displacement(self) -> float:
        return math.inf

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name}: {args})"


def _gather_children(sizes, offsets, flat, idx):
    counts = sizes[idx]
    total = int(counts.sum())
    starts = offsets[idx]
    pos = np.repeat(starts - (np.cumsum(counts) - counts), counts) + np.arange(total)
    return counts, flat[pos]


class TableLaw(ReproductionLaw):
    """Finite-support point process: a list of (children displacements, probability)."""

    def __init__(self, atoms: Sequence[tuple[Sequence[float], float]], name: str = "table",
                 params: dict | None = None):
        if not atoms:
            raise ValueError("a table law needs at least one atom")
        children = [np.asarray(c, dtype=float).reshape(-1) for c, _ in atoms]
        probs = np.array([float(p) for _, p in atoms])
        if any(c.size == 0 for c in children):
            raise ValueError("every realisation must have at least one child (P(#L = 0) = 0)")
        if np.any(probs < 0):
            raise ValueError("negative atom probability")
        if abs(probs.sum() - 1.0) > ENUMERATION_TOL:
            raise ValueError(f"atom probabilities sum to {probs.sum()!r}, not 1")
        if any(not np.all(np.isfinite(c)) for c in children):
            raise ValueError("non-finite displacement")
        keep = probs > 0
        self.children = tuple(c for c, k in zip(children, keep) if k)
        self.probs = probs[keep]
        self.name = name
        self.params = dict(params) if params is not None else {
            "atoms": [[c.tolist(), float(p)] for c, p in zip(self.children, self.probs)]}
        self._sizes = np.array([c.size for c in self.children], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)[:-1]]).astype(np.int64)
        self._flat = np.concatenate(self.children)
        self._cum = np.cumsum(self.probs)
        self._cum[-1] = 1.0
        if self.mean_offspring <= 1.0:
            raise ValueError("E[#L] must exceed 1 (supercritical reproduction)")

    @property
    def enumerable(self) -> bool:
        return True

    def enumerate(self) -> list[tuple[np.ndarray, float]]:
        return [(c.copy(), float(p)) for c, p in zip(self.children, self.probs)]

    @property
    def mean_offspring(self) -> float:
        return float(self.probs @ self._sizes)

    @property
    def max_children(self) -> int:
        return int(self._sizes.max())

    @property
    def max_displacement(self) -> float:
        return float(self._flat.max())

    @property
    def min_displacement(self) -> float:
        return float(self._flat.min())

    def _pick(self, u):
        return np.minimum(np.searchsorted(self._cum, u, side="right"), len(self.probs) - 1)

    def sample_atoms(self, rng, n_parents):
        return self._pick(rng.random(n_parents))

    def sample(self, rng, n_parents):
        return _gather_children(self._sizes, self._offsets, self._flat,
                                self.sample_atoms(rng, n_parents))

    def sample_keyed(self, keys):
        idx = self._pick(key_uniform(keys, 1))
        counts, disps = _gather_children(self._sizes, self._offsets, self._flat, idx)
        return counts, disps, child_keys(keys, counts)

    def intensity(self, budget=None, rng=None):
        weights = np.repeat(self.probs, self._sizes)
        return _DiscreteIntensity(self._flat, weights)

    def affine(self, scale, shift):
        atoms = [(scale * c + shift, p) for c, p in zip(self.children, self.probs)]
        params = dict(self.params)
        s0, c0 = params.pop("affine", (1.0, 0.0))
        params["affine"] = (scale * s0, scale * c0 + shift)
        return TableLaw(atoms, name=self.name, params=params)


class PoissonGaussianLaw(ReproductionLaw):
    """``1 + Poisson(mean - 1)`` children, displacements i.i.d. ``N(loc, sd^2)``."""

    def __init__(self, mean: float, sd: float, loc: float = 0.0, name: str = "poisson_gaussian"):
        if not mean > 1.0:
            raise ValueError("mean offspring must exceed 1")
        if not sd >= 0.0:
            raise ValueError("sd must be nonnegative")
        self.mean, self.sd, self.loc = float(mean), float(sd), float(loc)
        self.name = name
        self.params = {"mean": self.mean, "sd": self.sd, "loc": self.loc}
        lam = self.mean - 1.0
        kmax = int(lam + 40 * math.sqrt(lam) + 60)
        self._cdf = poisson.cdf(np.arange(kmax + 1), lam)
        self._cdf[-1] = 1.0

    @property
    def mean_offspring(self) -> float:
        return self.mean

    def sample(self, rng, n_parents):
        counts = 1 + rng.poisson(self.mean - 1.0, size=n_parents)
        disps = self.loc + self.sd * rng.standard_normal(int(counts.sum()))
        return counts.astype(np.int64), disps

    def sample_keyed(self, keys):
        counts = 1 + np.searchsorted(self._cdf, key_uniform(keys, 1), side="right")
        counts = counts.astype(np.int64)
        ck = child_keys(keys, counts)
        disps = self.loc + self.sd * ndtri(key_uniform(ck, 2))
        return counts, disps, ck

    def intensity(self, budget=None, rng=None):
        return _GaussianIntensity(self.mean, self.loc, self.sd)

    def affine(self, scale, shift):
        return PoissonGaussianLaw(self.mean, abs(scale) * self.sd, scale * self.loc + shift,
                                  name=self.name)


class SamplerLaw(ReproductionLaw):
    """Law given only by a sampler ``fn(rng, n_parents) -> (counts, displacements)``.

    Moments are Monte Carlo estimates, so every moment call needs a budget.
    """

    def __init__(self, fn: Callable, name: str = "sampler", params: dict | None = None,
                 scale: float = 1.0, shift: float = 0.0, mean_offspring: float | None = None):
        self._fn = fn
        self.name = name
        self.params = dict(params or {})
        self.scale, self.shift = float(scale), float(shift)
        self._mean = mean_offspring

    @property
    def mean_offspring(self) -> float:
        if self._mean is None:
            raise NotImplementedError("mean offspring unknown for this sampler")
        return self._mean

    def sample(self, rng, n_parents):
        counts, disps = self._fn(rng, n_parents)
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 1):
            raise ValueError("sampler produced a realisation with no children")
        return counts, self.scale * np.asarray(disps, dtype=float) + self.shift

    def sample_keyed(self, keys):
        out_c, out_d = [], []
        for k in np.asarray(keys, dtype=np.uint64):
            c, d = self.sample(derive_rng(int(k) >> 1, 0), 1)
            out_c.append(c)
            out_d.append(d)
        counts = np.concatenate(out_c) if out_c else np.zeros(0, np.int64)
        disps = np.concatenate(out_d) if out_d else np.zeros(0)
        return counts, disps, child_keys(keys, counts)

    def intensity(self, budget=None, rng=None):
        if budget is None or rng is None:
            raise ValueError("sampler-only law: moments need a Monte Carlo budget and rng")
        counts, disps = self.sample(rng, int(budget))
        groups = np.repeat(np.arange(int(budget)), counts)
        weights = np.full(disps.size, 1.0 / budget)
        return _DiscreteIntensity(disps, weights, groups, int(budget), exact=False)

    def affine(self, scale, shift):
        return SamplerLaw(self._fn, self.name, self.params, scale * self.scale,
                          scale * self.shift + shift, self._mean)


# --------------------------------------------------------------------------
# constructors


def table(atoms, name: str = "table") -> TableLaw:
    return TableLaw([(c, p) for c, p in atoms], name=name)


def fixed(children: Sequence[float]) -> TableLaw:
    """Deterministic point process."""
    return TableLaw([(children, 1.0)], name="fixed", params={"children": list(map(float, children))})


def binary_pm1(p_up: float = 0.5) -> TableLaw:
    """Two children, each displaced +1 with probability ``p_up`` and -1 otherwise."""
    q = 1.0 - p_up
    atoms = [((1.0, 1.0), p_up * p_up), ((1.0, -1.0), p_up * q),
             ((-1.0, 1.0), q * p_up), ((-1.0, -1.0), q * q)]
    return TableLaw(atoms, name="binary_pm1", params={"p_up": float(p_up)})


def poisson_gaussian(mean: float, sd: float, loc: float = 0.0) -> PoissonGaussianLaw:
    return PoissonGaussianLaw(mean, sd, loc)


LAW_KINDS = ("binary_pm1", "fixed", "table", "poisson_gaussian")


def law_from_descriptor(desc: dict) -> ReproductionLaw:
    """Build a law from a config mapping such as ``{"kind": "binary_pm1", "p_up": 0.25}``.

    The key ``normalize`` (default true) applies the boundary-case normalisation.
    """
    desc = dict(desc)
    kind = desc.pop("kind", None)
    normalize = bool(desc.pop("normalize", True))
    try:
        if kind == "binary_pm1":
            law = binary_pm1(**desc)
        elif kind == "fixed":
            law = fixed(desc.pop("children"))
            if desc:
                raise TypeError(f"unexpected keys {sorted(desc)}")
        elif kind == "table":
            atoms = desc.pop("atoms")
            if desc:
                raise TypeError(f"unexpected keys {sorted(desc)}")
            law = table([(a["children"], a["p"]) for a in atoms])
        elif kind == "poisson_gaussian":
            law = poisson_gaussian(**desc)
        else:
            raise ValueError(f"unknown law kind {kind!r}; expected one of {LAW_KINDS}")
    except (TypeError, KeyError) as exc:
        raise ValueError(f"bad parameters for law kind {kind!r}: {exc}") from exc
    return normalized(law) if normalize else law


# --------------------------------------------------------------------------
# moments and normalisation


@dataclass(frozen=True)
class BoundaryForm:
    theta_star: float
    kappa_star: float
    sigma2: float
    exact: bool = True


def kappa(law: ReproductionLaw, theta: float, budget: int | None = None,
          rng: np.random.Generator | None = None) -> float | Estimate:
    """log E[sum exp(theta l)]. A float when exact, an :class:`Estimate` otherwise."""
    inten = law.intensity(budget, rng)
    if inten.exact:
        return inten.kappa(theta)
    inten.check_finite_mc(theta)
    k = inten.kappa(theta)
    se_mean = inten.moment_stderr(lambda v: np.exp(theta * v))
    se = se_mean / math.exp(k)
    return Estimate(k, se, k - 1.96 * se, k + 1.96 * se, inten.n_groups, inten.n_groups, k)


def _max_mass_diagnostic(inten) -> str:
    if isinstance(inten, _DiscreteIntensity):
        return (f"theta*kappa'-kappa increases to -log(W) = {inten.gap_limit():.6g} where "
                f"W = E[#children at the maximal displacement] = {inten._top_mass:.6g}; "
                "a positive root needs W < 1")
    return ""


def _find_theta_star(inten) -> float:
    gaps = np.array([inten.boundary_gap(t) for t in THETA_SCAN])
    if not np.all(np.isfinite(gaps)):
        raise MomentDivergenceError("moment diverges inside the theta scan range")
    pos = np.nonzero(gaps > 0)[0]
    if pos.size == 0 or pos[0] == 0:
        raise NoBoundaryNormalizationError(
            "no boundary normalization found: no sign change of theta*kappa'(theta)-kappa(theta) "
            f"on [{THETA_SCAN[0]}, {THETA_SCAN[-1]}] (max {gaps.max():.3g}). "
            + _max_mass_diagnostic(inten))
    lo, hi = THETA_SCAN[pos[0] - 1], THETA_SCAN[pos[0]]
    root = brentq(inten.boundary_gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                  maxiter=500)
    if abs(inten.boundary_gap(root)) > ROOT_RESIDUAL_TOL:
        raise NumericalError(f"theta* residual {inten.boundary_gap(root):.3g} above tolerance")
    return float(root)


def normalize_to_boundary(law: ReproductionLaw, budget: int | None = None,
                          rng: np.random.Generator | None = None) -> BoundaryForm:
    """Solve theta kappa'(theta) = kappa(theta) and return the affine normalisation.

    Sampler-only laws are normalised against a Monte Carlo intensity drawn with
    ``budget`` realisations; the result is then exact for that empirical measure
    and ``exact`` is False.
    """
    inten = law.intensity(budget, rng)
    if inten.degenerate:
        raise DegenerateLawError("all displacements coincide: sigma2 = 0, no normalization")
    theta = _find_theta_star(inten)
    k0, _, k2 = inten.kappa_derivs(theta)
    inten.check_finite_mc(theta)
    sigma2 = theta * theta * k2
    if not (math.isfinite(sigma2) and sigma2 > 0):
        raise NumericalError(f"sigma2 = {sigma2!r} not positive and finite")
    return BoundaryForm(theta, k0, sigma2, exact=inten.exact)


def normalized(law: ReproductionLaw, budget: int | None = None,
               rng: np.random.Generator | None = None) -> ReproductionLaw:
    """The boundary-case version of ``law``; its :class:`BoundaryForm` is attached as ``.boundary``."""
    form = normalize_to_boundary(law, budget, rng)
    out = law.affine(form.theta_star, -form.kappa_star)
    out.boundary = form
    return out


def sigma2_of(law: ReproductionLaw, budget=None, rng=None) -> float:
    """sigma2 = E[sum l^2 e^l] of a boundary-case law."""
    form = getattr(law, "boundary", None)
    if form is not None:
        return form.sigma2
    r = boundary_residuals(law, budget, rng)
    return r[2] if isinstance(r[2], float) else r[2].value


def boundary_residuals(law: ReproductionLaw, budget: int | None = None,
                       rng: np.random.Generator | None = None):
    """(E[sum e^l] - 1, E[sum l e^l], E[sum l^2 e^l]).

    Floats for exact laws, :class:`Estimate` triples for sampler-only laws.
    """
    inten = law.intensity(budget, rng)
    inten.check_finite_mc(1.0)
    fns = (np.exp, lambda v: v * np.exp(v), lambda v: v * v * np.exp(v))
    vals = [inten.moment(fn) for fn in fns]
    vals[0] -= 1.0
    if any(not math.isfinite(v) for v in vals):
        raise MomentDivergenceError(f"non-finite boundary moment {vals}")
    if inten.exact:
        return tuple(float(v) for v in vals)
    out = []
    for v, fn in zip(vals, fns):
        se = inten.moment_stderr(fn)
        out.append(Estimate(v, se, v - 2.576 * se, v + 2.576 * se, inten.n_groups,
                            inten.n_groups, float("nan")))
    return tuple(out)
