"""Galton-Watson processes: generating functions, exact simulation and left tails.

The left tail ``P(Z_n <= z m^n)`` splits into three regimes by the smallest
possible offspring count ``b``:

* ``b = 0``:  ``q + C z^(alpha / (alpha + 1))``
* ``b = 1``:  ``C z^alpha``
* ``b >= 2``: ``exp(-C z^(-log b / (log m - log b)))``

with ``alpha = -log f'(q) / log m``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .laws import PoissonGaussianLaw, ReproductionLaw
from .stats import Estimate, proportion

PMF_TOL = 1e-12
Q_TOL = 1e-12
_INT_LIMIT = 2**62


class SubcriticalTruncationError(ValueError):
    """The per-step truncated offspring mean is at most 1: ``a`` is too small."""


@dataclass(frozen=True)
class OffspringLaw:
    pmf: np.ndarray

    def __init__(self, pmf: Mapping[int, float] | Sequence[float]):
        if isinstance(pmf, Mapping):
            if any(int(k) < 0 for k in pmf):
                raise ValueError("offspring counts must be non-negative")
            arr = np.zeros(max(int(k) for k in pmf) + 1)
            for k, p in pmf.items():
                arr[int(k)] += float(p)
        else:
            arr = np.asarray(pmf, dtype=float).copy()
        if arr.ndim != 1 or arr.size == 0 or np.any(arr < 0):
            raise ValueError("pmf must be a non-empty vector of non-negative numbers")
        if abs(arr.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf sums to {arr.sum()!r}, not 1")
        nz = np.flatnonzero(arr)
        arr = arr[: nz[-1] + 1]
        arr.setflags(write=False)
        object.__setattr__(self, "pmf", arr)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.pmf)

    @property
    def m(self) -> float:
        return float(np.dot(np.arange(self.pmf.size), self.pmf))

    @property
    def b(self) -> int:
        return int(self.support[0])

    @property
    def degenerate(self) -> bool:
        return self.support.size == 1

    def f(self, s):
        """Probability generating function."""
        return np.polynomial.polynomial.polyval(s, self.pmf)

    def fprime(self, s):
        k = np.arange(1, self.pmf.size)
        return np.polynomial.polynomial.polyval(s, k * self.pmf[1:])

    @property
    def q(self) -> float:
        """Extinction probability, by monotone iteration from 0."""
        if self.b >= 1:
            return 0.0
        if self.m <= 1.0:
            return 1.0
        s = 0.0
        for _ in range(1_000_000):
            nxt = float(self.f(s))
            # geometric convergence: remaining error is about step * r / (1 - r)
            r = float(self.fprime(nxt))
            if nxt == s or (r < 1 and (nxt - s) * r / (1 - r) < Q_TOL * 1e-3):
                return nxt
            s = nxt
        raise ArithmeticError("extinction iteration did not converge")

    @property
    def alpha(self) -> float:
        if self.m <= 1.0:
            raise ValueError("alpha needs a supercritical law")
        d = float(self.fprime(self.q))
        return math.inf if d == 0.0 else -math.log(d) / math.log(self.m)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.choice(self.pmf.size, size=size, p=self.pmf)

    @classmethod
    def from_reproduction(cls, law: ReproductionLaw, keep_above: float | None = None) -> "OffspringLaw":
        """Offspring counts of an enumerable reproduction law, optionally only counting
        children displaced by at least ``keep_above``."""
        if not law.enumerable:
            raise ValueError("need an enumerable (table) reproduction law")
        acc: dict[int, float] = {}
        for disp, p in law.enumerate():
            k = int(disp.size if keep_above is None else np.count_nonzero(disp >= keep_above))
            acc[k] = acc.get(k, 0.0) + p
        return cls(acc)


def iterate_f(law: OffspringLaw, s: float, k: int) -> float:
    """``f^k(s)``, the generating function of ``Z_k`` at ``s``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if k < 0:
        raise ValueError("k must be non-negative")
    for _ in range(k):
        s = float(law.f(s))
    return s


def _check_width(law: OffspringLaw, n: int) -> None:
    top = law.pmf.size - 1
    if top > 1 and n * math.log(top) >= math.log(_INT_LIMIT):
        raise OverflowError(f"Z_{n} may reach {top}^{n}, beyond 64-bit counts")


def simulate_Z(law: OffspringLaw, n: int, rng: np.random.Generator, reps: int | None = None):
    """Exact ``Z_n`` (summed offspring counts, no approximation). ``reps`` gives an array."""
    _check_width(law, n)
    z = np.ones(1 if reps is None else reps, dtype=np.int64)
    k = np.arange(law.pmf.size, dtype=np.int64)
    for _ in range(n):
        alive = z > 0
        if not alive.any():
            break
        counts = rng.multinomial(z[alive], law.pmf)
        z[alive] = counts @ k
    return int(z[0]) if reps is None else z


# --------------------------------------------------------------------------
# left tail


def tail_case(law: OffspringLaw) -> str:
    """``"b0"``, ``"b1"`` or ``"b2+"``: which left-tail regime applies."""
    _check_tail_law(law)
    return "b0" if law.b == 0 else "b1" if law.b == 1 else "b2+"


def _check_tail_law(law: OffspringLaw) -> None:
    if law.degenerate:
        raise ValueError("degenerate single-atom offspring law")
    if not law.m > 1.0:
        raise ValueError(f"left-tail bound needs a supercritical law, m={law.m}")
    if law.b >= law.m:
        raise ValueError("b >= m")


def tail_exponent(law: OffspringLaw) -> float:
    """Exponent of ``z`` in the bound: ``alpha/(alpha+1)``, ``alpha`` or ``log b/(log m - log b)``."""
    case = tail_case(law)
    if case == "b0":
        a = law.alpha
        return a / (a + 1.0)
    if case == "b1":
        return law.alpha
    return math.log(law.b) / (math.log(law.m) - math.log(law.b))


def left_tail_bound(law: OffspringLaw, z: float, n: int | None = None, C: float = 1.0) -> float:
    """Upper bound on ``P(Z_n <= z m^n)`` with constant ``C`` (uniform in ``n``)."""
    if not 0.0 < z < 1.0:
        raise ValueError("z must lie in (0, 1)")
    case = tail_case(law)
    e = tail_exponent(law)
    if case == "b0":
        return law.q + C * z**e
    if case == "b1":
        return C * z**e
    return math.exp(-C * z ** (-e))


def left_tail_empirical(law: OffspringLaw, z: float, n: int, reps: int,
                        rng: np.random.Generator) -> Estimate:
    if not 0.0 < z < 1.0:
        raise ValueError("z must lie in (0, 1)")
    zn = simulate_Z(law, n, rng, reps)
    return proportion(int(np.count_nonzero(zn <= z * law.m**n)), reps)


def left_tail_exact(law: OffspringLaw, z: float, n: int, max_count: int = 400_000) -> float:
    """``P(Z_n <= z m^n)`` by a forward recursion on the law of ``Z_k``.

    For ``b >= 1``, ``Z_n >= b^(n-k) Z_k``, so only ``Z_k <= x / b^(n-k)`` matters
    (``x = floor(z m^n)``), and the convolution powers of the offspring law are
    truncated at the same level. All terms are non-negative sums, so there is
    no cancellation.
    """
    x = math.floor(z * law.m**n + 1e-9 * max(1.0, z * law.m**n))
    if x > max_count:
        raise ValueError(f"x = {x} above max_count = {max_count}")
    b = law.b
    if b == 0:
        # a large generation can still die out, so Z_k cannot be truncated
        return _tail_by_series(law, x, n)
    dist = np.array([0.0, 1.0])
    for k in range(1, n + 1):
        xk = x // b ** (n - k) if b >= 2 else x
        new = np.zeros(xk + 1)
        # conv holds mu^{*i} on [lo, lo + len) with lo = b i
        conv, lo = np.ones(1), 0
        for i in range(dist.size):
            if lo > xk:
                break
            w = dist[i]
            if w > 0.0:
                seg = conv[: xk + 1 - lo]
                new[lo: lo + seg.size] += w * seg
            conv = np.convolve(conv, law.pmf[b:])[: xk + 1 - lo]
            lo += b
        dist = new
    return float(min(1.0, dist.sum()))


def _tail_by_series(law: OffspringLaw, x: int, n: int) -> float:
    """``sum_{j <= x} [s^j] f^n(s)``, composing power series truncated after ``s^x``."""
    g = np.zeros(x + 1)
    if x >= 1:
        g[1] = 1.0
    for _ in range(n):
        out = np.zeros(x + 1)
        for p in law.pmf[::-1]:  # Horner in f
            out = np.convolve(out, g)[: x + 1]
            out[0] += p
        g = out
    return float(min(1.0, g.sum()))


def fit_tail_slope(zs: Sequence[float], probs: Sequence[float]) -> float:
    """Least-squares slope of ``log(-log P)`` against ``-log z``."""
    zs = np.asarray(zs, dtype=float)
    p = np.asarray(probs, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return float(np.polyfit(-np.log(zs), np.log(-np.log(p)), 1)[0])


def fit_tail_constant(law: OffspringLaw, zs: Sequence[float], probs: Sequence[float]) -> float:
    """Least-squares ``C`` in the bound's shape, in the regime-linear coordinate."""
    zs = np.asarray(zs, dtype=float)
    p = np.asarray(probs, dtype=float)
    e = tail_exponent(law)
    case = tail_case(law)
    if case == "b2+":
        x, y = zs ** (-e), -np.log(p)
    elif case == "b0":
        x, y = zs**e, p - law.q
    else:
        x, y = zs**e, p
    return float(np.dot(x, y) / np.dot(x, x))


@dataclass
class TailRow:
    z: float
    n: int
    empirical: float
    ci_low: float
    ci_high: float
    bound: float
    case: str


def tail_experiment(law: OffspringLaw, zs: Sequence[float], ns: Sequence[int], reps: int,
                    rng: np.random.Generator, C: float = 1.0) -> list[TailRow]:
    rows = []
    case = tail_case(law)
    for n in ns:
        zn = simulate_Z(law, n, rng, reps)
        for z in zs:
            est = proportion(int(np.count_nonzero(zn <= z * law.m**n)), reps)
            rows.append(TailRow(float(z), int(n), est.value, est.ci_low, est.ci_high,
                                left_tail_bound(law, z, n, C), case))
    return rows


def write_tail_csv(rows: Sequence[TailRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "n", "empirical", "ci_low", "ci_high", "bound", "case"])
        for r in rows:
            w.writerow([r.z, r.n, r.empirical, r.ci_low, r.ci_high, r.bound, r.case])


# --------------------------------------------------------------------------
# population floor of the branching random walk


@dataclass
class GrowthFloorResult:
    a: float
    n: int
    counts: np.ndarray = field(repr=False)
    truncated: np.ndarray = field(repr=False)
    truncated_mean: float = float("nan")
    floor: str = "sloped"

    def frequency(self, rho: float) -> Estimate:
        """Fraction of replicas with at least ``rho^n`` particles at generation n.

        When a replica hit the particle budget its count is a lower bound, so
        the frequency is a lower bound as well.
        """
        hits = int(np.count_nonzero(self.counts >= rho**self.n))
        return proportion(hits, self.counts.size)

    def rho_at(self, threshold: float = 0.5) -> float:
        """Largest ``rho`` whose frequency is at least ``threshold``."""
        c = np.sort(self.counts)[::-1]
        k = math.ceil(threshold * c.size)
        val = c[k - 1] if k >= 1 else c[0]
        return float(val) ** (1.0 / self.n) if val > 0 else 0.0


def truncated_mean(law: ReproductionLaw, a: float, budget: int = 200_000,
                   rng: np.random.Generator | None = None) -> float:
    """``E[#{children displaced by at least -a}]``; sampler-only laws use ``budget`` draws."""
    if law.enumerable:
        return float(sum(p * np.count_nonzero(d >= -a) for d, p in law.enumerate()))
    if isinstance(law, PoissonGaussianLaw):
        if law.sd == 0.0:
            return law.mean * float(law.loc >= -a)
        return float(law.mean * ndtr((law.loc + a) / law.sd))
    if rng is None:
        raise ValueError("sampler-only law: truncated mean needs an rng")
    inten = law.intensity(budget, rng)
    return float(inten.moment(lambda l: (l >= -a).astype(float)))


def growth_floor_experiment(law: ReproductionLaw, a: float, n: int, reps: int,
                            rng: np.random.Generator, budget: int = 1_000_000,
                            floor: str = "sloped") -> GrowthFloorResult:
    """Per replica, the number of generation-n individuals whose lineage stays above a floor.

    ``floor="sloped"`` requires ``V(u_j) >= -a j`` for all j; ``floor="flat"``
    requires ``V(u_j) >= -a n``. The sloped count can vanish after an unlucky
    first step, so its frequency stays below 1; the flat one tends to 1.

    Table laws are simulated exactly on position bins (see ``_floor_count_binned``).
    Other laws are simulated particle by particle; a population above ``budget``
    is thinned to its ``budget`` highest members, so its final count is a lower
    bound and the replica is flagged as truncated.
    """
    if floor not in ("sloped", "flat"):
        raise ValueError("floor must be 'sloped' or 'flat'")
    tm = truncated_mean(law, a, rng=rng)
    if not tm > 1.0:
        raise SubcriticalTruncationError(
            f"a too small: truncated offspring mean {tm:.6g} <= 1 at a={a}")

    def bar(k):
        return -a * (k if floor == "sloped" else n)

    counts = np.zeros(reps, dtype=np.int64)
    trunc = np.zeros(reps, dtype=bool)
    for r in range(reps):
        if law.enumerable:
            counts[r], trunc[r] = _floor_count_binned(law, bar, n, rng)
        else:
            counts[r], trunc[r] = _floor_count_particles(law, bar, n, rng, budget)
    return GrowthFloorResult(float(a), int(n), counts, trunc, tm, floor)


def _floor_count_binned(law, bar, n, rng) -> tuple[int, bool]:
    """Exact simulation that stores particles as (level-count vector, multiplicity) bins.

    A position is ``coords @ levels`` where ``coords[i]`` counts the steps of size
    ``levels[i]`` along the lineage, so equal positions share a bin exactly. A
    bin of N parents draws its atom counts from Multinomial(N, probs). If the
    total nears the 64-bit range, only the highest bins are kept (a lower bound).
    """
    atoms = law.enumerate()
    levels = np.unique(np.concatenate([d for d, _ in atoms]))
    m = levels.size
    probs = np.array([p for _, p in atoms])
    per_atom = np.array([[np.count_nonzero(d == v) for v in levels] for d, _ in atoms],
                        dtype=np.int64)
    max_kids = int(per_atom.sum(axis=1).max())
    radix = np.int64(n + 1) ** np.arange(m, dtype=np.int64) if m * math.log(n + 1) < 62 else None
    eye = np.eye(m, dtype=np.int64)
    coords = np.zeros((1, m), dtype=np.int64)
    mult = np.ones(1, dtype=np.int64)
    truncated = False
    for k in range(1, n + 1):
        kids = rng.multinomial(mult, probs) @ per_atom
        c = (coords[:, None, :] + eye[None, :, :]).reshape(-1, m)
        w = kids.reshape(-1)
        pos = c @ levels
        ok = (w > 0) & (pos >= bar(k))
        if not ok.any():
            return 0, truncated
        c, w, pos = c[ok], w[ok], pos[ok]
        if radix is None:
            _, first, inv = np.unique(c, axis=0, return_index=True, return_inverse=True)
        else:
            _, first, inv = np.unique(c @ radix, return_index=True, return_inverse=True)
        coords, pos = c[first], pos[first]
        mult = np.bincount(inv.reshape(-1), weights=w, minlength=first.size).astype(np.int64)
        limit = _INT_LIMIT // (4 * max_kids)
        if mult.sum(dtype=float) > limit:
            order = np.argsort(-pos, kind="stable")
            cum = np.cumsum(mult[order], dtype=float)
            keep = order[: max(1, int(np.searchsorted(cum, limit)))]
            coords, mult = coords[keep], mult[keep]
            truncated = True
    return int(mult.sum()), truncated


def _floor_count_particles(law, bar, n, rng, budget) -> tuple[int, bool]:
    pos = np.zeros(1)
    truncated = False
    for k in range(1, n + 1):
        c, d = law.sample(rng, pos.size)
        pos = np.repeat(pos, c) + d
        pos = pos[pos >= bar(k)]
        if pos.size > budget:
            pos = np.partition(pos, pos.size - budget)[pos.size - budget:]
            truncated = True
        if pos.size == 0:
            break
    return int(pos.size), truncated
