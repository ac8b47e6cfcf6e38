"""Size-biased reproduction, the spine walk, and many-to-one identities.

For a boundary-case law the spine step ``X`` has law
``P(X in dx) = E[sum_{l in L} e^l 1{l in dx}]``; the spine's siblings carry the
weight ``xi = log(1 + sum_{siblings} e^{l_j - X})``. The many-to-one identity

    E[ sum_{|u|=n} F(V(u_1), ..., V(u_n)) ] = E[ e^{a - S_n} F(S_1, ..., S_n) ]

converts additive functionals of the tree into weighted spine expectations.
Exact mode evaluates both sides by exhaustive enumeration on table laws.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .laws import PoissonGaussianLaw, ReproductionLaw, TableLaw
from .profiles import BarrierProfile, outward
from .stats import Estimate, log_mean_estimate

BOUNDARY_TOL = 1e-9
DEFAULT_MAX_DEPTH = 4
DEFAULT_TREE_BUDGET = 500_000


class EnumerationTooLargeError(RuntimeError):
    """Exact enumeration would exceed its budget."""


def xi_of(siblings) -> float:
    """log(1 + sum exp(delta)) over sibling displacements relative to the individual."""
    d = np.asarray(siblings, dtype=float).reshape(-1)
    return float(np.logaddexp(0.0, logsumexp(d))) if d.size else 0.0


class SpineLaw:
    """Spine step sampler built from a boundary-normalised reproduction law.

    Table laws get an exact step table, Poisson-Gaussian laws an exact sampler.
    Any other law is handled by sampling-importance-resampling from a pool of
    ``pool_size`` realisations.
    """

    def __init__(self, law: ReproductionLaw, pool_size: int = 200_000,
                 rng: np.random.Generator | None = None):
        self.base = law
        if isinstance(law, TableLaw):
            self.kind = "table"
            self._build_table(law)
        elif isinstance(law, PoissonGaussianLaw):
            self.kind = "gaussian"
            m = law.mean * math.exp(law.loc + 0.5 * law.sd**2)
            if abs(m - 1.0) > BOUNDARY_TOL:
                raise ValueError(f"law is not boundary-normalised (E sum e^l = {m!r})")
        else:
            if rng is None:
                raise ValueError("a sampler-only law needs an rng to build the resampling pool")
            self.kind = "resampled"
            self._build_pool(law, pool_size, rng)

    def _build_table(self, law: TableLaw):
        xs, xis, probs, atom, child = [], [], [], [], []
        for a, (c, p) in enumerate(zip(law.children, law.probs)):
            for i, x in enumerate(c):
                rel = np.delete(c, i) - x
                xs.append(x)
                xis.append(xi_of(rel))
                probs.append(p * math.exp(x))
                atom.append(a)
                child.append(i)
        probs = np.array(probs)
        total = probs.sum()
        if abs(total - 1.0) > BOUNDARY_TOL:
            raise ValueError(f"law is not boundary-normalised (E sum e^l = {total!r})")
        self.step_x = np.array(xs)
        self.step_xi = np.array(xis)
        self.step_prob = probs / total
        self.step_atom = np.array(atom)
        self.step_child = np.array(child)
        self._cum = np.cumsum(self.step_prob)
        self._cum[-1] = 1.0
        # two-stage size-biased construction: atom by sum e^l, then child by e^l
        w_atom = np.array([p * np.exp(c).sum() for c, p in zip(law.children, law.probs)])
        self._atom_cum = np.cumsum(w_atom / w_atom.sum())
        self._atom_cum[-1] = 1.0

    def _build_pool(self, law, pool_size, rng):
        counts, disps = law.sample(rng, pool_size)
        starts = np.cumsum(counts) - counts
        parent = np.repeat(np.arange(pool_size), counts)
        # log(sum over all children of the realisation of e^l) per child
        top = np.maximum.reduceat(disps, starts)
        sums = np.add.reduceat(np.exp(disps - np.repeat(top, counts)), starts)
        log_tot = np.log(sums) + top
        self.step_x = disps
        # xi = log(sum_all e^l) - l  (the "1 +" is the spine child itself)
        self.step_xi = np.maximum(log_tot[parent] - disps, 0.0)
        w = np.exp(disps - disps.max())
        self.step_prob = w / w.sum()
        self._cum = np.cumsum(self.step_prob)
        self._cum[-1] = 1.0
        self._pool = (counts, disps, starts)

    @property
    def enumerable(self) -> bool:
        return self.kind == "table"

    def sample_steps(self, rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
        """I.i.d. spine steps ``X`` and sibling weights ``xi``."""
        if self.kind == "gaussian":
            return self._gaussian_steps(rng, shape)
        idx = np.searchsorted(self._cum, rng.random(shape), side="right")
        idx = np.minimum(idx, self.step_x.size - 1)
        return self.step_x[idx], self.step_xi[idx]

    def _gaussian_steps(self, rng, shape):
        law = self.base
        size = int(np.prod(shape))
        lam = law.mean - 1.0
        x = law.loc + law.sd**2 + law.sd * rng.standard_normal(size)
        # size-biased 1 + Poisson(lam): siblings ~ Poisson(lam) + Bernoulli(lam / (1 + lam))
        n_sib = rng.poisson(lam, size) + (rng.random(size) < lam / (1.0 + lam))
        sib = law.loc + law.sd * rng.standard_normal(int(n_sib.sum()))
        owner = np.repeat(np.arange(size), n_sib)
        s = np.bincount(owner, weights=np.exp(sib - x[owner]), minlength=size)
        return x.reshape(shape), np.log1p(s).reshape(shape)

    def sample_size_biased(self, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """One realisation of the size-biased law and the index of the spine child."""
        if self.kind == "table":
            law = self.base
            a = min(int(np.searchsorted(self._atom_cum, rng.random(), side="right")),
                    len(law.probs) - 1)
            c = law.children[a]
            w = np.cumsum(np.exp(c - c.max()))
            i = min(int(np.searchsorted(w, rng.random() * w[-1], side="right")), c.size - 1)
            return c.copy(), i
        if self.kind == "gaussian":
            law = self.base
            lam = law.mean - 1.0
            n_sib = rng.poisson(lam) + int(rng.random() < lam / (1 + lam))
            x = law.loc + law.sd**2 + law.sd * rng.standard_normal()
            sib = law.loc + law.sd * rng.standard_normal(n_sib)
            pos = int(rng.integers(0, n_sib + 1))
            return np.insert(sib, pos, x), pos
        counts, disps, starts = self._pool
        j = min(int(np.searchsorted(self._cum, rng.random(), side="right")), disps.size - 1)
        r = int(np.searchsorted(starts, j, side="right") - 1)
        return disps[starts[r]:starts[r] + counts[r]].copy(), int(j - starts[r])


@dataclass(frozen=True)
class SpinePath:
    positions: np.ndarray  # S_0 .. S_n
    xi: np.ndarray  # xi(w_1) .. xi(w_n)
    log_weight: float  # a - S_n

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def sample_spine_paths(sl: SpineLaw, n: int, reps: int, rng: np.random.Generator,
                       start: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Batch of spine walks: positions ``(reps, n + 1)`` and marks ``(reps, n)``."""
    x, xi = sl.sample_steps(rng, (reps, n))
    pos = np.empty((reps, n + 1))
    pos[:, 0] = start
    np.cumsum(x, axis=1, out=pos[:, 1:])
    pos[:, 1:] += start
    return pos, xi


def sample_spine_path(sl: SpineLaw, n: int, rng: np.random.Generator,
                      start: float = 0.0) -> SpinePath:
    pos, xi = sample_spine_paths(sl, n, 1, rng, start)
    return SpinePath(pos[0], xi[0], start - pos[0, -1])


# --------------------------------------------------------------------------
# exhaustive enumeration


def enumerate_tree_leaves(law: TableLaw, n: int, start: float = 0.0,
                          budget: int = DEFAULT_TREE_BUDGET) -> tuple[np.ndarray, np.ndarray]:
    """All generation-n lineages of all trees of depth n, with their tree probabilities.

    Returns ``(paths, probs)`` where row ``r`` of ``paths`` holds
    ``V(u_1), ..., V(u_n)`` for one individual ``u`` of one enumerated tree and
    ``probs[r]`` is the probability of that whole tree. Summing
    ``probs * F(paths)`` therefore evaluates ``E[sum_{|u|=n} F]`` from the tree.
    """
    if not law.enumerable:
        raise ValueError("exact enumeration needs a table law")
    atoms = law.enumerate()
    k = len(atoms)
    # a state is one partially built tree: its probability and its current lineages
    states = [(1.0, np.full((1, 0), 0.0), np.array([start]))]
    for _ in range(n):
        n_trees = sum(k ** s[1].shape[0] for s in states)
        if n_trees > budget:
            raise EnumerationTooLargeError(
                f"enumeration too large: {n_trees} trees exceeds budget {budget}")
        nxt = []
        for prob, paths, last in states:
            for combo in itertools.product(range(k), repeat=paths.shape[0]):
                p = prob
                rows, lasts = [], []
                for i, a in enumerate(combo):
                    c, pa = atoms[a]
                    p *= pa
                    pos = last[i] + c
                    rows.append(np.hstack([np.repeat(paths[i:i + 1], c.size, axis=0),
                                           pos[:, None]]))
                    lasts.append(pos)
                nxt.append((p, np.vstack(rows), np.concatenate(lasts)))
        states = nxt
    paths = np.vstack([s[1] for s in states])
    probs = np.concatenate([np.full(s[1].shape[0], s[0]) for s in states])
    return paths, probs


def enumerate_spine_paths(sl: SpineLaw, n: int, budget: int = DEFAULT_TREE_BUDGET,
                          start: float = 0.0):
    """Every spine step sequence of length n: positions ``(M, n + 1)``, marks, probabilities."""
    if not sl.enumerable:
        raise ValueError("exact spine enumeration needs a table law")
    m = sl.step_x.size
    if m**n > budget:
        raise EnumerationTooLargeError(f"enumeration too large: {m**n} spine paths")
    if n == 0:
        return np.full((1, 1), start), np.zeros((1, 0)), np.ones(1)
    idx = np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64)
    pos = np.empty((idx.shape[0], n + 1))
    pos[:, 0] = start
    pos[:, 1:] = start + np.cumsum(sl.step_x[idx], axis=1)
    probs = np.prod(sl.step_prob[idx], axis=1)
    return pos, sl.step_xi[idx], probs


@dataclass(frozen=True)
class ManyToOneResult:
    value: float
    tree_side: float | None = None
    spine_side: float | None = None
    estimate: Estimate | None = None

    @property
    def difference(self) -> float:
        if self.tree_side is None:
            return float("nan")
        return abs(self.tree_side - self.spine_side)


def many_to_one_expectation(law: ReproductionLaw, n: int,
                            functional: Callable[[np.ndarray], np.ndarray],
                            mode: str = "exact", start: float = 0.0,
                            reps: int = 100_000, rng: np.random.Generator | None = None,
                            max_depth: int = DEFAULT_MAX_DEPTH,
                            budget: int = DEFAULT_TREE_BUDGET,
                            spine: SpineLaw | None = None) -> ManyToOneResult:
    """E[sum_{|u|=n} F(V(u_1..u_n))] through the spine walk.

    ``functional`` maps an ``(m, n)`` array of lineage positions to ``m`` values.
    In exact mode the tree side (full enumeration) and the spine side (step
    enumeration) are computed independently.
    """
    sl = spine if spine is not None else SpineLaw(law, rng=rng)
    if mode == "exact":
        if n > max_depth:
            raise EnumerationTooLargeError(f"enumeration too large: depth {n} > cap {max_depth}")
        paths, probs = enumerate_tree_leaves(law, n, start, budget)
        # exactly rounded sums keep the two sides comparable at 1e-12
        tree = math.fsum(probs * functional(paths))
        spos, _, sprob = enumerate_spine_paths(sl, n, budget, start)
        spine_val = math.fsum(sprob * np.exp(start - spos[:, -1]) * functional(spos[:, 1:]))
        return ManyToOneResult(spine_val, tree, spine_val)
    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    if rng is None:
        raise ValueError("mc mode needs an rng")
    pos, _ = sample_spine_paths(sl, n, reps, rng, start)
    vals = functional(pos[:, 1:]) * np.exp(start - pos[:, -1])
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(reps))
    est = Estimate(mean, se, mean - 1.96 * se, mean + 1.96 * se, reps,
                   int(np.count_nonzero(vals)), math.log(mean) if mean > 0 else -math.inf)
    return ManyToOneResult(mean, estimate=est)


# a library of lineage functionals: each maps an (m, n) array of positions to m values

PATH_FUNCTIONALS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "count": lambda p: np.ones(p.shape[0]),
    "final": lambda p: p[:, -1],
    "final_squared": lambda p: p[:, -1] ** 2,
    "exp_final": lambda p: np.exp(p[:, -1]),
    "exp_half_final": lambda p: np.exp(0.5 * p[:, -1]),
    "final_nonnegative": lambda p: (p[:, -1] >= 0).astype(float),
    "running_min": lambda p: p.min(axis=1),
    "running_max": lambda p: p.max(axis=1),
    "range": lambda p: p.max(axis=1) - p.min(axis=1),
    "path_sum": lambda p: p.sum(axis=1),
    "cos_final": lambda p: np.cos(p[:, -1]),
    "min_above_minus_two": lambda p: (p.min(axis=1) >= -2.0).astype(float),
    "corridor_1_5": lambda p: np.all(np.abs(p) <= 1.5, axis=1).astype(float),
}


def many_to_one_exact_batch(law: TableLaw, n: int, functionals: dict, start: float = 0.0,
                            budget: int = DEFAULT_TREE_BUDGET) -> dict[str, ManyToOneResult]:
    """Exact tree and spine sides for several functionals from a single enumeration."""
    paths, probs = enumerate_tree_leaves(law, n, start, budget)
    spos, _, sprob = enumerate_spine_paths(SpineLaw(law), n, budget, start)
    weight = sprob * np.exp(start - spos[:, -1])
    out = {}
    for name, fn in functionals.items():
        tree = math.fsum(probs * fn(paths))
        spine_val = math.fsum(weight * fn(spos[:, 1:]))
        out[name] = ManyToOneResult(spine_val, tree, spine_val)
    return out


# --------------------------------------------------------------------------
# Y and Z functionals of corridor-confined spine paths


def _y_log_terms(pos, lo, hi):
    """log of sum_k e^{-S_k} 1{S_k >= hi_k, S_j in [lo_j, hi_j] for j < k} per path."""
    inside = (pos >= lo) & (pos <= hi)
    alive_before = np.ones_like(inside)
    alive_before[:, 1:] = np.logical_and.accumulate(inside[:, :-1], axis=1)
    hit = alive_before[:, 1:] & (pos[:, 1:] >= hi[1:])
    terms = np.where(hit, -pos[:, 1:], -np.inf)
    return logsumexp(terms, axis=1)


def _z_log_terms(pos, xi, lo, hi, tlo, thi, xi_cap):
    ok = np.all((pos >= lo) & (pos <= hi), axis=1)
    ok &= (pos[:, -1] >= tlo) & (pos[:, -1] <= thi)
    if xi_cap is not None:
        ok &= np.all(xi <= xi_cap, axis=1)
    return np.where(ok, -pos[:, -1], -np.inf)


def _check_profile_start(profile: BarrierProfile):
    lo0, hi0 = profile.lower(np.zeros(1))[0], profile.upper(np.zeros(1))[0]
    if not lo0 <= 0.0 <= hi0:
        raise ValueError("need f_0 <= 0 <= g_0")


def _run_functional(sl, n, reps, rng, mode, terms_fn, chunk, budget):
    if mode == "exact":
        pos, xi, probs = enumerate_spine_paths(sl, n, budget)
        log_t = terms_fn(pos, xi)
        return float(probs @ np.exp(log_t))
    if rng is None:
        raise ValueError("mc mode needs an rng")
    out = []
    for done in range(0, reps, chunk):
        m = min(chunk, reps - done)
        pos, xi = sample_spine_paths(sl, n, m, rng)
        out.append(terms_fn(pos, xi))
    return log_mean_estimate(np.concatenate(out))


def estimate_EY(sl: SpineLaw, profile: BarrierProfile, n: int, reps: int = 100_000,
                rng: np.random.Generator | None = None, mode: str = "mc",
                chunk: int = 20_000, budget: int = DEFAULT_TREE_BUDGET):
    """E[Y_n]: expected number of individuals that first leave the corridor through its top.

    Returns an :class:`Estimate` (mc) or a float (exact).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    _check_profile_start(profile)
    lo, hi = profile.corridor(n, n ** (1 / 3))
    return _run_functional(sl, n, reps, rng, mode, lambda p, x: _y_log_terms(p, lo, hi),
                           chunk, budget)


def estimate_EZ(sl: SpineLaw, profile: BarrierProfile, x: float, y: float, n: int,
                reps: int = 100_000, rng: np.random.Generator | None = None,
                mode: str = "mc", xi_cap: float | None = None, chunk: int = 20_000,
                budget: int = DEFAULT_TREE_BUDGET):
    """E[Z_n(x, y)]: expected number of generation-n individuals that stayed in the corridor
    and end in ``[x n^(1/3), y n^(1/3)]``.

    ``xi_cap`` (delta) additionally requires ``xi(w_j) <= delta n^(1/3)`` along the path.
    """
    if x > y:
        raise ValueError(f"invalid target interval: x={x} > y={y}")
    if n < 1:
        raise ValueError("n must be at least 1")
    _check_profile_start(profile)
    if x == y:
        return 0.0 if mode == "exact" else Estimate(0.0, 0.0, 0.0, 0.0, 0, 0, -math.inf)
    f1, g1 = profile.lower(np.ones(1))[0], profile.upper(np.ones(1))[0]
    if x < f1 - 1e-12 or y > g1 + 1e-12:
        raise ValueError("target interval must lie inside [f_1, g_1]")
    scale = n ** (1 / 3)
    lo, hi = profile.corridor(n, scale)
    tlo, thi = outward(x * scale, y * scale)
    cap = None if xi_cap is None else xi_cap * scale
    return _run_functional(sl, n, reps, rng, mode,
                           lambda p, m: _z_log_terms(p, m, lo, hi, tlo, thi, cap),
                           chunk, budget)
