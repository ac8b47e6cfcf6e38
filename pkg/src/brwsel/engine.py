"""Forward simulation of the branching random walk under killing and selection.

Populations are kept sorted in descending order, so the parent of rank ``j``
always reads the ``j``-th block of a generation's displacement draws. Running
two processes on the same draws is then the rank coupling under which the
domination order is preserved.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from ._rng import root_key
from .curves import cubic_constant, phi_inverse
from .laws import ReproductionLaw, sigma2_of
from .profiles import BarrierProfile, as_function, outward
from .stats import Estimate, proportion

DEFAULT_CAP = 50_000_000


class CapacityOverflowError(RuntimeError):
    def __init__(self, generation: int, size: int, cap: int):
        super().__init__(f"population of {size} exceeds capacity cap {cap} at generation {generation}")
        self.generation = generation


class IncompatibleRegimesError(ValueError):
    """The two regimes of a coupled run cannot be ordered."""


# --------------------------------------------------------------------------
# populations


def _desc(x: np.ndarray) -> np.ndarray:
    return np.sort(np.asarray(x, dtype=float))[::-1].copy()


@dataclass
class Population:
    positions: np.ndarray
    generation: int = 0
    capacity_cap: int | None = DEFAULT_CAP

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.size > 1 and np.any(pos[1:] > pos[:-1]):
            pos = _desc(pos)
        self.positions = pos
        if self.capacity_cap is not None and pos.size > self.capacity_cap:
            raise CapacityOverflowError(self.generation, pos.size, self.capacity_cap)

    @classmethod
    def founders(cls, count: int, at: float = 0.0, cap: int | None = DEFAULT_CAP) -> "Population":
        return cls(np.full(int(count), float(at)), 0, cap)

    @property
    def size(self) -> int:
        return int(self.positions.size)

    def __len__(self) -> int:
        return self.size


def dominates(a, b) -> bool:
    """True iff ``a`` is below ``b`` in the domination order.

    That is, every threshold has at least as many ``b`` particles above it as
    ``a`` particles. Accepts populations or arrays.
    """
    a = _desc(a.positions if isinstance(a, Population) else a)
    b = _desc(b.positions if isinstance(b, Population) else b)
    if a.size > b.size:
        return False
    return bool(np.all(a <= b[:a.size]))


# --------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class KillingBoundary:
    """Kill at generation k every particle below ``horizon^(1/3) f(k / horizon)``."""

    f: object
    horizon: int
    kind = "killing"

    def threshold(self, k: int) -> float:
        n = self.horizon
        lo, _ = outward(n ** (1 / 3) * as_function(self.f)(np.array([k / n]))[0], np.inf)
        return float(lo)


@dataclass(frozen=True)
class SlopedLine:
    """Kill at generation j every particle below ``-eps * j``."""

    eps: float
    kind = "killing"

    def threshold(self, k: int) -> float:
        return -self.eps * k


@dataclass(frozen=True)
class TopCount:
    """Keep the ``cap(k)`` rightmost children at generation k."""

    cap: object
    kind = "count"

    def count(self, k: int) -> int:
        c = self.cap(k) if callable(self.cap) else self.cap
        return int(c)


@dataclass(frozen=True)
class Profile:
    """Keep ``floor(exp(n^(1/3) h(k/n)))`` rightmost; start from that many founders at 0."""

    h: object
    horizon: int
    kind = "count"

    def count(self, k: int) -> int:
        n = self.horizon
        e = n ** (1 / 3) * float(as_function(self.h)(np.array([k / n]))[0])
        if e > math.log(2.0**62):
            raise OverflowError(f"profile count exp({e}) does not fit in 64 bits")
        return int(math.floor(math.exp(e)))

    def founders(self) -> int:
        return self.count(0)


Regime = KillingBoundary | SlopedLine | TopCount | Profile


def select_top(values: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``m`` largest values; ties at the cut-off broken uniformly at random.

    Linear time (partition, no full sort).
    """
    values = np.asarray(values)
    size = values.size
    if m >= size:
        return np.arange(size)
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    cut = np.partition(values, size - m)[size - m]
    above = np.flatnonzero(values > cut)
    equal = np.flatnonzero(values == cut)
    need = m - above.size
    if need < equal.size:
        equal = rng.choice(equal, size=need, replace=False)
    return np.concatenate([above, equal])


def _survivors(children: np.ndarray, regime, k: int, rng) -> np.ndarray:
    if regime.kind == "killing":
        return children[children >= regime.threshold(k)]
    return children[select_top(children, regime.count(k), rng)]


def apply_regime(pop: Population, regime, k: int, rng: np.random.Generator) -> Population:
    """Survivors of generation ``k`` (closed threshold for killing, top-count with tie-break)."""
    return Population(_desc(_survivors(pop.positions, regime, k, rng)), k, pop.capacity_cap)


def _offspring(positions, law, rng, cap, generation):
    counts, disps = law.sample(rng, positions.size)
    total = disps.size
    if cap is not None and total > cap:
        raise CapacityOverflowError(generation, total, cap)
    return np.repeat(positions, counts) + disps


def step(pop: Population, law: ReproductionLaw, rng: np.random.Generator) -> Population:
    """Replace every particle by its children; the result is sorted."""
    if pop.size == 0:
        raise ValueError("cannot step an empty population")
    kids = _offspring(pop.positions, law, rng, pop.capacity_cap, pop.generation + 1)
    return Population(_desc(kids), pop.generation + 1, pop.capacity_cap)


# --------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class GenerationRecord:
    k: int
    count: int
    min_pos: float | None
    max_pos: float | None


def _record(k: int, pos: np.ndarray) -> GenerationRecord:
    if pos.size == 0:
        return GenerationRecord(k, 0, None, None)
    return GenerationRecord(k, int(pos.size), float(pos[-1]), float(pos[0]))


@dataclass
class RunStats:
    records: list[GenerationRecord]
    survived_to_horizon: bool
    rng_seed: object = None

    @property
    def final(self) -> GenerationRecord:
        return self.records[-1]

    def to_records(self) -> list[dict]:
        return [{**asdict(r), "seed": self.rng_seed} for r in self.records]

    def to_jsonl(self, path, extra: dict | None = None) -> None:
        with open(path, "a") as fh:
            for rec in self.to_records():
                fh.write(json.dumps({**(extra or {}), **rec}, sort_keys=True) + "\n")


def write_summary_csv(runs: Sequence[RunStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "horizon", "survived", "final_count", "final_min", "final_max"])
        for r in runs:
            f = r.final
            w.writerow([r.rng_seed, f.k, int(r.survived_to_horizon), f.count, f.min_pos, f.max_pos])


def _initial(regime, initial, cap):
    if initial is not None:
        return initial.positions if isinstance(initial, Population) else _desc(initial)
    if isinstance(regime, Profile):
        return np.zeros(regime.founders())
    return np.zeros(1)


def run(regime, law: ReproductionLaw, n: int, rng: np.random.Generator,
        initial=None, cap: int | None = DEFAULT_CAP, seed_token=None) -> RunStats:
    """Simulate ``n`` generations under one regime and record per-generation statistics."""
    pos = _desc(_survivors(_initial(regime, initial, cap), regime, 0, rng))
    records = [_record(0, pos)]
    for k in range(1, n + 1):
        if pos.size:
            kids = _offspring(pos, law, rng, cap, k)
            pos = _desc(_survivors(kids, regime, k, rng))
        records.append(_record(k, pos))
    return RunStats(records, bool(pos.size > 0), seed_token)


def _check_coupling(a, b, n):
    if a.kind != b.kind:
        raise IncompatibleRegimesError("cannot couple a killing regime with a selection regime")
    for k in range(n + 1):
        if a.kind == "count":
            if a.count(k) > b.count(k):
                raise IncompatibleRegimesError(
                    f"capA({k})={a.count(k)} exceeds capB({k})={b.count(k)}")
        elif a.threshold(k) < b.threshold(k):
            raise IncompatibleRegimesError(f"killing level of A is below that of B at generation {k}")


@dataclass
class CoupledRun:
    a: RunStats
    b: RunStats
    order_held: list[bool]

    @property
    def violations(self) -> int:
        return sum(not x for x in self.order_held)


def coupled_run(regime_a, regime_b, law: ReproductionLaw, n: int, rng: np.random.Generator,
                initial_a=None, initial_b=None, cap: int | None = DEFAULT_CAP) -> CoupledRun:
    """Run two regimes on shared rank-indexed displacement blocks.

    The parent of rank ``j`` in either process reads block ``j`` of the
    generation's draws. Requires ``capA <= capB`` (selection) or a killing
    level of A never below that of B, and a dominated initial pair.
    """
    _check_coupling(regime_a, regime_b, n)
    pa = _initial(regime_a, initial_a, cap)
    pb = _initial(regime_b, initial_b, cap)
    if not dominates(pa, pb):
        raise IncompatibleRegimesError("initial population A is not dominated by B")
    pa = _desc(_survivors(pa, regime_a, 0, rng))
    pb = _desc(_survivors(pb, regime_b, 0, rng))
    rec_a, rec_b = [_record(0, pa)], [_record(0, pb)]
    held = [dominates(pa, pb)]
    for k in range(1, n + 1):
        r = max(pa.size, pb.size)
        if r:
            counts, disps = law.sample(rng, r)
            ends = np.cumsum(counts)
            if cap is not None and ends[-1] > cap:
                raise CapacityOverflowError(k, int(ends[-1]), cap)
            ka = np.repeat(pa, counts[:pa.size]) + disps[:ends[pa.size - 1] if pa.size else 0]
            kb = np.repeat(pb, counts[:pb.size]) + disps[:ends[pb.size - 1] if pb.size else 0]
            pa = _desc(_survivors(ka, regime_a, k, rng))
            pb = _desc(_survivors(kb, regime_b, k, rng))
        rec_a.append(_record(k, pa))
        rec_b.append(_record(k, pb))
        held.append(dominates(pa, pb))
    return CoupledRun(RunStats(rec_a, bool(pa.size)), RunStats(rec_b, bool(pb.size)), held)


# --------------------------------------------------------------------------
# survival of killed processes

_MAX_BATCH = 1 << 20


def _survives_search(positions: np.ndarray, depth: int, thresholds: np.ndarray, law, n: int,
                     rng, batch: int, cap: int | None) -> bool:
    """Exact test of whether some particle of ``positions`` (at ``depth``) has a
    descendant alive at generation ``n``.

    Deepest pending nodes are expanded first, up to ``batch`` at a time and
    highest first; every node is expanded at most once, so the answer has the
    law of the full simulation. A narrow front drifts below the killing line,
    so each dead end doubles ``batch``.
    """
    pending: dict[int, list[np.ndarray]] = {depth: [positions]}
    stored = positions.size
    while pending:
        g = max(pending)
        pool = np.concatenate(pending.pop(g))
        if pool.size > batch:
            order = np.argpartition(-pool, batch - 1)
            take, rest = pool[order[:batch]], pool[order[batch:]]
            pending[g] = [rest]
        else:
            take = pool
        stored -= take.size
        kids = _offspring(take, law, rng, None, g + 1)
        kids = kids[kids >= thresholds[g + 1]]
        if kids.size == 0:
            batch = min(2 * batch, _MAX_BATCH)
            continue
        if g + 1 == n:
            return True
        pending.setdefault(g + 1, []).append(kids)
        stored += kids.size
        if cap is not None and stored > cap:
            raise CapacityOverflowError(g + 1, stored, cap)
    return False


def survival_count(regime, law: ReproductionLaw, n: int, reps: int,
                   rng: np.random.Generator, heavy: int = 2_000, batch: int = 1024,
                   cap: int | None = DEFAULT_CAP) -> int:
    """Number of replicas (out of ``reps``) with a particle alive at generation ``n``.

    Light replicas advance together generation by generation. A replica whose
    population exceeds ``heavy`` is finished by an exact depth-first search
    that stops at the first particle reaching generation ``n``.
    """
    if regime.kind != "killing":
        raise ValueError("survival_count applies to killing regimes")
    thr = np.array([regime.threshold(k) for k in range(n + 1)])
    if n == 0:
        return reps if 0.0 >= thr[0] else 0
    owner = np.arange(reps)
    pos = np.zeros(reps)
    keep = pos >= thr[0]
    owner, pos = owner[keep], pos[keep]
    survived = 0
    heavy_list = []
    for k in range(1, n + 1):
        if pos.size == 0:
            break
        counts, disps = law.sample(rng, pos.size)
        if cap is not None and disps.size > cap:
            raise CapacityOverflowError(k, disps.size, cap)
        owner = np.repeat(owner, counts)
        pos = np.repeat(pos, counts) + disps
        alive = pos >= thr[k]
        owner, pos = owner[alive], pos[alive]
        if k == n:
            survived += np.unique(owner).size
            break
        sizes = np.bincount(owner, minlength=reps)
        big = np.flatnonzero(sizes > heavy)
        if big.size:
            mask = np.isin(owner, big)
            for r in big:
                heavy_list.append((k, pos[owner == r]))
            owner, pos = owner[~mask], pos[~mask]
    for k, p in heavy_list:
        survived += _survives_search(p, k, thr, law, n, rng, batch, cap)
    return survived


def survival_probability(regime, law: ReproductionLaw, n: int, reps: int,
                         rng: np.random.Generator, **kw) -> Estimate:
    return proportion(survival_count(regime, law, n, reps, rng, **kw), reps)


@dataclass(frozen=True)
class ScalingRow:
    eps: float
    n: int
    theta: float
    rho: float
    ci_low: float
    ci_high: float
    hits: int
    reps: int
    eps_half_log_rho: float
    scaled_log_rho: float
    scaled_ci_low: float
    scaled_ci_high: float
    bracket_low: float
    bracket_high: float
    proof_bracket_high: float
    zero_survival: bool


def scaling_row(eps: float, n: int, hits: int, reps: int, sigma2: float) -> ScalingRow:
    est = proportion(hits, reps)
    theta = eps * n ** (2 / 3)
    s = n ** (1 / 3)
    lg = math.log(est.value) if hits else -math.inf
    sigma = math.sqrt(sigma2)
    return ScalingRow(
        eps, n, theta, est.value, est.ci_low, est.ci_high, hits, reps,
        math.sqrt(eps) * lg, lg / s,
        math.log(est.ci_low) / s if est.ci_low > 0 else -math.inf,
        math.log(est.ci_high) / s,
        -math.pi * sigma / math.sqrt(2 * theta), phi_inverse(theta, sigma2),
        -phi_inverse(theta, sigma2), hits == 0)


def survival_scaling_experiment(law: ReproductionLaw, eps_list: Sequence[float],
                                n_rule: Callable[[float], int] | None = None,
                                reps: int = 10_000, rng: np.random.Generator | None = None,
                                sigma2: float | None = None, **kw) -> list[ScalingRow]:
    """Survival frequency of the walk killed below ``-eps j`` up to generation ``n(eps)``.

    The default rule ``n = round(eps^(-3/2))`` keeps ``theta = eps n^(2/3)`` near 1.
    Each row carries the two-sided bracket ``[-pi sigma / sqrt(2 theta), phi^{-1}(theta)]``
    and the bound ``-phi^{-1}(theta)`` that the survival argument itself produces.
    """
    if rng is None:
        raise ValueError("rng required")
    s2 = sigma2_of(law) if sigma2 is None else sigma2
    rule = n_rule or (lambda e: max(1, int(round(e ** -1.5))))
    rows = []
    for eps in eps_list:
        n = rule(eps)
        hits = survival_count(SlopedLine(eps), law, n, reps, rng, **kw)
        rows.append(scaling_row(eps, n, hits, reps, s2))
    return rows


# --------------------------------------------------------------------------
# consistent maximal displacement


def consistent_min_displacement(law: ReproductionLaw, n: int,
                                rng: np.random.Generator | None = None, *,
                                tree_seed: int | None = None, bar_step: float = 0.5,
                                start_bar: float | None = None,
                                cap: int | None = DEFAULT_CAP) -> float:
    """max over generation-n individuals of the minimum position along their lineage.

    The tree is generated from node keys, so ``tree_seed`` fixes it no matter
    how much of it is explored. For a bar ``b`` one forward pass expands every
    node whose running minimum is at least ``b`` and drops the rest. If some
    generation-n node survives, the largest running minimum among them is the
    exact answer (every competing lineage was kept). Otherwise the bar is
    lowered by ``bar_step`` and the pass repeated on the same tree.
    """
    if tree_seed is None:
        if rng is None:
            raise ValueError("need rng or tree_seed")
        tree_seed = int(rng.integers(0, 2**63))
    if n == 0:
        return 0.0
    if start_bar is None:
        start_bar = min(0.0, -cubic_constant(sigma2_of(law)) * n ** (1 / 3) + 1.0)
    bar = start_bar
    while True:
        best = _killed_pass(law, n, tree_seed, bar, cap)
        if best is not None:
            return best
        bar -= bar_step


def _killed_pass(law, n, tree_seed, bar, cap):
    """Largest running minimum at generation n among lineages kept above ``bar``, or None."""
    pos, rmin, keys = np.zeros(1), np.zeros(1), root_key(tree_seed)
    if bar > 0.0:
        return None
    for k in range(1, n + 1):
        counts, disps, ck = law.sample_keyed(keys)
        if cap is not None and disps.size > cap:
            raise CapacityOverflowError(k, disps.size, cap)
        cpos = np.repeat(pos, counts) + disps
        keep = cpos >= bar
        pos = cpos[keep]
        rmin = np.minimum(np.repeat(rmin, counts)[keep], pos)
        keys = ck[keep]
        if pos.size == 0:
            return None
    return float(rmin.max())


# --------------------------------------------------------------------------
# direct corridor counts (cross-check for the spine estimators)


def corridor_count(law: ReproductionLaw, profile: BarrierProfile, x: float, y: float, n: int,
                   reps: int, rng: np.random.Generator, cap: int | None = DEFAULT_CAP) -> Estimate:
    """Mean over replicas of the number of generation-n individuals whose lineage stayed in
    the corridor ``[n^(1/3) f(j/n), n^(1/3) g(j/n)]`` and ends in ``[x, y] n^(1/3)``."""
    s = n ** (1 / 3)
    lo, hi = profile.corridor(n, s)
    tlo, thi = outward(x * s, y * s)
    owner = np.arange(reps)
    pos = np.zeros(reps)
    keep = (pos >= lo[0]) & (pos <= hi[0])
    owner, pos = owner[keep], pos[keep]
    for k in range(1, n + 1):
        if pos.size == 0:
            break
        counts, disps = law.sample(rng, pos.size)
        if cap is not None and disps.size > cap:
            raise CapacityOverflowError(k, disps.size, cap)
        owner = np.repeat(owner, counts)
        pos = np.repeat(pos, counts) + disps
        ok = (pos >= lo[k]) & (pos <= hi[k])
        owner, pos = owner[ok], pos[ok]
    in_t = (pos >= tlo) & (pos <= thi)
    per_rep = np.bincount(owner[in_t], minlength=reps).astype(float)
    m = float(per_rep.mean())
    se = float(per_rep.std(ddof=1) / math.sqrt(reps))
    return Estimate(m, se, m - 1.96 * se, m + 1.96 * se, reps, int(np.count_nonzero(per_rep)),
                    math.log(m) if m > 0 else -math.inf)


def selection_constant_fixed(a: float, sigma2: float) -> dict:
    """Reference constants for keeping ``floor(exp(a n^(1/3)))`` particles.

    ``max``: the front M_n / n^(1/3) -> -3 pi^2 sigma2 / (2 a^2).
    ``min``: the proof-derived floor m_n / n^(1/3) >= -(a + 3 pi^2 sigma2 / (2 a^2)).
    """
    front = -3 * math.pi**2 * sigma2 / (2 * a * a)
    return {"max": front, "min": front - a}
