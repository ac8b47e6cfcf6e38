"""Barrier profiles: a pair of functions (f, g) on [0, 1] with f < g."""

from __future__ import annotations

from typing import Callable

import numpy as np

MIN_TABLE_KNOTS = 256
_OUTWARD = 8 * np.finfo(float).eps


def as_function(f) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a constant, a callable, or a profile's lower curve as a vectorised function."""
    if isinstance(f, BarrierProfile):
        return f.lower
    if callable(f):
        def fn(t, _f=f):
            t = np.asarray(t, dtype=float)
            return np.broadcast_to(np.asarray(_f(t), dtype=float), t.shape).copy()
        return fn
    c = float(f)

    def const(t, _c=c):
        return np.full(np.shape(t), _c)

    const.constant = c
    return const


def as_scalar_function(f) -> Callable[[float], float]:
    """Cheap scalar evaluation for ODE right-hand sides."""
    fn = as_function(f)
    if hasattr(fn, "constant"):
        c = fn.constant
        return lambda t: c
    raw = f.lower if isinstance(f, BarrierProfile) else f
    return lambda t: float(raw(np.float64(t)))


class BarrierProfile:
    """Lower curve ``f`` and upper curve ``g`` on [0, 1].

    ``upper`` may be ``+inf`` (no upper barrier). ``knots`` lists interior
    points where the curves may have kinks; quadrature splits there.
    """

    def __init__(self, lower, upper=np.inf, tag: str = "custom", knots=None):
        self.lower = as_function(lower)
        self.upper = as_function(upper)
        self.tag = tag
        self.knots = None if knots is None else np.asarray(knots, dtype=float)

    @classmethod
    def constant(cls, lo: float, hi: float = np.inf) -> "BarrierProfile":
        if not lo < hi:
            raise ValueError("need lower < upper")
        return cls(float(lo), float(hi), tag=f"constant({lo},{hi})")

    @classmethod
    def table(cls, t, lo, hi) -> "BarrierProfile":
        """Piecewise-linear profile through the given knots."""
        t = np.asarray(t, dtype=float)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if t.size < MIN_TABLE_KNOTS:
            raise ValueError(f"table profiles need at least {MIN_TABLE_KNOTS} knots")
        if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("knots must increase from 0 to 1")
        return cls(lambda s: np.interp(s, t, lo), lambda s: np.interp(s, t, hi),
                   tag="table", knots=t)

    def width(self, t):
        return self.upper(t) - self.lower(t)

    def check(self, grid: int = 1025) -> None:
        t = np.linspace(0.0, 1.0, grid)
        w = self.width(t)
        if np.any(w[1:-1] <= 0):
            raise ValueError("profile has lower >= upper at interior points")

    def corridor(self, n: int, a_n: float) -> tuple[np.ndarray, np.ndarray]:
        """Scaled bounds ``a_n f(j/n)``, ``a_n g(j/n)`` for j = 0..n, rounded outward."""
        t = np.arange(n + 1) / n if n > 0 else np.zeros(1)
        return outward(self.lower(t) * a_n, self.upper(t) * a_n)

    def __repr__(self) -> str:
        return f"BarrierProfile({self.tag})"


def outward(lo, hi):
    """Widen closed bounds by a few ulps so lattice points on the barrier stay inside."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    lo = lo - _OUTWARD * np.maximum(1.0, np.abs(lo))
    hi = np.where(np.isfinite(hi), hi + _OUTWARD * np.maximum(1.0, np.abs(hi)), hi)
    return lo, hi
