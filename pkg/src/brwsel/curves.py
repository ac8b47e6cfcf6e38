"""Critical curves of the killed walk, the survival threshold, and selection-curve pairs.

With ``c = pi^2 sigma2 / 2`` the critical curve started at ``x`` solves

    g'_t = -c / (g_t - f_t)^2,    g_0 = x,

until it meets ``f`` at the touch time ``t_x``. The threshold ``lambda`` is the
smallest ``x`` whose curve lasts until ``t = 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .profiles import BarrierProfile, as_function, as_scalar_function


class BracketError(ValueError):
    """The threshold bisection could not bracket lambda."""


def rate_constant(sigma2: float) -> float:
    return 0.5 * math.pi**2 * sigma2


def cubic_constant(sigma2: float) -> float:
    """(3 pi^2 sigma2 / 2)^(1/3), the critical width of a constant barrier."""
    return (3.0 * rate_constant(sigma2)) ** (1.0 / 3.0)


@dataclass
class CriticalCurve:
    start: float
    t_max: float
    touched: bool
    t: np.ndarray
    values: np.ndarray
    sigma2: float
    lower: object = field(repr=False)
    _dense: object = field(repr=False, default=None)
    _switch: tuple = field(repr=False, default=None)

    def __call__(self, t):
        """g_t for t in [0, t_max]; the last stretch uses the cubic-root touch model."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 0) or np.any(t > self.t_max * (1 + 1e-14) + 1e-15):
            raise ValueError("t outside [0, t_max]")
        out = np.empty_like(t)
        if self._switch is None:
            out[:] = self._dense(t)[0]
            return out
        t_s, w_s, rate = self._switch
        early = t <= t_s
        out[early] = self._dense(t[early])[0]
        late = ~early
        w3 = np.maximum(w_s**3 - rate * (t[late] - t_s), 0.0)
        out[late] = self.lower(t[late]) + np.cbrt(w3)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "f_t", "g_t"])
            for t, f, g in zip(self.t, self.lower(self.t), self.values):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(g))])


def _derivative(fn, t, h=1e-6):
    a, b = max(t - h, 0.0), min(t + h, 1.0)
    return float((fn(np.array([b]))[0] - fn(np.array([a]))[0]) / (b - a))


def solve_g(x: float, f, sigma2: float, rtol: float = 1e-12, atol: float = 1e-14,
            switch_fraction: float = 1e-3, touch_tol: float = 1e-8,
            table_points: int = 1025) -> CriticalCurve:
    """Integrate the critical-curve ODE from ``g_0 = x`` above the lower curve ``f``.

    Near the touch set the vector field is singular, so once ``g - f`` falls
    below ``switch_fraction * (x - f_0)`` the solution continues with the local
    model in which ``(g - f)^3`` decreases linearly.
    """
    fn = as_function(f)
    fs = as_scalar_function(f)
    c = rate_constant(sigma2)
    f0 = fs(0.0)
    if not x > f0:
        raise ValueError(f"start x={x} must exceed f_0={f0}")
    w_switch = max(switch_fraction * (x - f0), touch_tol)

    def rhs(t, y):
        w = y[0] - fs(t)
        return [-c / (w * w)]

    def near_touch(t, y):
        return y[0] - fs(t) - w_switch

    near_touch.terminal = True
    near_touch.direction = -1
    sol = solve_ivp(rhs, (0.0, 1.0), [x], method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True, events=near_touch)
    if sol.status < 0:
        raise ArithmeticError(f"critical-curve integration failed: {sol.message}")
    switch = None
    touched = False
    t_max = 1.0
    if sol.status == 1:
        t_s = float(sol.t_events[0][0])
        w_s = float(sol.y_events[0][0][0] - fs(t_s))
        rate = 3.0 * c + 3.0 * w_s * w_s * _derivative(fn, t_s)
        if rate <= 0:
            raise ArithmeticError("touch model degenerate: the gap is not closing")
        t_touch = t_s + w_s**3 / rate
        switch = (t_s, w_s, rate)
        if t_touch < 1.0:
            touched, t_max = True, t_touch
    t_tab = np.linspace(0.0, t_max, table_points)
    curve = CriticalCurve(float(x), t_max, touched, t_tab, np.empty(0), sigma2, fn,
                          sol.sol, switch)
    curve.values = curve(t_tab)
    return curve


def curve_residual(curve: CriticalCurve, points: int = 257) -> float:
    """max_t |g_t - g_0 + H_t(f, g)| re-integrated with adaptive quadrature."""
    c = rate_constant(curve.sigma2)
    grid = np.linspace(0.0, curve.t_max, points)
    if curve.touched:
        grid = grid[:-1]

    def integrand(s):
        s_arr = np.array([s])
        return 1.0 / float(curve(s_arr)[0] - curve.lower(s_arr)[0]) ** 2

    pieces = [quad(integrand, a, b, epsabs=0.0, epsrel=1e-13, limit=200)[0]
              for a, b in zip(grid[:-1], grid[1:])]
    h = c * np.concatenate([[0.0], np.cumsum(pieces)])
    return float(np.max(np.abs(curve(grid) - curve.start + h)))


@dataclass
class LambdaResult:
    value: float
    bracket: tuple[float, float]
    curve: CriticalCurve
    scan: list = field(repr=False, default_factory=list)


def compute_lambda(f, sigma2: float, tol: float = 1e-7, lower_offset: float = 1e-6) -> LambdaResult:
    """Smallest start whose critical curve survives to t = 1, by bisection.

    The bracket is ``[f_0 + lower_offset, f_max + 10 (3 pi^2 sigma2 / 2)^(1/3)]``.
    The returned value is the midpoint of the final bracket (width < ``tol``).
    """
    grid = np.linspace(0.0, 1.0, 1025)
    fv = as_function(f)(grid)
    lo = float(fv[0]) + lower_offset
    hi = float(fv.max()) + 10.0 * cubic_constant(sigma2)
    scan = []

    def survives(x):
        # the predicate only needs touch/no-touch, so a looser integration suffices
        cur = solve_g(x, f, sigma2, rtol=1e-10, atol=1e-12, table_points=2)
        scan.append((x, cur.t_max))
        return not cur.touched, cur

    ok_lo, _ = survives(lo)
    if ok_lo:
        raise BracketError(f"curve from f_0 + {lower_offset} already survives; scan={scan}")
    ok_hi, _ = survives(hi)
    if not ok_hi:
        raise BracketError(f"curve from X_max={hi} touches f before t=1; scan={scan}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ok, cur = survives(mid)
        if ok:
            hi = mid
        else:
            lo = mid
    return LambdaResult(0.5 * (lo + hi), (lo, hi), solve_g(hi, f, sigma2), scan)


# --------------------------------------------------------------------------


def phi(lam, sigma2: float):
    """pi^2 sigma2 / (2 lam^2) - lam / 3."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("phi needs lam > 0")
    out = rate_constant(sigma2) / lam**2 - lam / 3.0
    return float(out) if out.ndim == 0 else out


def phi_inverse(theta: float, sigma2: float) -> float:
    """The unique lam > 0 with phi(lam) = theta, for theta > 0."""
    if not theta > 0:
        raise ValueError("phi_inverse is defined here for theta > 0")
    c = rate_constant(sigma2)
    hi = cubic_constant(sigma2)
    lo = 0.5 * math.sqrt(c / (theta + hi))
    root = brentq(lambda s: phi(s, sigma2) - theta, lo, hi, xtol=1e-300, rtol=1e-15,
                  maxiter=1000)
    if abs(phi(root, sigma2) - theta) > 1e-12 * max(1.0, theta):
        raise ArithmeticError("phi_inverse residual above tolerance")
    return float(root)


# --------------------------------------------------------------------------


@dataclass
class SelectionCurvePair:
    """f and g built from a positive width profile h, with g - f = h."""

    h: object = field(repr=False)
    sigma2: float
    knots: np.ndarray = field(repr=False)
    _integral: CubicHermiteSpline = field(repr=False)
    h0: float

    def integral(self, t):
        """int_0^t ds / h_s^2."""
        return self._integral(np.asarray(t, dtype=float))

    def g(self, t):
        return self.h0 - rate_constant(self.sigma2) * self.integral(t)

    def f(self, t):
        return self.g(t) - self.h(np.asarray(t, dtype=float))

    @property
    def profile(self) -> BarrierProfile:
        return BarrierProfile(self.f, self.g, tag="selection", knots=self.knots)


def selection_curves(h, sigma2: float, knots: int = 1024) -> SelectionCurvePair:
    hf = as_function(h)
    t = np.linspace(0.0, 1.0, knots + 1)
    fine = np.linspace(0.0, 1.0, 16 * knots + 1)
    if np.any(hf(fine) <= 0) or np.any(hf(t) <= 0):
        raise ValueError("h must be positive on [0, 1]")

    def inv_sq(s):
        return 1.0 / float(hf(np.array([s]))[0]) ** 2

    pieces = [quad(inv_sq, a, b, epsabs=0.0, epsrel=1e-13)[0] for a, b in zip(t[:-1], t[1:])]
    integral = np.concatenate([[0.0], np.cumsum(pieces)])
    spline = CubicHermiteSpline(t, integral, 1.0 / hf(t) ** 2)
    return SelectionCurvePair(hf, sigma2, t, spline, float(hf(np.zeros(1))[0]))
