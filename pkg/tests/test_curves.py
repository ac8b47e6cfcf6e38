import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwsel.curves import (BracketError, compute_lambda, cubic_constant, curve_residual, phi,
                           phi_inverse, rate_constant, selection_curves, solve_g)

C1 = 1.5 * math.pi**2


def closed_form(c, x, sigma2, t):
    """Constant lower curve: (g - c)^3 decreases linearly at rate 3 pi^2 sigma2 / 2."""
    return c + np.cbrt((x - c) ** 3 - 3 * rate_constant(sigma2) * np.asarray(t))


class TestSolveG:
    def test_closed_form_from_zero(self):
        cur = solve_g(0.0, -1.0, 1.0)
        t_x = 2 / (3 * math.pi**2)
        assert cur.touched
        np.testing.assert_allclose(cur.t_max, t_x, rtol=1e-8)
        np.testing.assert_allclose(t_x, 0.0675474, rtol=1e-5)
        t = np.linspace(0, 0.9 * t_x, 400)
        np.testing.assert_allclose(cur(t), -1 + np.cbrt(1 - C1 * t), atol=1e-8)

    @pytest.mark.parametrize("sigma2", [0.5, 1.0, 2.0])
    def test_endpoint_touch(self, sigma2):
        cur = solve_g(-1.0 + cubic_constant(sigma2), -1.0, sigma2)
        assert abs(cur.t_max - 1.0) < 1e-6

    def test_large_start(self):
        cur = solve_g(100.0, -1.0, 1.0)
        assert not cur.touched
        g1 = float(cur(1.0)[0])
        np.testing.assert_allclose(g1, closed_form(-1.0, 100.0, 1.0, 1.0), rtol=1e-10)
        # near-constant width 101: H_1 ~ (pi^2 / 2) / 101^2
        np.testing.assert_allclose(g1, 100.0 - rate_constant(1.0) / 101**2, rtol=1e-6)

    def test_rejects_start_below_curve(self):
        with pytest.raises(ValueError):
            solve_g(-1.0, -1.0, 1.0)

    def test_residual_and_shape(self):
        f = lambda t: -1.0 + 0.5 * np.sin(3 * np.asarray(t))
        for x in (0.0, 1.5, 3.0):
            cur = solve_g(x, f, 1.0)
            assert curve_residual(cur) < 1e-9
            inner = cur.t[cur.t < cur.t_max * 0.999]
            assert np.all(cur(inner) > cur.lower(inner))
            assert np.all(np.diff(cur.values) <= 1e-15)

    def test_csv_export(self, tmp_path):
        cur = solve_g(0.5, -1.0, 1.0)
        cur.to_csv(tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "t,f_t,g_t" and len(lines) == cur.t.size + 1

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.05, 4.0), st.floats(0.01, 2.0))
    def test_monotone_in_start(self, x, dx):
        f = lambda t: -0.5 * np.asarray(t)
        a, b = solve_g(x, f, 1.0), solve_g(x + dx, f, 1.0)
        assert b.t_max >= a.t_max
        t = np.linspace(0, a.t_max, 50)
        assert np.all(b(t) >= a(t) - 1e-10)


class TestLambda:
    @pytest.mark.parametrize("c", [-3.0, -1.0, -0.1])
    @pytest.mark.parametrize("sigma2", [0.5, 1.0, 2.0])
    def test_constant_curve(self, c, sigma2):
        res = compute_lambda(c, sigma2)
        assert res.bracket[1] - res.bracket[0] < 1e-6
        np.testing.assert_allclose(res.value, c + cubic_constant(sigma2), atol=1e-6)

    def test_zero_threshold(self):
        c = cubic_constant(1.0)
        np.testing.assert_allclose(c**3, C1, rtol=1e-14)
        np.testing.assert_allclose(c, 2.455446, atol=1e-6)
        assert abs(compute_lambda(-c, 1.0).value) < 1e-6

    def test_scaling_with_variance(self):
        base = compute_lambda(0.0, 1.0).value
        for s2 in (0.5, 2.0):
            np.testing.assert_allclose(compute_lambda(0.0, s2).value, base * s2 ** (1 / 3),
                                       atol=2e-6)

    def test_bracket_failure(self):
        with pytest.raises(BracketError, match="scan"):
            compute_lambda(0.0, 1.0, lower_offset=10.0)

    def test_critical_curve_returned(self):
        res = compute_lambda(lambda t: -np.asarray(t), 1.0)
        assert not res.curve.touched and res.curve.start >= res.value


class TestPhi:
    def test_root(self):
        for s2 in (0.5, 1.0, 2.0):
            assert abs(phi(cubic_constant(s2), s2)) < 1e-12

    def test_value_at_pi(self):
        np.testing.assert_allclose(phi(math.pi, 1.0), 0.5 - math.pi / 3, rtol=1e-14)

    def test_inverse_large_theta(self):
        theta = 1e4
        val = math.sqrt(theta) * phi_inverse(theta, 1.0)
        limit = math.pi / math.sqrt(2)
        np.testing.assert_allclose(limit, 2.2214, atol=1e-4)
        assert abs(val / limit - 1) < 0.02

    def test_inverse_rejects(self):
        with pytest.raises(ValueError):
            phi_inverse(0.0, 1.0)
        with pytest.raises(ValueError):
            phi(0.0, 1.0)

    @given(st.floats(1e-3, 1e6), st.sampled_from([0.5, 1.0, 2.0]))
    def test_inverse_residual(self, theta, s2):
        lam = phi_inverse(theta, s2)
        assert 0 < lam < cubic_constant(s2)
        assert abs(phi(lam, s2) - theta) <= 1e-12 * max(1.0, theta)


class TestSelectionCurves:
    def test_constant_width(self):
        pair = selection_curves(2.0, 1.0)
        t = np.linspace(0, 1, 33)
        g = 2.0 - rate_constant(1.0) / 4.0 * t
        np.testing.assert_allclose(pair.g(t), g, atol=1e-12)
        np.testing.assert_allclose(pair.f(t), g - 2.0, atol=1e-12)

    def test_cube_root_width(self):
        pair = selection_curves(lambda t: (np.asarray(t) + 0.1) ** (1 / 3), 1.0)
        closed = 3 * (1.1 ** (1 / 3) - 0.1 ** (1 / 3))
        np.testing.assert_allclose(closed, 1.70436, atol=1e-5)
        np.testing.assert_allclose(pair.integral(1.0), closed, rtol=1e-10)
        t = np.linspace(0, 1, 257)
        exact = 3 * ((t + 0.1) ** (1 / 3) - 0.1 ** (1 / 3))
        np.testing.assert_allclose(pair.g(t) + rate_constant(1.0) * exact, pair.h0, atol=1e-9)
        np.testing.assert_allclose(pair.f(t),
                                   pair.h0 - (t + 0.1) ** (1 / 3) - rate_constant(1.0) * exact,
                                   atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.3, 2.0), st.floats(-0.25, 0.25), st.floats(0.5, 6.0))
    def test_gap_equals_width(self, a, b, w):
        h = lambda t: a + b * np.sin(w * np.asarray(t))
        pair = selection_curves(h, 1.0)
        t = pair.knots
        np.testing.assert_allclose(pair.g(t) - pair.f(t), h(t), atol=1e-10)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            selection_curves(lambda t: np.asarray(t) - 0.5, 1.0)

    def test_profile(self):
        prof = selection_curves(1.0, 1.0).profile
        np.testing.assert_allclose(prof.width(np.array([0.3])), [1.0], atol=1e-12)
