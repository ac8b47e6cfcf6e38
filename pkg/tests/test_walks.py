import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwsel.profiles import BarrierProfile
from brwsel.walks import (EndpointSingularityWarning, NonIntegrableError, StepLaw,
                          WidthBudgetError, confinement_over_starts, exact_confinement_dp,
                          lattice_corridor, mc_confinement_prob, mogulskii_rate,
                          rate_convergence_report, write_report_csv)


def _brute_force(values, probs, lower, upper, n, start=0):
    total = 0.0
    for steps in itertools.product(range(len(values)), repeat=n):
        pos, p, ok = start, 1.0, lower[0] <= start <= upper[0]
        for j, s in enumerate(steps, start=1):
            pos += values[s]
            p *= probs[s]
            ok &= lower[j] <= pos <= upper[j]
        total += p * ok
    return total


class TestMogulskiiRate:
    def test_zero_time(self):
        assert mogulskii_rate(BarrierProfile.constant(-1, 1), 0.0, 1.0) == 0.0

    def test_constant_width(self):
        np.testing.assert_allclose(mogulskii_rate(BarrierProfile.constant(-1, 1), 1.0, 1.0),
                                   math.pi**2 / 8, rtol=1e-12)

    def test_cube_root_width(self):
        prof = BarrierProfile(0.0, lambda s: (s + 0.1) ** (1 / 3))
        expected = 0.5 * math.pi**2 * 3 * (1.1 ** (1 / 3) - 0.1 ** (1 / 3))
        np.testing.assert_allclose(mogulskii_rate(prof, 1.0, 1.0), expected, rtol=1e-8)
        np.testing.assert_allclose(expected, 8.410697718957, rtol=1e-12)

    def test_endpoint_singularity(self):
        prof = BarrierProfile(0.0, lambda s: s ** 0.25)
        with pytest.warns(EndpointSingularityWarning):
            val = mogulskii_rate(prof, 1.0, 1.0)
        np.testing.assert_allclose(val, 0.5 * math.pi**2 * 2.0, rtol=1e-6)

    def test_non_integrable(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EndpointSingularityWarning)
            with pytest.raises(NonIntegrableError):
                mogulskii_rate(BarrierProfile(0.0, lambda s: s), 1.0, 1.0)
        with pytest.raises(NonIntegrableError):
            mogulskii_rate(BarrierProfile(0.0, lambda s: np.abs(s - 0.5)), 1.0, 1.0)

    def test_table_profile_knots(self):
        t = np.linspace(0, 1, 257)
        prof = BarrierProfile.table(t, -1 - t, 1 + t)
        expected = 0.5 * math.pi**2 * (1 / 4) * (1 - 1 / 2)  # int ds / (2 + 2s)^2
        np.testing.assert_allclose(mogulskii_rate(prof, 1.0, 1.0), expected, rtol=1e-9)


class TestExactDP:
    def test_against_brute_force(self):
        step = StepLaw.lattice([-1, 0, 2], [0.3, 0.5, 0.2])
        lower = [0, -2, -2, -1, -3, -2, -2, -2]
        upper = [0, 2, 1, 3, 2, 2, 4, 1]
        for n in range(1, 8):
            np.testing.assert_allclose(exact_confinement_dp(step, lower, upper, n),
                                       _brute_force([-1, 0, 2], [0.3, 0.5, 0.2], lower, upper, n),
                                       rtol=1e-13)

    def test_three_site_eigenvalue(self):
        step = StepLaw.pm1()
        lo, hi = np.full(203, -1), np.full(203, 1)
        p200 = exact_confinement_dp(step, lo, hi, 200)
        p198 = exact_confinement_dp(step, lo, hi, 198)
        assert abs(p200 / p198 - 0.5) < 1e-6

    def test_trivial_cases(self):
        step = StepLaw.pm1()
        assert exact_confinement_dp(step, [0], [0], 0) == 1.0
        assert exact_confinement_dp(step, [1, 0], [2, 5], 1) == 0.0
        assert exact_confinement_dp(step, [1, 0], [2, 5], 1, log=True) == -math.inf

    def test_additivity_over_targets(self):
        step = StepLaw.lattice([-1, 0, 1], [0.25, 0.5, 0.25])
        lo, hi = np.full(41, -5), np.full(41, 5)
        total = exact_confinement_dp(step, lo, hi, 40)
        parts = sum(exact_confinement_dp(step, lo, hi, 40, target=(k, k)) for k in range(-5, 6))
        assert abs(total - parts) < 1e-14

    def test_deep_log_probability(self):
        step = StepLaw.pm1()
        n = 20_000
        lp = exact_confinement_dp(step, np.full(n + 1, -1), np.full(n + 1, 1), n, log=True)
        np.testing.assert_allclose(lp / n, 0.5 * math.log(0.5), rtol=1e-3)

    def test_width_budget(self):
        with pytest.raises(WidthBudgetError):
            exact_confinement_dp(StepLaw.pm1(), np.full(11, -100), np.full(11, 100), 10,
                                 width_budget=5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 4), st.integers(0, 3))
    def test_enlarging_corridor_never_decreases(self, n, w, extra):
        step = StepLaw.lattice([-1, 0, 1], [0.3, 0.4, 0.3])
        small = exact_confinement_dp(step, np.full(n + 1, -w), np.full(n + 1, w), n)
        big = exact_confinement_dp(step, np.full(n + 1, -w - extra), np.full(n + 1, w + extra), n)
        assert big >= small


class TestMonteCarlo:
    def test_wide_corridor_is_certain(self, rng):
        prof = BarrierProfile.constant(-1e3, 1e3)
        est = mc_confinement_prob(StepLaw.pm1(), prof, 50, reps=1000, rng=rng)
        assert est.value == 1.0

    @pytest.mark.parametrize("n", [64, 216])
    def test_against_dp(self, n, rng):
        prof = BarrierProfile.constant(-1, 1)
        step = StepLaw.pm1()
        lo, hi = lattice_corridor(prof, n)
        exact = exact_confinement_dp(step, lo, hi, n)
        est = mc_confinement_prob(step, prof, n, reps=200_000, rng=rng)
        assert abs(est.value - exact) < 4 * est.stderr

    def test_zero_marks_change_nothing(self):
        prof = BarrierProfile.constant(-1, 1)
        plain = mc_confinement_prob(StepLaw.pm1(), prof, 64, reps=20_000,
                                    rng=np.random.default_rng(5))
        marked = mc_confinement_prob(StepLaw.pm1(mark=lambda r, s: np.zeros(s)), prof, 64,
                                     with_marks=True, reps=20_000, rng=np.random.default_rng(5))
        assert plain == marked

    def test_start_outside(self, rng):
        with pytest.raises(ValueError):
            mc_confinement_prob(StepLaw.pm1(), BarrierProfile.constant(0.5, 1), 8, rng=rng)


class TestRateReport:
    def test_dp_sequence_monotone(self):
        prof = BarrierProfile.constant(-1, 1)
        rows = rate_convergence_report(StepLaw.pm1(), prof, [64, 216, 512, 1000], 1.0)
        vals = [r.scaled_log for r in rows]
        assert np.all(np.diff(vals) < 0)
        assert all(v > -math.pi**2 / 8 for v in vals)
        np.testing.assert_allclose(rows[0].target_constant, -math.pi**2 / 8, rtol=1e-12)

    def test_single_row(self, tmp_path):
        rows = rate_convergence_report(StepLaw.pm1(), BarrierProfile.constant(-1, 1), [27], 1.0)
        assert len(rows) == 1
        write_report_csv(rows, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "n,a_n,estimate,stderr,scaled_log,target_constant"

    def test_narrower_corridor_lower_value(self):
        wide = rate_convergence_report(StepLaw.pm1(), BarrierProfile.constant(-1.5, 1.5), [216], 1.0)
        narrow = rate_convergence_report(StepLaw.pm1(), BarrierProfile.constant(-1, 1), [216], 1.0)
        assert narrow[0].scaled_log <= wide[0].scaled_log

    def test_uniform_start_supremum(self):
        prof = BarrierProfile.constant(-1, 1)
        res = confinement_over_starts(StepLaw.pm1(), prof, 512, [-0.8, -0.4, 0.0, 0.4, 0.8])
        best = max(res["scaled_by_start"].values())
        assert res["sup"] == best
        # starting near the wall costs only o(1) on the scaled log scale
        assert best - min(res["scaled_by_start"].values()) < 0.1
