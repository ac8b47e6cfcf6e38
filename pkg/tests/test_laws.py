import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from brwsel.laws import (DegenerateLawError, MomentDivergenceError, NoBoundaryNormalizationError,
                         binary_pm1, boundary_residuals, fixed, kappa, law_from_descriptor,
                         normalize_to_boundary, normalized, poisson_gaussian, sigma2_of, table)
from brwsel.stats import Estimate


def _skewed_oracle(p):
    """theta*, kappa* and sigma2 of binary_pm1(p) from the closed form, in 40-digit arithmetic."""
    mpmath.mp.dps = 40
    p = mpmath.mpf(p)
    k = lambda t: mpmath.log(2 * (p * mpmath.e**t + (1 - p) * mpmath.e**-t))
    gap = lambda t: t * mpmath.diff(k, t) - k(t)
    th = mpmath.findroot(gap, 1.3)
    return float(th), float(k(th)), float(th**2 * mpmath.diff(k, th, 2))


class TestKappa:
    def test_symmetric_binary_closed_form(self):
        law = binary_pm1()
        for th in (0.0, 0.5, 2.0):
            np.testing.assert_allclose(kappa(law, th), math.log(2 * math.cosh(th)), rtol=1e-14)
        np.testing.assert_allclose(kappa(law, 0.0), math.log(2), rtol=1e-15)

    def test_normalized_law_has_zero_kappa_at_one(self, fixture_laws):
        for law in fixture_laws.values():
            assert abs(kappa(law, 1.0)) < 1e-12

    def test_sampler_law_returns_estimate(self, rng):
        from brwsel.laws import SamplerLaw
        pg = poisson_gaussian(2.0, 1.0)
        law = SamplerLaw(pg.sample, name="wrapped", mean_offspring=2.0)
        est = kappa(law, 0.5, budget=20_000, rng=rng)
        assert isinstance(est, Estimate)
        exact = math.log(2.0) + 0.5**2 / 2
        assert abs(est.value - exact) < 5 * est.stderr + 1e-3

    def test_heavy_moment_reported_as_divergent(self, rng):
        from brwsel.laws import SamplerLaw

        def cauchy(r, n):
            counts = np.full(n, 2)
            return counts, r.standard_cauchy(2 * n) * 50

        law = SamplerLaw(cauchy, name="cauchy", params={}, mean_offspring=2.0)
        with pytest.raises(MomentDivergenceError):
            kappa(law, 1.0, budget=20_000, rng=rng)


class TestNormalization:
    def test_symmetric_binary_has_no_boundary_form(self):
        with pytest.raises(NoBoundaryNormalizationError, match="W = E"):
            normalize_to_boundary(binary_pm1())

    @pytest.mark.parametrize("p", [0.1, 0.25, 0.4])
    def test_skewed_binary_against_high_precision_root(self, p):
        th, k, s2 = _skewed_oracle(p)
        form = normalize_to_boundary(binary_pm1(p))
        np.testing.assert_allclose(form.theta_star, th, rtol=1e-10)
        np.testing.assert_allclose(form.kappa_star, k, rtol=1e-10)
        np.testing.assert_allclose(form.sigma2, s2, rtol=1e-8)

    def test_frozen_skewed_fixture(self, skewed):
        np.testing.assert_allclose(skewed.boundary.theta_star, 1.27662245, atol=1e-8)
        np.testing.assert_allclose(skewed.boundary.kappa_star, 0.79331968, atol=1e-8)
        np.testing.assert_allclose(skewed.boundary.sigma2, 1.0004087714748, rtol=1e-10)

    def test_idempotent(self, fixture_laws):
        for law in fixture_laws.values():
            form = normalize_to_boundary(law)
            np.testing.assert_allclose(form.theta_star, 1.0, atol=1e-8)
            assert abs(form.kappa_star) < 1e-10

    def test_sigma2_two_ways(self, skewed):
        # theta^2 kappa'' of the raw law vs the enumerated moment of the normalized law
        assert abs(skewed.boundary.sigma2 - boundary_residuals(skewed)[2]) < 1e-8

    def test_degenerate_law(self):
        law = fixed([0.3, 0.3])
        with pytest.raises(DegenerateLawError):
            normalize_to_boundary(law)

    def test_gaussian_closed_form(self):
        law = normalized(poisson_gaussian(2.0, 1.0))
        r1, r2, s2 = boundary_residuals(law, budget=50_000, rng=np.random.default_rng(3))
        # Poisson(2) children with N(0,1) steps: theta* = sqrt(2 log 2)
        np.testing.assert_allclose(law.boundary.theta_star, math.sqrt(2 * math.log(2)), rtol=1e-9)
        np.testing.assert_allclose(law.boundary.sigma2, 2 * math.log(2), rtol=1e-9)


class TestResiduals:
    def test_two_children_at_minus_log_two(self):
        r1, r2, s2 = boundary_residuals(fixed([-math.log(2), -math.log(2)]))
        assert abs(r1) < 1e-15
        np.testing.assert_allclose(r2, -math.log(2), rtol=1e-15)
        np.testing.assert_allclose(s2, math.log(2) ** 2, rtol=1e-15)

    def test_deterministic(self, skewed):
        assert boundary_residuals(skewed) == boundary_residuals(skewed)

    def test_fixtures_boundary(self, fixture_laws):
        for law in fixture_laws.values():
            r1, r2, s2 = boundary_residuals(law)
            assert abs(r1) < 1e-9 and abs(r2) < 1e-9 and s2 > 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.lists(st.floats(-3, 3), min_size=1, max_size=3),
                              st.floats(0.05, 1.0)), min_size=2, max_size=4))
    def test_random_tables_normalize_or_explain(self, raw):
        total = sum(p for _, p in raw)
        atoms = [(c, p / total) for c, p in raw]
        try:
            law = table(atoms)
        except ValueError:
            return  # subcritical draw
        try:
            normed = normalized(law)
        except (NoBoundaryNormalizationError, DegenerateLawError):
            return
        r1, r2, s2 = boundary_residuals(normed)
        assert abs(r1) < 1e-9 and abs(r2) < 1e-9 and s2 > 0


class TestTableLaw:
    def test_validation(self):
        with pytest.raises(ValueError):
            table([([0.0], 0.5), ([1.0, 2.0], 0.4)])
        with pytest.raises(ValueError):
            table([([], 0.5), ([1.0, 2.0, 3.0], 0.5)])
        with pytest.raises(ValueError):
            table([([0.0], 1.0)])

    def test_sampler_matches_enumeration(self, rng):
        law = binary_pm1(0.25)
        atoms = law.enumerate()
        idx = law.sample_atoms(rng, 200_000)
        counts = np.bincount(idx, minlength=len(atoms))
        expected = np.array([p for _, p in atoms]) * idx.size
        assert chisquare(counts, expected).pvalue > 1e-3

    def test_sample_layout(self, rng):
        law = table([([0.0], 0.5), ([-1.0, 0.4, 1.0], 0.5)])
        counts, disps = law.sample(rng, 1000)
        assert counts.sum() == disps.size and np.all(counts >= 1)

    def test_keyed_sampling_is_pure(self):
        from brwsel._rng import root_key
        law = binary_pm1(0.25)
        k = root_key(5)
        a = law.sample_keyed(k)
        b = law.sample_keyed(k)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestDescriptors:
    def test_round_trip_kinds(self):
        law = law_from_descriptor({"kind": "binary_pm1", "p_up": 0.25})
        np.testing.assert_allclose(sigma2_of(law), 1.0004087714748, rtol=1e-10)
        raw = law_from_descriptor({"kind": "table", "normalize": False,
                                   "atoms": [{"children": [0.0, 1.0], "p": 1.0}]})
        assert raw.max_children == 2

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown law kind"):
            law_from_descriptor({"kind": "nope"})

    def test_bad_params(self):
        with pytest.raises(ValueError, match="bad parameters"):
            law_from_descriptor({"kind": "binary_pm1", "q": 1})
