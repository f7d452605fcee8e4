"""Log-gamma, digamma and trigamma against high-precision references."""

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from fsrating.special import (
    DomainError,
    digamma,
    digamma_diff,
    log_gamma,
    log_gamma_diff,
    trigamma,
    trigamma_diff,
)

mp.mp.dps = 40

GRID = np.concatenate([np.logspace(-3, 6, 300), [0.5, 1.0, 2.0, 3.0, 5.999, 6.0, 9.999, 10.0, 10.0001]])
positive = st.floats(min_value=1e-3, max_value=1e6, allow_nan=False, allow_infinity=False)


def scaled_error(value, reference):
    """Relative error, measured absolutely where the reference is below one in size."""
    return abs(value - reference) / max(1.0, abs(reference))


class TestLogGamma:
    """ln Gamma on (0, inf)."""

    def test_known_values(self):
        """Gamma(1) = Gamma(2) = 1 and Gamma(1/2) = sqrt(pi)."""
        assert abs(log_gamma(1.0)) < 1e-14
        assert abs(log_gamma(2.0)) < 1e-14
        assert log_gamma(0.5) == pytest.approx(0.5723649429247001, rel=1e-14)

    def test_matches_mpmath_on_grid(self):
        """Scaled error at most 1e-12 over [1e-3, 1e6]."""
        errs = [scaled_error(log_gamma(x), float(mp.loggamma(mp.mpf(x)))) for x in GRID]
        assert max(errs) <= 1e-12

    def test_array_input_keeps_shape(self):
        """Arrays in, arrays of the same shape out; scalars in, floats out."""
        x = np.array([[0.5, 1.5], [2.5, 30.0]])
        out = log_gamma(x)
        assert out.shape == x.shape
        assert_allclose(out, [[math.lgamma(v) for v in row] for row in x], rtol=1e-13)
        assert isinstance(log_gamma(3.0), float)

    @pytest.mark.parametrize("bad", [0.0, -1.0, -0.5, np.nan])
    def test_domain_error(self, bad):
        """Non-positive or missing arguments are rejected."""
        with pytest.raises(DomainError):
            log_gamma(bad)

    @settings(max_examples=200, deadline=None)
    @given(positive)
    def test_recurrence(self, x):
        """ln Gamma(x + 1) = ln Gamma(x) + ln x."""
        lhs = log_gamma(x + 1.0)
        rhs = log_gamma(x) + math.log(x)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(math.log(x)))


class TestDigamma:
    """psi = d/dx ln Gamma."""

    def test_known_values(self):
        """psi(1) = -Euler gamma, psi(2) = 1 - gamma, psi(1/2) = -gamma - 2 ln 2."""
        assert digamma(1.0) == pytest.approx(-0.5772156649015329, rel=1e-14)
        assert digamma(2.0) == pytest.approx(0.4227843350984671, rel=1e-14)
        assert digamma(0.5) == pytest.approx(-1.9635100260214235, rel=1e-14)

    def test_matches_mpmath_on_grid(self):
        errs = [scaled_error(digamma(x), float(mp.digamma(mp.mpf(x)))) for x in GRID]
        assert max(errs) <= 1e-12

    @settings(max_examples=300, deadline=None)
    @given(positive)
    def test_recurrence(self, x):
        """psi(x + 1) = psi(x) + 1/x to 1e-12."""
        assert abs(digamma(x + 1.0) - digamma(x) - 1.0 / x) <= 1e-12 * max(1.0, 1.0 / x)

    def test_finite_difference_of_log_gamma(self):
        """Central difference of ln Gamma reproduces psi on [0.1, 100]."""
        x = np.linspace(0.1, 100.0, 400)
        h = 1e-5 * x
        fd = (log_gamma(x + h) - log_gamma(x - h)) / (2 * h)
        assert np.max(np.abs(fd - digamma(x))) < 1e-6

    def test_strictly_increasing(self):
        x = np.logspace(-3, 5, 2000)
        assert np.all(np.diff(digamma(x)) > 0)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            digamma(np.array([1.0, 0.0]))


class TestTrigamma:
    """psi_1 = d/dx psi."""

    def test_known_values(self):
        """psi_1(1) = pi^2/6 and psi_1(2) = pi^2/6 - 1."""
        assert trigamma(1.0) == pytest.approx(math.pi**2 / 6, rel=1e-14)
        assert trigamma(2.0) == pytest.approx(math.pi**2 / 6 - 1, rel=1e-14)
        assert trigamma(10.0) == pytest.approx(0.10516633568168575, rel=1e-14)

    def test_matches_mpmath_on_grid(self):
        errs = [scaled_error(trigamma(x), float(mp.polygamma(1, mp.mpf(x)))) for x in GRID]
        assert max(errs) <= 1e-12

    @settings(max_examples=300, deadline=None)
    @given(positive)
    def test_recurrence_and_positivity(self, x):
        """psi_1(x + 1) = psi_1(x) - 1/x^2 to 1e-12, and psi_1 > 0."""
        assert abs(trigamma(x + 1.0) - trigamma(x) + 1.0 / x**2) <= 1e-12 * max(1.0, 1.0 / x**2)
        assert trigamma(x) > 0

    def test_finite_difference_of_digamma(self):
        x = np.linspace(0.1, 100.0, 400)
        h = 1e-5 * x
        fd = (digamma(x + h) - digamma(x - h)) / (2 * h)
        assert np.max(np.abs(fd - trigamma(x))) < 1e-6

    def test_strictly_decreasing(self):
        x = np.logspace(-3, 5, 2000)
        assert np.all(np.diff(trigamma(x)) < 0)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            trigamma(-2.0)


class TestShiftedDifferences:
    """f(a + x) - f(a) for the three kernels, including a far beyond where plain subtraction works.

    From a = 20 upward the error is relative to the difference itself; below
    that it is measured against the size of the two kernel values.
    """

    BASES = [0.3, 5.0, 19.9, 20.0, 99.9, 1e3, 3e4, 1e8, 1.7e16, 1e150]
    STEPS = [0.0, 1e-9, 0.01, 1.0, 7.0, 250.0, 1e5]
    KERNELS = [
        (log_gamma_diff, mp.loggamma),
        (digamma_diff, mp.digamma),
        (trigamma_diff, lambda v: mp.polygamma(1, v)),
    ]

    @staticmethod
    def check(fn, kernel, a, x):
        # enough digits that a + x is exact in the reference
        digits = 60 + (int(-math.log10(x)) if 0 < x < 1 else 0) + (int(math.log10(a)) if a > 1 else 0)
        with mp.workdps(digits):
            A, X = mp.mpf(a), mp.mpf(x)
            hi, lo = kernel(A + X), kernel(A)
            ref = float(hi - lo)
            scale = abs(ref) if a >= 20 else max(1.0, abs(float(hi)), abs(float(lo)))
        # results below the normal range carry fewer digits
        assert abs(fn(a, x) - ref) <= 1e-12 * scale + np.finfo(float).tiny, (fn.__name__, a, x)

    @pytest.mark.parametrize("k", range(3))
    def test_matches_mpmath(self, k):
        fn, kernel = self.KERNELS[k]
        for a in self.BASES:
            for x in self.STEPS:
                self.check(fn, kernel, a, x)

    @settings(max_examples=150, deadline=None)
    @given(st.floats(1e-3, 1e12), st.one_of(st.just(0.0), st.floats(1e-300, 1e4)))
    def test_property_against_mpmath(self, a, x):
        for fn, kernel in self.KERNELS:
            self.check(fn, kernel, a, x)

    def test_agrees_with_plain_subtraction_for_moderate_arguments(self):
        a = np.linspace(0.5, 50.0, 40)
        x = np.linspace(0.0, 20.0, 40)
        assert_allclose(log_gamma_diff(a, x), log_gamma(a + x) - log_gamma(a), rtol=1e-13, atol=1e-13)
        assert_allclose(digamma_diff(a, x), digamma(a + x) - digamma(a), rtol=1e-12, atol=1e-14)
        assert_allclose(trigamma_diff(a, x), trigamma(a + x) - trigamma(a), rtol=1e-12, atol=1e-14)

    def test_huge_base_limit(self):
        """For a much larger than x: ln Gamma shift -> x ln a, digamma shift -> x / a."""
        a = 1e18
        assert log_gamma_diff(a, 3.0) == pytest.approx(3.0 * math.log(a), rel=1e-14)
        assert digamma_diff(a, 3.0) == pytest.approx(3.0 / a, rel=1e-12)
        assert trigamma_diff(a, 3.0) == pytest.approx(-3.0 / a**2, rel=1e-12)

    def test_shapes_and_errors(self):
        out = log_gamma_diff(np.array([[1.0, 2e3]]), 2.0)
        assert out.shape == (1, 2)
        assert isinstance(digamma_diff(4.0, 1.0), float)
        with pytest.raises(DomainError):
            log_gamma_diff(0.0, 1.0)
        with pytest.raises(DomainError):
            trigamma_diff(1.0, -0.5)
