import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membrane_lab.errors import ParameterError
from membrane_lab.potential import (OneDMeasure, builtin_potentials, cgf_psi, logcosh,
                                    mean_U_beta_sensitivity, one_d_measure, quadratic, solve_U,
                                    variance_nu0)

# psi(1) for logcosh(1, 0.5) on a 10x finer grid (20481 nodes), frozen
PSI1_LOGCOSH_FINE = 0.38068752382367277


class TestPotentials:
    @pytest.mark.parametrize("pot", [quadratic(2.0), logcosh(1.0, 0.5), logcosh(2.0, 0.3)])
    def test_derivatives_match_finite_differences(self, pot):
        x = np.linspace(-4, 4, 81)
        h = 1e-5
        np.testing.assert_allclose(pot.dV(x), (pot.V(x + h) - pot.V(x - h)) / (2 * h), atol=1e-8)
        np.testing.assert_allclose(pot.d2V(x), (pot.dV(x + h) - pot.dV(x - h)) / (2 * h), atol=1e-8)
        np.testing.assert_allclose(pot.d3V(x), (pot.d2V(x + h) - pot.d2V(x - h)) / (2 * h), atol=1e-7)

    @given(st.floats(-50, 50))
    def test_convexity_bounds(self, x):
        pot = logcosh(1.0, 0.5)
        assert pot.c_min - 1e-12 <= float(pot.d2V(x)) <= pot.c_max + 1e-12

    def test_logcosh_constants(self):
        pot = logcosh(1.0, 0.5)
        assert (pot.c_min, pot.c_max) == (1.0, 1.5)
        x = np.linspace(-3, 3, 20001)
        assert np.max(np.abs(pot.d3V(x))) == pytest.approx(pot.t_max, rel=1e-6)
        assert pot.V(0.0) == 0.0 and pot.symmetric

    def test_logcosh_large_argument_is_finite(self):
        pot = logcosh(1.0, 0.5)
        assert np.isfinite(pot.V(1e6)) and pot.d2V(1e6) == pytest.approx(1.0)

    def test_registry(self):
        assert builtin_potentials("logcosh", {"a": 0.25}).params["a"] == 0.25
        with pytest.raises(ParameterError):
            builtin_potentials("quartic")
        with pytest.raises(ParameterError):
            quadratic(-1.0)


class TestOneDMeasure:
    def test_gaussian_moments(self):
        m = one_d_measure(quadratic(2.0))
        assert m.mean == pytest.approx(0.0, abs=1e-14)
        assert m.variance == pytest.approx(0.5, rel=1e-12)
        assert m.log_J == pytest.approx(0.5 * math.log(2 * math.pi / 2.0), rel=1e-12)

    def test_tilted_gaussian_mean(self):
        m = OneDMeasure.build(quadratic(1.0), beta=0.7)
        assert m.mean == pytest.approx(0.7, rel=1e-12)

    def test_cdf_is_monotone(self):
        m = one_d_measure(logcosh(1.0, 0.5))
        x = np.linspace(-10, 10, 501)
        F = m.cdf(x)
        assert np.all(np.diff(F) >= 0) and F[0] == 0.0 and F[-1] == 1.0
        assert m.cdf(0.0) == pytest.approx(0.5, abs=1e-12)


class TestCgf:
    def test_quadratic_closed_form(self):
        m = one_d_measure(quadratic(1.0))
        for lam in (0.3, 1.0, 4.0):
            assert cgf_psi(m, lam) == pytest.approx(lam**2 / 2, rel=1e-12)

    def test_logcosh_against_refined_grid(self):
        assert cgf_psi(one_d_measure(logcosh(1.0, 0.5)), 1.0) == pytest.approx(PSI1_LOGCOSH_FINE, rel=1e-12)

    @given(st.floats(-5, 5))
    def test_even_for_symmetric_potential(self, lam):
        m = one_d_measure(logcosh(1.0, 0.5))
        assert cgf_psi(m, lam) == pytest.approx(cgf_psi(m, -lam), abs=1e-12)

    def test_second_derivative_is_variance(self):
        m = one_d_measure(logcosh(1.0, 0.5))
        h = 1e-3
        curv = (cgf_psi(m, h) - 2 * cgf_psi(m, 0.0) + cgf_psi(m, -h)) / h**2
        assert curv == pytest.approx(m.variance, rel=1e-5)

    def test_errors(self):
        m = one_d_measure(quadratic(1.0))
        with pytest.raises(ParameterError):
            cgf_psi(m, 11.0)
        with pytest.raises(ParameterError):
            cgf_psi(OneDMeasure.build(quadratic(1.0), 0.5), 0.1)


class TestHelfferSjostrand:
    @pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
    def test_mean_U_equals_variance(self, beta):
        m = OneDMeasure.build(logcosh(1.0, 0.5), beta)
        prof = solve_U(m)
        assert prof.mean == pytest.approx(m.variance, abs=1e-6)

    def test_quadratic_U_is_constant(self):
        prof = solve_U(one_d_measure(quadratic(2.0)))
        np.testing.assert_allclose(prof.U, 0.5, atol=1e-9)

    @pytest.mark.parametrize("beta", [0.0, 1.0])
    def test_U_bounds(self, beta):
        pot = logcosh(1.0, 0.5)
        prof = solve_U(OneDMeasure.build(pot, beta))
        assert prof.U.min() >= 1 / pot.c_max - 1e-8
        assert prof.U.max() <= 1 / pot.c_min + 1e-8

    def test_beta_sensitivity_bounded(self):
        pot = logcosh(1.0, 0.5)
        s = mean_U_beta_sensitivity(pot, 0.5)
        assert np.isfinite(s) and abs(s) <= 1.0


def test_variance_nu0_quadratic():
    assert variance_nu0(quadratic(4.0)) == pytest.approx(0.25, rel=1e-12)
