import numpy as np
import pytest
from scipy import stats
from hypothesis import given
from hypothesis import strategies as st

from membrane_lab.errors import ParameterError
from membrane_lab.gibbs import GaussianOracle, ModelSpec, gaussian_cgf
from membrane_lab.lattice import build_geometry
from membrane_lab.limits import (CheckReport, RescaledField, cgf_thermo, infinite_volume_rhs,
                                 interpolation_weights, ks_distance, marginal_check, phi_direction,
                                 quadratic_rhs_closed_form, rescaled_covariance_reference,
                                 rescaled_observable_matrix, scaling_limit_check, sub_seed,
                                 symmetric_images, unit_gauss_legendre)
from membrane_lab.operators import infinite_bigreen
from membrane_lab.potential import logcosh, quadratic, variance_nu0
from membrane_lab.sampler import SamplerConfig, sample_Q

FAST = SamplerConfig(n_chains=4, burn_in=200, n_keep=4000, seed=5)


class TestQuadrature:
    def test_gauss_legendre_exactness(self):
        r, w = unit_gauss_legendre(8)
        for k in range(16):
            assert w @ r**k == pytest.approx(1 / (k + 1), rel=1e-13)
        with pytest.raises(ParameterError):
            unit_gauss_legendre(0)

    def test_sub_seed(self):
        assert sub_seed(3, 1, 0) == sub_seed(3, 1, 0)
        assert len({sub_seed(3, 1, i) for i in range(8)}) == 8
        assert 0 <= sub_seed(3, 2) < 2**63


class TestCgf:
    def test_zero_direction(self):
        spec = ModelSpec(build_geometry(2, 2), logcosh(1.0, 0.5))
        est = cgf_thermo(spec, np.zeros(spec.geom.n_box), FAST)
        assert est.value == 0.0 and est.se == 0.0

    def test_quadratic_against_oracle(self):
        g = build_geometry(2, 3)
        spec = ModelSpec(g, quadratic(1.0))
        a = 0.3 * np.random.default_rng(0).standard_normal(g.n_box)
        est = cgf_thermo(spec, a, FAST, n_nodes=4)
        ref = gaussian_cgf(GaussianOracle(g, 1.0), a)
        assert abs(est.value - ref) <= 3.5 * est.se

    def test_even_for_symmetric_potential(self):
        g = build_geometry(2, 2)
        spec = ModelSpec(g, logcosh(1.0, 0.5))
        a = 0.5 * np.random.default_rng(1).standard_normal(g.n_box)
        plus, minus = cgf_thermo(spec, a, FAST, 4), cgf_thermo(spec, -a, FAST, 4)
        assert abs(plus.value - minus.value) <= 3.5 * np.hypot(plus.se, minus.se)

    def test_bad_direction(self):
        spec = ModelSpec(build_geometry(2, 2), quadratic(1.0))
        with pytest.raises(ParameterError):
            cgf_thermo(spec, np.zeros(3), FAST)


class TestInfiniteVolumeRhs:
    def test_quadratic_closed_form(self):
        a_prime = {(0, 0, 0, 0, 0): 0.5, (1, 0, 0, 0, 0): -0.2}
        rhs = infinite_volume_rhs(quadratic(2.0), 5, a_prime)
        ref = quadratic_rhs_closed_form(5, a_prime, c=2.0)
        assert rhs.value == pytest.approx(ref, rel=1e-8)
        assert abs(rhs.remainder) < 1e-14

    def test_single_site_quadratic(self):
        rhs = infinite_volume_rhs(quadratic(1.0), 5, {(0,) * 5: 1.0})
        assert rhs.value == pytest.approx(0.5 * infinite_bigreen(5, np.zeros(5)), rel=1e-12)

    def test_zero(self):
        assert infinite_volume_rhs(logcosh(1.0, 0.5), 5, {(0,) * 5: 0.0}).value == 0.0

    def test_deterministic_and_subquadratic(self):
        pot = logcosh(1.0, 0.5)
        a_prime = {(0,) * 5: 0.5}
        r1, r2 = infinite_volume_rhs(pot, 5, a_prime), infinite_volume_rhs(pot, 5, a_prime)
        assert r1.value == r2.value
        # psi is the c.g.f. of a law with variance below 1/c_min: the RHS sits
        # below the quadratic value at c_min and the remainder is small
        assert 0 < r1.value <= quadratic_rhs_closed_form(5, a_prime, c=1.0)
        assert abs(r1.remainder) < 1e-3 * r1.quadratic
        assert r1.quadratic == pytest.approx(variance_nu0(pot) * quadratic_rhs_closed_form(5, a_prime))

    @given(st.floats(0.01, 2.0))
    def test_quadratic_scaling_in_amplitude(self, t):
        base = quadratic_rhs_closed_form(5, {(0,) * 5: 1.0})
        assert quadratic_rhs_closed_form(5, {(0,) * 5: t}) == pytest.approx(t * t * base, rel=1e-12)


class TestRescaledField:
    def test_exact_at_nodes(self):
        g = build_geometry(2, 4)
        phi = np.random.default_rng(0).standard_normal(g.n_box)
        f = RescaledField(g, phi)
        assert f.scale == 4.0 ** -1
        for site in [(0, 0), (2, -3), (4, 4)]:
            x = np.array(site) / 4
            assert f(x) == pytest.approx(0.25 * phi[g.index(site)])

    def test_interpolation_weights(self):
        g = build_geometry(2, 4)
        idx, w = interpolation_weights(g, np.array([0.125, 0.0]))
        assert w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(sorted(w), [0.5, 0.5])
        with pytest.raises(ParameterError):
            interpolation_weights(g, np.array([1.5, 0.0]))

    def test_observable_matrix_agrees(self):
        g = build_geometry(3, 3)
        phi = np.random.default_rng(1).standard_normal((2, g.n_box))
        pts = [np.array([0.1, -0.3, 0.7]), np.zeros(3)]
        W = rescaled_observable_matrix(g, pts)
        np.testing.assert_allclose(phi @ W.T, RescaledField(g, phi).at(pts))

    def test_covariance_reference_matches_oracle(self):
        g = build_geometry(2, 3)
        pts = [np.array([0.0, 0.0]), np.array([1 / 3, 2 / 3])]
        W = rescaled_observable_matrix(g, pts)
        orc = GaussianOracle(g, 1.0)
        # phi = Delta_L^{-1} eta, so the phi covariance is Delta^{-1} Sigma_eta Delta^{-1}
        D = np.stack([phi_direction(g, w) for w in W])
        np.testing.assert_allclose(rescaled_covariance_reference(g, pts), D @ orc.covariance() @ D.T,
                                   rtol=1e-9)


class TestScalingCheck:
    def test_quadratic_zero_coefficient(self):
        rep = scaling_limit_check(quadratic(1.0), [np.zeros(2)], [0.0], 2, [4], FAST, n_nodes=2,
                                  gaussian_mcmc=False)
        cgf = [r for r in rep.rows if r["check_name"] == "scaling_cgf"]
        assert cgf[0]["value"] == 0.0 and cgf[0]["reference"] == 0.0

    def test_bad_dimension(self):
        with pytest.raises(ParameterError):
            scaling_limit_check(quadratic(1.0), [np.zeros(5)], [1.0], 5, [2], FAST)


class TestMarginal:
    def test_images(self):
        g = build_geometry(2, 4)
        assert len(symmetric_images(g, (1, 0))) == 4
        assert len(symmetric_images(g, (1, 2))) == 8

    def test_ks_distance(self):
        x = np.random.default_rng(0).standard_normal(20000)
        assert ks_distance(x, stats.norm.cdf) == pytest.approx(stats.kstest(x, "norm").statistic)

    def test_quadratic_oracle_marginal(self):
        g = build_geometry(2, 4)
        rep = marginal_check(ModelSpec(g, quadratic(1.0)), [(3, 0), (0, 0)], FAST, reference="oracle")
        assert isinstance(rep, CheckReport)
        for row in rep.rows:
            assert row["value"] <= row["reference"]
        assert rep.summary["rho"] == [2, 5]

    def test_conditional_estimator_matches_gaussian_marginal(self):
        # for quadratic(1) the marginal of eta(x0) is N(0, Sigma_x0x0) and nu^0 is N(0, 1)
        g = build_geometry(2, 4)
        xs = [(3, 0), (1, 1)]
        cfg = SamplerConfig(n_chains=4, burn_in=200, n_keep=6000, seed=2)
        rep = marginal_check(ModelSpec(g, quadratic(1.0)), xs, cfg, conditional=True)
        rows = [r for r in rep.rows if r["check_name"] == "marginal_ks_conditional"]
        t = np.linspace(-6, 6, 120001)
        orc = GaussianOracle(g, 1.0)
        for x, row in zip(xs, rows):
            i = g.index(x)
            sd = np.sqrt(orc.covariance()[i, i])
            exact = np.max(np.abs(stats.norm.cdf(t) - stats.norm.cdf(t / sd)))
            assert abs(row["value"] - exact) <= 4 * row["se"] + 2e-4 * exact

    def test_conditional_needs_nu_reference(self):
        with pytest.raises(ParameterError):
            marginal_check(ModelSpec(build_geometry(2, 2), quadratic(1.0)), [(0, 0)], FAST,
                           reference="oracle", conditional=True)


def test_conditional_expansion_matches_exact_evaluation(monkeypatch):
    from membrane_lab import limits
    from membrane_lab.operators import dirichlet_solve
    from membrane_lab.potential import OneDMeasure

    g = build_geometry(2, 8)
    pot = logcosh(1.0, 0.5)
    spec = ModelSpec(g, pot)
    groups = [[g.index((6, 0))], [g.index((2, 1))]]
    measures = [OneDMeasure.build(pot, 0.0, nodes=limits.CONDITIONAL_GRID)] * 2
    eta = GaussianOracle(g, 1.0).sample(3, np.random.default_rng(0))
    phi = np.stack([dirichlet_solve(g, e)[: g.n_box] for e in eta])
    expanded = limits._ConditionalCdf(spec, groups, measures)(phi, eta)
    monkeypatch.setattr(limits, "NEAR_COUPLING", 0.0)
    exact = limits._ConditionalCdf(spec, groups, measures)(phi, eta)
    assert np.max(np.abs(expanded - exact)) < 1e-7


def test_direct_cgf_at_small_tilt_matches_integration():
    g = build_geometry(2, 2)
    spec = ModelSpec(g, logcosh(1.0, 0.5))
    a = 0.2 * np.random.default_rng(7).standard_normal(g.n_box)
    batch = sample_Q(spec, SamplerConfig(n_chains=4, burn_in=200, n_keep=40_000, seed=8),
                     observe=lambda phi, eta: (eta @ a)[:, None])
    s = batch.obs[:, :, 0]
    direct = float(np.log(np.mean(np.exp(s))))
    # delta method with autocorrelation from the batch of chain means
    chain_vals = np.log(np.mean(np.exp(s), axis=1))
    direct_se = float(np.std(chain_vals, ddof=1) / np.sqrt(len(chain_vals)))
    est = cgf_thermo(spec, a, FAST, n_nodes=4)
    assert abs(direct - est.value) <= 3 * np.hypot(direct_se, est.se) + 1e-3


def test_point_tilt_moves_mean_toward_tilted_single_spin_law():
    from membrane_lab.potential import OneDMeasure
    from membrane_lab.stats import mean_estimate

    g = build_geometry(2, 4)
    pot = logcosh(1.0, 0.5)
    i0 = g.index((0, 0))
    b = np.zeros(g.n_box)
    b[i0] = 0.6
    batch = sample_Q(ModelSpec(g, pot, b=b), FAST, observe=lambda phi, eta: eta[:, [i0]])
    est = mean_estimate(batch.obs[:, :, 0])
    target = OneDMeasure.build(pot, 0.6).mean
    assert est.value > 3 * est.se
    assert abs(est.value - target) < target
