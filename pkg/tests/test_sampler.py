import math
from dataclasses import replace

import numpy as np
import pytest

from membrane_lab.errors import DivergenceError, ParameterError
from membrane_lab.gibbs import GaussianOracle, ModelSpec
from membrane_lab.lattice import Domain, build_geometry
from membrane_lab.operators import laplacian
from membrane_lab.potential import Potential, logcosh, quadratic
from membrane_lab.sampler import (Preconditioner, SamplerConfig, diagnostics, load_batch,
                                  sample_Q, save_batch)
from membrane_lab.stats import covariance_matrix_estimate, mean_estimate


def small_config(**kw):
    base = SamplerConfig(n_chains=4, burn_in=300, n_keep=8000, seed=11)
    return replace(base, **kw)


def dense_laplacian(geom):
    return laplacian(geom, np.eye(geom.n_box), out=Domain.BOX)


class TestPreconditioner:
    @pytest.mark.parametrize("d,L", [(1, 3), (2, 2)])
    def test_spectral_apply_is_inverse_square(self, d, L):
        g = build_geometry(d, L)
        pre = Preconditioner(ModelSpec(g, quadratic(1.0)), "laplacian2")
        D = dense_laplacian(g)
        v = np.random.default_rng(0).standard_normal((2, g.n_box))
        np.testing.assert_allclose(pre.apply(v), np.linalg.solve(D @ D, v.T).T, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(pre.apply_inv(pre.apply(v)), v, atol=1e-10)

    @pytest.mark.parametrize("kind", ["laplacian2", "bilaplacian", "none"])
    def test_log_q_ratio_matches_dense_density(self, kind):
        g = build_geometry(2, 2)
        spec = ModelSpec(g, logcosh(1.0, 0.5))
        pre = Preconditioner(spec, kind)
        n = g.n_box
        M = pre.apply(np.eye(n))
        Minv = np.linalg.inv(M)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, n))
        gx, gy = rng.standard_normal((2, 1, n))
        h = 0.3
        rep_x, rep_y = pre.grad_rep(gx), pre.grad_rep(gy)
        y, delta = pre.propose(x, rep_x, h, rng.standard_normal((1, pre.noise_dim)))

        def log_q(to, frm, g_frm):
            r = (to - frm + h * (M @ g_frm[0]))[0]
            return -r @ Minv @ r / (4 * h)

        dense = log_q(x, y, gy) - log_q(y, x, gx)
        assert pre.log_q_ratio(delta, gx, rep_x, gy, rep_y, h)[0] == pytest.approx(dense, rel=1e-8, abs=1e-9)

    def test_auto_choice(self):
        small = Preconditioner(ModelSpec(build_geometry(2, 4), quadratic(1.0)))
        big = Preconditioner(ModelSpec(build_geometry(5, 2), quadratic(1.0)))
        assert small.kind == "bilaplacian"
        assert big.kind == "laplacian2"

    def test_bad_kind(self):
        with pytest.raises(ParameterError):
            SamplerConfig(preconditioner="identity")


class TestSampling:
    def test_deterministic(self):
        spec = ModelSpec(build_geometry(2, 2), logcosh(1.0, 0.5))
        cfg = small_config(n_keep=400, burn_in=50)
        a, b = sample_Q(spec, cfg), sample_Q(spec, cfg)
        assert np.array_equal(a.eta, b.eta)
        c = sample_Q(spec, replace(cfg, seed=12))
        assert not np.array_equal(a.eta, c.eta)

    @pytest.mark.parametrize("kind", ["laplacian2", "bilaplacian", "none"])
    def test_d1_quadratic_covariance(self, kind):
        g = build_geometry(1, 1)
        spec = ModelSpec(g, quadratic(1.0))
        batch = sample_Q(spec, small_config(preconditioner=kind, n_keep=40_000))
        cov, se, _ = covariance_matrix_estimate(batch.eta)
        exact = GaussianOracle(g, 1.0).covariance()
        assert np.all(np.abs(cov - exact) <= 3.5 * se)
        assert exact[1, 1] == pytest.approx(0.8)

    def test_acceptance_in_range(self):
        spec = ModelSpec(build_geometry(2, 4), logcosh(1.0, 0.5))
        batch = sample_Q(spec, small_config(n_keep=2000))
        assert 0.4 <= batch.acceptance_rate <= 0.8

    def test_zero_tilt_mean(self):
        spec = ModelSpec(build_geometry(2, 3), logcosh(1.0, 0.5))
        batch = sample_Q(spec, small_config())
        z = [mean_estimate(batch.eta[:, :, i]) for i in range(0, spec.geom.n_box, 7)]
        assert sum(abs(e.value) > 3 * e.se for e in z) <= 1

    def test_tilted_mean_matches_oracle(self):
        g = build_geometry(2, 4)
        b = 0.5 * np.random.default_rng(3).standard_normal(g.n_box)
        spec = ModelSpec(g, quadratic(1.0), b=b)
        batch = sample_Q(spec, small_config())
        mu = GaussianOracle(g, 1.0).mean(b)
        for i in (0, 20, 40, 80):
            est = mean_estimate(batch.eta[:, :, i])
            assert abs(est.value - mu[i]) <= 3.5 * est.se

    def test_poincare_bound(self):
        # Var <a, eta> under a c_min-convex law is bounded by the Gaussian one at c_min
        g = build_geometry(2, 3)
        spec = ModelSpec(g, logcosh(1.0, 0.5))
        a = np.random.default_rng(4).standard_normal(g.n_box)
        batch = sample_Q(spec, small_config(), observe=lambda phi, eta: (eta @ a)[:, None])
        var = float(np.var(batch.obs))
        bound = a @ GaussianOracle(g, 1.0).apply(a)
        assert var <= bound * 1.1

    def test_observable_shapes(self):
        spec = ModelSpec(build_geometry(2, 2), quadratic(1.0))
        batch = sample_Q(spec, small_config(n_keep=100, burn_in=10),
                         observe=lambda phi, eta: eta[:, :3])
        assert batch.eta is None and batch.obs.shape == (4, 25, 3)

    def test_divergence(self):
        blow = Potential("blow", {}, V=lambda x: np.where(np.abs(x) > 0.5, np.nan, 0.5 * x * x),
                         dV=lambda x: x, d2V=lambda x: np.ones(np.shape(x)),
                         d3V=lambda x: np.zeros(np.shape(x)), c_min=1.0, c_max=1.0, t_max=0.0)
        spec = ModelSpec(build_geometry(2, 2), blow)
        with pytest.raises(DivergenceError):
            sample_Q(spec, small_config(n_keep=100, burn_in=100))


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        spec = ModelSpec(build_geometry(2, 2), logcosh(1.0, 0.5))
        batch = sample_Q(spec, small_config(n_keep=200, burn_in=20))
        save_batch(tmp_path / "s.mlarray", batch)
        back = load_batch(tmp_path / "s.mlarray")
        assert np.array_equal(back.eta, batch.eta)
        assert back.header == batch.header
        assert back.acceptance_rate == batch.acceptance_rate


class TestDiagnostics:
    def test_iid(self):
        x = np.random.default_rng(0).standard_normal((4, 2000, 3))
        rep = diagnostics(x)
        assert np.all(rep.rhat < 1.01) and not rep.flags
        np.testing.assert_allclose(rep.ess, 8000, rtol=0.25)

    def test_flags(self):
        rep = diagnostics(np.ones((1, 50)))
        assert len(rep.flags) == 2
        assert math.isinf(rep.iat[0])
        with pytest.raises(ParameterError):
            diagnostics(np.zeros((1, 0)))
