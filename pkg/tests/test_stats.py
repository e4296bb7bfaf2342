import math

import numpy as np
import pytest

from membrane_lab.stats import (covariance_matrix_estimate, effective_sample_size,
                                integrated_autocorr_time, mean_estimate, split_rhat,
                                variance_estimate)


def ar1(n, rho, chains=4, seed=0):
    rng = np.random.default_rng(seed)
    x = np.zeros((chains, n))
    x[:, 0] = rng.standard_normal(chains) / math.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + rng.standard_normal(chains)
    return x


class TestAutocorrelation:
    def test_iid_ess(self):
        x = np.random.default_rng(0).standard_normal((4, 5000))
        assert effective_sample_size(x) == pytest.approx(x.size, rel=0.2)

    def test_ar1_iat(self):
        rho = 0.8
        x = ar1(20000, rho)
        assert integrated_autocorr_time(x) == pytest.approx((1 + rho) / (1 - rho), rel=0.15)

    def test_constant_chain(self):
        assert integrated_autocorr_time(np.ones((2, 100))) == math.inf
        assert effective_sample_size(np.ones((2, 100))) == 0.0

    def test_rhat(self):
        x = np.random.default_rng(1).standard_normal((4, 2000))
        assert split_rhat(x) < 1.01
        shifted = x + np.arange(4)[:, None]
        assert split_rhat(shifted) > 1.5
        assert math.isnan(split_rhat(x[:1]))


class TestEstimates:
    def test_mean_se_calibrated(self):
        # the SE of AR(1) means should cover the truth at the nominal rate
        z = []
        for seed in range(40):
            est = mean_estimate(ar1(2000, 0.7, seed=seed))
            z.append(est.value / est.se)
        assert np.mean(np.abs(z) < 2) > 0.85

    def test_variance(self):
        x = np.random.default_rng(2).standard_normal((4, 20000)) * 2
        est = variance_estimate(x)
        assert est.within(4.0)

    def test_flag_low_ess(self):
        est = mean_estimate(ar1(200, 0.99, chains=1), min_ess=100)
        assert est.flag

    def test_covariance_matrix_se(self):
        rng = np.random.default_rng(3)
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = rng.multivariate_normal([0, 0], C, size=(4, 20000))
        cov, se, ess = covariance_matrix_estimate(x)
        assert np.all(np.abs(cov - C) <= 4 * se)
        # SE of a Gaussian covariance entry: sqrt((C_ii C_jj + C_ij^2) / n)
        n = x.shape[0] * x.shape[1]
        assert se[0, 1] == pytest.approx(math.sqrt((2.0 + 0.25) / n), rel=0.2)
        assert ess == pytest.approx(n, rel=0.25)
