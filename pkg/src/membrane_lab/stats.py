"""Monte Carlo error analysis for Markov-chain output.

All routines take samples arranged as ``(chains, draws)`` (a 1-D array is
treated as a single chain) and are deterministic functions of their input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo estimate with its standard error.

    Attributes
    ----------
    value, se : float
    ess : float
        Effective sample size behind the estimate.
    flag : bool
        True when the estimate is statistically unreliable.
    note : str
    """

    value: float
    se: float
    ess: float = float("inf")
    flag: bool = False
    note: str = ""

    def within(self, reference: float, k: float = 3.0) -> bool:
        """Whether ``|value - reference| <= k * se``."""
        return abs(self.value - reference) <= k * self.se


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise ValueError("samples must be shaped (chains, draws)")
    return x


def autocorrelation(x) -> np.ndarray:
    """Normalised autocorrelation function averaged over chains."""
    x = _as_chains(x)
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=m, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=m, axis=1)[:, :n].mean(axis=0) / n
    if acov[0] <= 0:
        return np.full(n, np.nan)
    return acov / acov[0]


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's self-consistent window.

    Returns ``inf`` for a chain with zero variance, which cannot be
    distinguished from a chain that is stuck.
    """
    rho = autocorrelation(x)
    if not np.isfinite(rho[0]):
        return float("inf")
    taus = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(taus.size)
    ok = window >= c * taus
    k = int(np.argmax(ok)) if ok.any() else taus.size - 1
    return float(max(taus[k], 1.0 / taus.size, 1e-12))


def effective_sample_size(x) -> float:
    x = _as_chains(x)
    tau = integrated_autocorr_time(x)
    return float(x.size / tau) if np.isfinite(tau) else 0.0


def split_rhat(x) -> float:
    """Split-chain potential scale reduction factor.

    Returns NaN for fewer than two chains or fewer than four draws.
    """
    x = _as_chains(x)
    if x.shape[0] < 2 or x.shape[1] < 4:
        return float("nan")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return float("nan") if B <= 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def mean_estimate(x, min_ess: float = 100.0) -> Estimate:
    """Mean with an autocorrelation-corrected standard error."""
    x = _as_chains(x)
    tau = integrated_autocorr_time(x)
    ess = x.size / tau if np.isfinite(tau) else 0.0
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    se = sd / math.sqrt(ess) if ess > 0 else float("inf")
    if sd == 0.0:
        se = 0.0
    return Estimate(float(x.mean()), float(se), float(ess), flag=bool(ess < min_ess))


def variance_estimate(x, min_ess: float = 100.0) -> Estimate:
    """Variance with a standard error from the series of centred squares."""
    x = _as_chains(x)
    sq = (x - x.mean()) ** 2
    est = mean_estimate(sq, min_ess)
    n = x.size
    return Estimate(est.value * n / max(n - 1, 1), est.se, est.ess, est.flag)


def covariance_estimate(x, y, min_ess: float = 100.0) -> Estimate:
    """Covariance of two observables with a standard error."""
    x, y = _as_chains(x), _as_chains(y)
    prod = (x - x.mean()) * (y - y.mean())
    est = mean_estimate(prod, min_ess)
    n = x.size
    return Estimate(est.value * n / max(n - 1, 1), est.se, est.ess, est.flag)


def _batched_iat(series: np.ndarray, c: float = 5.0) -> np.ndarray:
    """Sokal-window IAT for many series at once; ``series`` is (chains, n, m)."""
    C, n, m = series.shape
    xc = series - series.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].mean(axis=0) / n
    out = np.full(m, np.inf)
    ok = acov[0] > 0
    rho = acov[:, ok] / acov[0, ok]
    taus = 2.0 * np.cumsum(rho, axis=0) - 1.0
    window = np.arange(n)[:, None]
    hit = window >= c * taus
    k = np.where(hit.any(axis=0), np.argmax(hit, axis=0), n - 1)
    out[ok] = np.maximum(taus[k, np.arange(taus.shape[1])], 1.0 / n)
    return out


def covariance_matrix_estimate(samples, chunk: int = 64) -> tuple:
    """Empirical covariance matrix and entrywise standard errors.

    Parameters
    ----------
    samples : ndarray, shape (chains, draws, k)

    Returns
    -------
    cov, se : ndarray, shape (k, k)
    ess : float
        Smallest effective sample size over the entries.

    Notes
    -----
    The standard error of entry ``(i, j)`` is the autocorrelation-corrected
    standard error of the mean of the centred products ``x_i x_j``, with the
    integrated autocorrelation time estimated separately for every entry.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    C, n, k = s.shape
    xc = s - s.reshape(-1, k).mean(axis=0)
    total = C * n
    flat = xc.reshape(-1, k)
    cov = flat.T @ flat / (total - 1)
    se = np.zeros((k, k))
    min_ess = np.inf
    iu, ju = np.triu_indices(k)
    for start in range(0, iu.size, chunk):
        ii, jj = iu[start : start + chunk], ju[start : start + chunk]
        prod = xc[:, :, ii] * xc[:, :, jj]
        tau = _batched_iat(prod)
        var = prod.reshape(total, -1).var(axis=0, ddof=1)
        vals = np.sqrt(var * tau / total)
        se[ii, jj] = vals
        se[jj, ii] = vals
        min_ess = min(min_ess, float(np.min(total / tau)))
    return cov, se, min_ess
