"""Verification pipelines for the large-volume behaviour of the membrane model.

The central estimator is the thermodynamic-integration cumulant generating
function

    log E_Q exp<a, eta> = int_0^1 (1 - r) Var_{Q^{ra}} <a, eta> dr,

with the variances estimated by MCMC at Gauss-Legendre nodes. On top of it
sit checks of the infinite-volume limit (d >= 5), of the Gaussian
approximation with covariance scaled by ``Var_{nu^0} xi``, of the covariance
of the rescaled field, and of the single-site marginal against ``nu^0``.

Every check returns a :class:`CheckReport` whose rows follow
:data:`membrane_lab.io.REPORT_COLUMNS`.

Sign conventions. Directions are passed in eta coordinates. A phi-space
linear functional ``<f, phi>`` is the eta-space functional ``<a, eta>`` with
``a = Delta_L^{-1} f`` (``Delta_L`` is symmetric), so the c.g.f. of the
membrane field in direction ``f`` is the c.g.f. of ``Q_L`` at that ``a``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .bergman import TestFunctionPair, fit_exponent, green_field
from .errors import CapacityError, ParameterError
from .gibbs import GaussianOracle, ModelSpec, gaussian_cgf
from .lattice import BoxGeometry, Domain, LatticeField, build_geometry
from .operators import GreenCache, alpha_z, dirichlet_solve, infinite_bigreen, infinite_green
from .potential import OneDMeasure, Potential, cgf_psi, quadratic, variance_nu0
from .sampler import SamplerConfig, sample_Q
from .stats import (Estimate, covariance_matrix_estimate, effective_sample_size, mean_estimate,
                    variance_estimate)

logger = logging.getLogger(__name__)

DEFAULT_NODES = 8
KS_CRIT_1PCT = 1.63
RHS_TOL = 1e-12
# below this |s| the non-quadratic part of psi is summed from its cumulant series
SERIES_CUT = 1e-2


# -- reports -----------------------------------------------------------------


@dataclass
class CheckReport:
    """Rows of one verification run plus a summary for the manifest."""

    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return any(bool(r.get("flag")) for r in self.rows)

    def add(self, check_name, d, L, value, se, reference, flag=False):
        gap = value - reference if reference is not None else None
        self.rows.append({"check_name": check_name, "d": d, "L": L, "value": float(value),
                          "se": float(se), "reference": None if reference is None else float(reference),
                          "gap": None if gap is None else float(gap), "flag": bool(flag)})


def _box_values(geom: BoxGeometry, a) -> np.ndarray:
    if isinstance(a, LatticeField):
        return a.to(Domain.BOX).values
    a = np.asarray(a, dtype=float)
    if a.shape != (geom.n_box,):
        raise ParameterError(f"direction must be a BOX field of length {geom.n_box}")
    return a


def sub_seed(seed: int, *key: int) -> int:
    """Deterministic 63-bit seed for the sub-run labelled by ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# -- thermodynamic integration -------------------------------------------------


def unit_gauss_legendre(n: int):
    """Gauss-Legendre nodes and weights on ``(0, 1)``."""
    if n < 1:
        raise ParameterError("need at least one quadrature node")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class CgfEstimate:
    """Thermodynamic-integration estimate of ``log E_Q exp<a, eta>``.

    Attributes
    ----------
    a : ndarray
        Direction on BOX.
    nodes, weights : ndarray
        Quadrature rule on ``(0, 1)``.
    variances : list of Estimate
        ``Var_{Q^{r_i a}} <a, eta>`` per node.
    value, se : float
        ``sum_i w_i (1 - r_i) Var_i`` and its standard error.
    flag : bool
        Some node had too few effective samples.
    """

    a: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    variances: list
    value: float
    se: float
    flag: bool
    acceptance: tuple = ()

    @property
    def estimate(self) -> Estimate:
        ess = min((v.ess for v in self.variances), default=float("inf"))
        return Estimate(self.value, self.se, ess, self.flag)


def _node_variance(job):
    spec, a, r, config = job
    tilted = spec.with_tilt(r * a)
    batch = sample_Q(tilted, config, observe=lambda phi, eta: (eta @ a)[:, None])
    est = variance_estimate(batch.obs[:, :, 0], config.min_ess)
    flag = est.flag or bool(batch.warnings)
    return replace(est, flag=flag), batch.acceptance_rate


def cgf_thermo(spec: ModelSpec, a, config: SamplerConfig | None = None,
               n_nodes: int = DEFAULT_NODES, map_fn=map) -> CgfEstimate:
    """Cumulant generating function of ``<a, eta>`` under ``Q_L`` by
    thermodynamic integration.

    Parameters
    ----------
    spec : ModelSpec
        Untilted model (any tilt in ``spec`` is replaced at the nodes).
    a : LatticeField or ndarray
        Direction on BOX.
    config : SamplerConfig
        Sampler settings per node; node ``i`` uses a seed derived from
        ``(config.seed, i)``.
    n_nodes : int
    map_fn : callable
        ``map``-like function used to run the independent node jobs, e.g.
        the ``map`` of a process pool.

    Returns
    -------
    CgfEstimate
    """
    config = config or SamplerConfig()
    a = _box_values(spec.geom, a)
    if not np.all(np.isfinite(a)):
        raise ParameterError("direction must be finite")
    nodes, weights = unit_gauss_legendre(n_nodes)
    if not np.any(a):
        zero = [Estimate(0.0, 0.0) for _ in nodes]
        return CgfEstimate(a, nodes, weights, zero, 0.0, 0.0, False)
    jobs = [(spec, a, float(r), replace(config, seed=sub_seed(config.seed, 1, i)))
            for i, r in enumerate(nodes)]
    results = list(map_fn(_node_variance, jobs))
    variances = [res[0] for res in results]
    coef = weights * (1.0 - nodes)
    value = float(sum(c * v.value for c, v in zip(coef, variances)))
    se = math.sqrt(sum((c * v.se) ** 2 for c, v in zip(coef, variances)))
    flag = any(v.flag for v in variances)
    if flag:
        logger.warning("thermodynamic integration: some node has low effective sample size")
    return CgfEstimate(a, nodes, weights, variances, value, se, flag,
                       tuple(res[1] for res in results))


# -- rescaled field -----------------------------------------------------------


def interpolation_weights(geom: BoxGeometry, x) -> tuple:
    """Multilinear interpolation of a BOX field at ``L x`` for ``x`` in [-1, 1]^d.

    Returns
    -------
    idx : ndarray of int
        BOX indices of the cell corners with nonzero weight.
    w : ndarray
        Corresponding weights (summing to one).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (geom.d,) or np.any(np.abs(x) > 1.0 + 1e-12):
        raise ParameterError(f"interpolation point must lie in [-1, 1]^{geom.d}")
    y = np.clip(x * geom.L, -geom.L, geom.L)
    lo = np.floor(y).astype(int)
    lo = np.minimum(lo, geom.L - 1)
    frac = y - lo
    idx, w = [], []
    for corner in itertools.product((0, 1), repeat=geom.d):
        c = np.array(corner)
        weight = float(np.prod(np.where(c == 1, frac, 1.0 - frac)))
        if weight == 0.0:
            continue
        idx.append(geom.index(tuple(int(v) for v in lo + c), Domain.BOX))
        w.append(weight)
    return np.array(idx, dtype=int), np.array(w)


@dataclass(frozen=True, eq=False)
class RescaledField:
    """``L^{d/2 - 2} phi(L x)`` interpolated multilinearly to [-1, 1]^d.

    Parameters
    ----------
    geom : BoxGeometry
    phi : ndarray, shape (..., N)
        BOX values of one or several samples.
    """

    geom: BoxGeometry
    phi: np.ndarray

    @property
    def exponent(self) -> float:
        return self.geom.d / 2.0 - 2.0

    @property
    def scale(self) -> float:
        return float(self.geom.L) ** self.exponent

    def __call__(self, x) -> np.ndarray:
        idx, w = interpolation_weights(self.geom, x)
        return self.scale * (np.asarray(self.phi)[..., idx] @ w)

    def at(self, points) -> np.ndarray:
        """Values at several points, stacked along the last axis."""
        return np.stack([self(p) for p in points], axis=-1)


def rescaled_observable_matrix(geom: BoxGeometry, points) -> np.ndarray:
    """Matrix ``W`` with ``W @ phi`` the rescaled field at ``points``."""
    scale = float(geom.L) ** (geom.d / 2.0 - 2.0)
    W = np.zeros((len(points), geom.n_box))
    for k, p in enumerate(points):
        idx, w = interpolation_weights(geom, p)
        W[k, idx] = scale * w
    return W


# -- infinite volume (d >= 5) -------------------------------------------------


def _support(a_prime):
    """Normalise a compactly supported field given as ``{point: value}``."""
    pts = [tuple(int(v) for v in p) for p in a_prime]
    vals = np.array([float(a_prime[p]) for p in a_prime])
    keep = vals != 0.0
    return [p for p, k in zip(pts, keep) if k], vals[keep]


def _gamma_table(d: int, offsets: np.ndarray) -> np.ndarray:
    """``Gamma`` at integer offsets (rows), through canonical keys."""
    keys = np.sort(np.abs(offsets), axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    vals = np.array([infinite_green(d, tuple(int(v) for v in k)) for k in uniq])
    return vals[np.asarray(inv).ravel()]


@dataclass(frozen=True)
class InfiniteVolumeRHS:
    """``sum_x psi((Gamma * a')(x))`` split into quadratic part and remainder."""

    value: float
    quadratic: float
    remainder: float
    radius: int
    variance: float


def _cumulants(m: OneDMeasure, kmax: int = 6) -> np.ndarray:
    mu = m.mean
    cm = [m.expect(lambda x, j=j: (x - mu) ** j) for j in range(kmax + 1)]
    k = np.zeros(kmax + 1)
    k[1] = mu
    k[2] = cm[2]
    k[3] = cm[3]
    k[4] = cm[4] - 3 * cm[2] ** 2
    k[5] = cm[5] - 10 * cm[3] * cm[2]
    k[6] = cm[6] - 15 * cm[4] * cm[2] - 10 * cm[3] ** 2 + 30 * cm[2] ** 3
    return k


def infinite_volume_rhs(pot: Potential, d: int, a_prime: dict, tol: float = RHS_TOL,
                        max_radius: int = 32) -> InfiniteVolumeRHS:
    """``sum_{x in Z^d} psi((Gamma * a')(x))`` for a finitely supported ``a'``.

    The quadratic part ``(Var/2) sum_x s(x)^2`` equals
    ``(Var/2) sum_{y,y'} a'(y) a'(y') Gamma2(y - y')`` with ``Gamma2`` the
    bi-Laplacian Green's function, so it needs no spatial truncation. The
    remainder ``psi(s) - (Var/2) s^2`` is summed over cubic shells around the
    support until every summand in a shell is below ``tol``.
    """
    if d < 5:
        raise ParameterError("the infinite-volume limit is finite only for d >= 5")
    pts, vals = _support(a_prime)
    m = OneDMeasure.build(pot, 0.0)
    var = m.variance
    if not pts:
        return InfiniteVolumeRHS(0.0, 0.0, 0.0, 0, var)
    if abs(m.mean) > 1e-12:
        raise ParameterError("nu^0 must be centred")
    P = np.array(pts)
    quad = 0.0
    for i, j in itertools.product(range(len(pts)), repeat=2):
        quad += vals[i] * vals[j] * infinite_bigreen(d, P[i] - P[j])
    quad *= 0.5 * var
    kappa = _cumulants(m)

    def remainder(s):
        out = np.empty_like(s)
        small = np.abs(s) < SERIES_CUT
        ss = s[small]
        out[small] = sum(kappa[j] * ss**j / math.factorial(j) for j in range(3, 7))
        for k in np.flatnonzero(~small):
            out[k] = cgf_psi(m, s[k]) - 0.5 * var * s[k] ** 2
        return out

    lo, hi = P.min(axis=0), P.max(axis=0)
    rem = 0.0
    radius = 0
    for radius in range(max_radius + 1):
        ranges = [np.arange(l - radius, h + radius + 1) for l, h in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, d)
        dist = np.maximum(lo - grid, grid - hi).max(axis=1)
        shell = grid[dist == radius]
        s = np.zeros(len(shell))
        for p, v in zip(P, vals):
            s += v * _gamma_table(d, shell - p)
        terms = remainder(s)
        rem += float(terms.sum())
        if radius > 0 and np.max(np.abs(terms)) < tol:
            break
    else:
        logger.warning("infinite-volume remainder not converged at radius %d", max_radius)
    return InfiniteVolumeRHS(float(quad + rem), float(quad), float(rem), radius, float(var))


def quadratic_rhs_closed_form(d: int, a_prime: dict, c: float = 1.0) -> float:
    """``(1 / 2c) sum_x (Gamma * a')(x)^2`` for the quadratic potential."""
    pts, vals = _support(a_prime)
    P = np.array(pts)
    tot = 0.0
    for i, j in itertools.product(range(len(pts)), repeat=2):
        tot += vals[i] * vals[j] * infinite_bigreen(d, P[i] - P[j])
    return 0.5 * tot / c


def phi_direction(geom: BoxGeometry, f, cache: GreenCache | None = None) -> np.ndarray:
    """Eta-coordinate direction ``Delta_L^{-1} f`` of the phi-functional ``<f, phi>``."""
    f = _box_values(geom, f)
    sol = cache.dirichlet_solve(f) if cache is not None else dirichlet_solve(geom, f)
    vals = sol.values if isinstance(sol, LatticeField) else np.asarray(sol)
    return vals[: geom.n_box]


def infinite_volume_check(pot: Potential, a_prime: dict, Ls, d: int = 5,
                          config: SamplerConfig | None = None, n_nodes: int = DEFAULT_NODES,
                          site_budget: int = 10**6, map_fn=map, configs: dict | None = None) -> CheckReport:
    """Compare the finite-volume c.g.f. of ``<a', phi>`` with its infinite-volume limit.

    Parameters
    ----------
    pot : Potential
    a_prime : dict
        ``{point: value}`` with points inside every box of the sweep.
    Ls : sequence of int
    configs : dict, optional
        Per-L sampler settings overriding ``config``.

    Returns
    -------
    CheckReport
        One row per L with ``value = LHS_L``, ``reference = RHS`` and
        ``gap = LHS_L - RHS``. The summary holds the absolute gaps, their
        standard errors and whether the sweep stopped early.
    """
    config = config or SamplerConfig()
    rhs = infinite_volume_rhs(pot, d, a_prime)
    rep = CheckReport("infinite_volume")
    rep.summary.update(rhs=rhs.value, rhs_quadratic=rhs.quadratic, rhs_remainder=rhs.remainder,
                       rhs_radius=rhs.radius, var_nu0=rhs.variance, truncated=False)
    gaps, ses = [], []
    for L in Ls:
        try:
            geom = build_geometry(d, L, site_budget=site_budget)
        except CapacityError as exc:
            logger.warning("sweep stopped at L=%d: %s", L, exc)
            rep.summary["truncated"] = True
            rep.add("infinite_volume", d, L, float("nan"), float("nan"), rhs.value, flag=True)
            break
        f = np.zeros(geom.n_box)
        for p, v in a_prime.items():
            f[geom.index(tuple(p), Domain.BOX)] += v
        spec = ModelSpec(geom, pot)
        a = phi_direction(geom, f, spec.cache)
        cfg = (configs or {}).get(L, config)
        est = cgf_thermo(spec, a, cfg, n_nodes, map_fn)
        rep.add("infinite_volume", d, L, est.value, est.se, rhs.value, flag=est.flag)
        gaps.append(abs(est.value - rhs.value))
        ses.append(est.se)
    rep.summary.update(abs_gaps=gaps, gap_se=ses)
    return rep


# -- Gaussian approximation ----------------------------------------------------


def gaussian_approx_check(pot: Potential, pair: TestFunctionPair, Ls, amplitude: float = 1.0,
                          config: SamplerConfig | None = None, n_nodes: int = DEFAULT_NODES,
                          map_fn=map, configs: dict | None = None) -> CheckReport:
    """c.g.f. of ``<f_L, phi>`` against the Gaussian model with covariance
    scaled by ``Var_{nu^0} xi``.

    The eta direction is ``a = amplitude * Gamma_L * f_L`` (the field of
    :func:`membrane_lab.bergman.green_field`). Rows carry ``value = LHS``,
    ``reference = (Var/2) <a, Sigma_1 a>``; the summary holds the fitted
    decay exponent of the absolute gap.
    """
    config = config or SamplerConfig()
    var = variance_nu0(pot)
    d = pair.d
    rep = CheckReport("gaussian_approx", summary={"var_nu0": var})
    gaps, ses = [], []
    for L in Ls:
        geom = build_geometry(d, L)
        spec = ModelSpec(geom, pot)
        a = amplitude * green_field(geom, pair)[: geom.n_box]
        oracle = GaussianOracle(geom, 1.0, cache=spec.cache)
        ref = gaussian_cgf(oracle, a, scale=var)
        est = cgf_thermo(spec, a, (configs or {}).get(L, config), n_nodes, map_fn)
        rep.add("gaussian_approx", d, L, est.value, est.se, ref, flag=est.flag)
        gaps.append(abs(est.value - ref))
        ses.append(est.se)
    rep.summary.update(abs_gaps=gaps, gap_se=ses)
    if len(Ls) >= 2 and all(g > 0 for g in gaps):
        rep.summary["gap_exponent"] = fit_exponent(Ls, gaps)
    return rep


# -- scaling limit ---------------------------------------------------------------


def scaling_direction(geom: BoxGeometry, points, coefs, cache: GreenCache | None = None) -> np.ndarray:
    """Eta direction of ``sum_i c_i L^{d/2-2} phi(round(L y_i))``."""
    f = np.zeros(geom.n_box)
    scale = float(geom.L) ** (geom.d / 2.0 - 2.0)
    for y, c in zip(points, coefs):
        site = tuple(int(v) for v in np.rint(np.asarray(y, float) * geom.L))
        f[geom.index(site, Domain.BOX)] += scale * c
    return phi_direction(geom, f, cache)


def rescaled_covariance_reference(geom: BoxGeometry, points, cache: GreenCache | None = None,
                                  c: float = 1.0) -> np.ndarray:
    """Exact covariance of the interpolated rescaled field for ``quadratic(c)``.

    At lattice points this is ``L^{d-4} G_L(L x_i, L x_j) / c`` with ``G_L``
    the bi-Laplacian Green's function.
    """
    cache = cache or GreenCache(geom)
    W = rescaled_observable_matrix(geom, points)
    cols = np.stack([np.asarray(cache.bilaplacian.solve(w)) for w in W], axis=1)
    return W @ cols / c


def scaling_limit_check(pot: Potential, points, coefs, d: int, Ls,
                        config: SamplerConfig | None = None, n_nodes: int = DEFAULT_NODES,
                        with_cgf: bool = True, gaussian_mcmc: bool = True,
                        map_fn=map, configs: dict | None = None) -> CheckReport:
    """Covariance and c.g.f. of the rescaled field at a few points.

    Per L the report holds, for every pair ``i <= j`` of points, the
    empirical covariance under ``pot`` (``cov_nongauss``) against
    ``Var_{nu^0} xi`` times the exact Gaussian covariance, the ratio of the
    two (``cov_ratio``, reference ``Var_{nu^0} xi``), optionally the
    empirical covariance under ``quadratic(1)`` against the exact one
    (``cov_gauss``), and optionally the c.g.f. of ``sum c_i phibar(x_i)``
    against the scaled Gaussian value (``scaling_cgf``).
    """
    if d not in (2, 3):
        raise ParameterError("the scaling limit check is for d = 2 or 3")
    if len(points) != len(coefs) or not 1 <= len(points) <= 5:
        raise ParameterError("need between one and five points with one coefficient each")
    config = config or SamplerConfig()
    var = variance_nu0(pot)
    rep = CheckReport("scaling_limit", summary={"var_nu0": var})
    k = len(points)
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    for L in Ls:
        geom = build_geometry(d, L)
        cfg = (configs or {}).get(L, config)
        spec = ModelSpec(geom, pot)
        W = rescaled_observable_matrix(geom, points)
        exact = rescaled_covariance_reference(geom, points, spec.cache)
        observe = lambda phi, eta: phi @ W.T  # noqa: E731
        runs = [("cov_nongauss", spec, var, 2)]
        if gaussian_mcmc:
            runs.append(("cov_gauss", ModelSpec(geom, quadratic(1.0), cache=spec.cache), 1.0, 3))
        for name, sp, scale, key in runs:
            batch = sample_Q(sp, replace(cfg, seed=sub_seed(cfg.seed, key, L)), observe=observe)
            cov, se, ess = covariance_matrix_estimate(batch.obs)
            flag = ess < cfg.min_ess or bool(batch.warnings)
            for i, j in pairs:
                rep.add(name, d, L, cov[i, j], se[i, j], scale * exact[i, j], flag=flag)
                if name == "cov_nongauss":
                    rep.add("cov_ratio", d, L, cov[i, j] / exact[i, j], se[i, j] / abs(exact[i, j]),
                            var, flag=flag)
        if with_cgf:
            a = scaling_direction(geom, points, coefs, spec.cache)
            ref = gaussian_cgf(GaussianOracle(geom, 1.0, cache=spec.cache), a, scale=var)
            est = cgf_thermo(spec, a, replace(cfg, seed=sub_seed(cfg.seed, 4, L)), n_nodes, map_fn)
            rep.add("scaling_cgf", d, L, est.value, est.se, ref, flag=est.flag)
    return rep


# -- single-site marginal ---------------------------------------------------------


def symmetric_images(geom: BoxGeometry, x0) -> list:
    """Distinct images of ``x0`` under the symmetry group of the cube."""
    x0 = tuple(int(v) for v in x0)
    out = set()
    for perm in itertools.permutations(range(geom.d)):
        for signs in itertools.product((1, -1), repeat=geom.d):
            out.add(tuple(s * x0[p] for s, p in zip(signs, perm)))
    return sorted(out)


def ks_distance(samples: np.ndarray, cdf) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    F = cdf(x)
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


CONDITIONAL_GRID = 201
# boundary sites with P^z(x0) below this enter the conditional law through a
# third-order Taylor expansion; the neglected term is O((P^z(x0) xi)^4)
NEAR_COUPLING = 0.02


class _ConditionalCdf:
    """Observer returning ``F(. | rest) - F_nu`` on a grid for chosen sites.

    Given every coordinate except ``eta(x0)``, the law of ``eta(x0)`` is
    ``nu^{b(x0)}`` reweighted by ``exp(-sum_z V(alpha^z))``, and each
    ``alpha^z`` is affine in ``eta(x0)`` with slope ``-P^z(x0)``. Averaging
    these conditional distribution functions over samples estimates the
    marginal distribution function with far less noise than the empirical
    one when the boundary coupling is weak.
    """

    def __init__(self, spec: ModelSpec, groups, measures, tol: float = 1e-12):
        geom = spec.geom
        self.pot = spec.pot
        self.nbr = geom.interior_neighbor()
        self.measures = measures
        self.base = [np.cumsum(m.weights) - 0.5 * m.weights for m in measures]
        self.items = []
        for grp in groups:
            sites = []
            for i0 in grp:
                e = np.zeros(geom.n_box)
                e[i0] = 1.0
                w = -np.asarray(alpha_z(geom, e))  # P^z(x0)
                keep = w > tol * w.max()
                near = np.flatnonzero(keep & (w >= NEAR_COUPLING))
                far = np.flatnonzero(keep & (w < NEAR_COUPLING))
                sites.append((i0, near, w[near], far, w[far]))
            self.items.append(sites)

    @property
    def width(self) -> int:
        return sum(m.xi.size for m in self.measures)

    def __call__(self, phi, eta):
        alpha = phi[:, self.nbr]  # Delta phi(z) = phi(z~) on the boundary
        out = []
        for sites, m, F0 in zip(self.items, self.measures, self.base):
            acc = np.zeros((phi.shape[0], m.xi.size))
            s = m.xi
            for i0, near, wn, far, wf in sites:
                x = eta[:, i0 : i0 + 1]
                c = alpha[:, near] + wn * x
                log_g = -self.pot.V(c[:, :, None] - wn[None, :, None] * s).sum(axis=1)
                # weakly coupled boundary sites: third-order expansion in s
                cf = alpha[:, far] + wf * x
                k1 = (wf * self.pot.dV(cf)).sum(axis=1)[:, None]
                k2 = (wf**2 * self.pot.d2V(cf)).sum(axis=1)[:, None]
                k3 = (wf**3 * self.pot.d3V(cf)).sum(axis=1)[:, None]
                log_g += s * k1 - 0.5 * s**2 * k2 + s**3 * k3 / 6.0
                p = m.weights * np.exp(log_g - log_g.max(axis=1, keepdims=True))
                F = (np.cumsum(p, axis=1) - 0.5 * p) / p.sum(axis=1, keepdims=True)
                acc += F - F0
            out.append(acc / len(sites))
        return np.concatenate(out, axis=1)


def marginal_check(spec: ModelSpec, x0s, config: SamplerConfig | None = None,
                   reference: str = "nu", conditional: bool = False) -> CheckReport:
    """Kolmogorov-Smirnov distance between the law of ``eta(x0)`` and ``nu^{b(x0)}``.

    All sites of ``x0s`` are recorded from one sampling run. When the model
    is symmetric under the cube group and ``eta -> -eta`` (zero tilt and
    even potential) the samples of all images of ``x0`` and their negatives
    are pooled.

    Parameters
    ----------
    spec : ModelSpec
    x0s : sequence of points in BOX
    reference : {"nu", "oracle"}
        Compare with ``nu^{b(x0)}`` (default) or with the exact Gaussian
        marginal (quadratic potentials only).
    conditional : bool
        Also estimate the marginal distribution function by averaging the
        exact conditional law of ``eta(x0)`` given the other coordinates
        (rows ``marginal_ks_conditional``; ``reference="nu"`` only).

    Returns
    -------
    CheckReport
        Rows ``marginal_ks`` with ``value`` the KS distance of the empirical
        distribution function, ``se`` its null-distribution mean
        ``0.8687 / sqrt(n_eff)`` and ``reference`` the 1% critical value
        ``1.63 / sqrt(n_eff)``. Rows ``marginal_ks_conditional`` carry the
        conditional estimate of the same distance and the standard error of
        the distribution-function difference where it peaks. The summary
        holds rho, the distances and their fitted exponents against rho.
    """
    config = config or SamplerConfig()
    if reference not in ("nu", "oracle"):
        raise ParameterError(f"unknown reference {reference!r}")
    if conditional and reference != "nu":
        raise ParameterError("the conditional estimator compares with nu only")
    geom = spec.geom
    symmetric = not np.any(spec.b) and spec.pot.symmetric
    groups = []
    for x0 in x0s:
        imgs = symmetric_images(geom, x0) if symmetric else [tuple(int(v) for v in x0)]
        groups.append([geom.index(p, Domain.BOX) for p in imgs])
    flat = np.array([i for grp in groups for i in grp])
    cond = None
    if conditional:
        measures = [OneDMeasure.build(spec.pot, float(spec.b[grp[0]]), nodes=CONDITIONAL_GRID)
                    for grp in groups]
        cond = _ConditionalCdf(spec, groups, measures)
        observe = lambda phi, eta: np.concatenate([eta[:, flat], cond(phi, eta)], axis=1)  # noqa: E731
    else:
        observe = lambda phi, eta: eta[:, flat]  # noqa: E731
    batch = sample_Q(spec, config, observe=observe)
    rep = CheckReport("marginal", summary={"pooled_images": symmetric})
    oracle = None
    if reference == "oracle":
        oracle = GaussianOracle.from_potential(geom, spec.pot, cache=spec.cache)
    rhos, dists = [], []
    start = 0
    for x0, grp in zip(x0s, groups):
        data = batch.obs[:, :, start : start + len(grp)]
        start += len(grp)
        n_eff = sum(effective_sample_size(data[:, :, k]) for k in range(len(grp)))
        pooled = np.concatenate([data.ravel(), -data.ravel()]) if symmetric else data.ravel()
        i0 = grp[0]
        if oracle is not None:
            sd = math.sqrt(oracle.apply(np.eye(geom.n_box)[i0])[i0])
            mu = float(oracle.mean(spec.b)[i0])
            cdf = lambda x, mu=mu, sd=sd: special.ndtr((x - mu) / sd)  # noqa: E731
        else:
            cdf = OneDMeasure.build(spec.pot, float(spec.b[i0])).cdf
        dist = ks_distance(pooled, cdf)
        flag = n_eff < config.min_ess
        crit = KS_CRIT_1PCT / math.sqrt(max(n_eff, 1.0))
        rep.add("marginal_ks", geom.d, geom.L, dist, 0.8687 / math.sqrt(max(n_eff, 1.0)), crit, flag=flag)
        rhos.append(int(geom.rho[i0]))
        dists.append(dist)
    rep.summary.update(rho=rhos, ks=dists, acceptance=batch.acceptance_rate)
    if len(rhos) >= 2 and all(v > 0 for v in dists):
        rep.summary["ks_exponent"] = fit_exponent(rhos, dists)
    if cond is not None:
        cdists, cses = [], []
        for m in cond.measures:
            diff = batch.obs[:, :, start : start + m.xi.size]
            start += m.xi.size
            if symmetric:
                # the grid is symmetric and F(-t) = 1 - F(t) for both laws
                diff = 0.5 * (diff - diff[:, :, ::-1])
            j = int(np.argmax(np.abs(diff.mean(axis=(0, 1)))))
            est = mean_estimate(diff[:, :, j], config.min_ess)
            rep.add("marginal_ks_conditional", geom.d, geom.L, abs(est.value), est.se, None, flag=est.flag)
            cdists.append(abs(est.value))
            cses.append(est.se)
        rep.summary.update(ks_conditional=cdists, ks_conditional_se=cses)
        if len(rhos) >= 2 and all(v > 0 for v in cdists):
            rep.summary["ks_conditional_exponent"] = fit_exponent(rhos, cdists)
    return rep
