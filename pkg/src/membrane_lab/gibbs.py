"""Hamiltonians of the membrane model, the Gaussian oracle and energy evaluation.

Two coordinate systems describe the same measure:

* ``phi`` on BOX (zero outside), with ``H(phi) = sum_{CL1} V(Delta phi)``;
* ``eta = Delta_L phi`` on BOX, with the boundary values recovered as
  ``alpha^z(eta) = Delta phi(z)``.

A tilt ``b`` on BOX adds ``-<b, eta>`` to the Hamiltonian. Since ``Delta_L``
is symmetric, in ``phi`` coordinates this is ``-<Delta_L b, phi>``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import ParameterError
from .lattice import BoxGeometry, Domain, LatticeField
from .operators import GreenCache, alpha_adjoint, laplacian
from .potential import OneDMeasure, Potential, solve_U
from .stats import Estimate, mean_estimate


class Coordinates(str, enum.Enum):
    PHI = "PHI"
    ETA = "ETA"


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Geometry, potential and tilt of a (tilted) membrane measure.

    Parameters
    ----------
    geom : BoxGeometry
    pot : Potential
    b : ndarray, optional
        Tilt on BOX; zero by default.
    coords : Coordinates
        Preferred coordinate system (informational).
    cache : GreenCache, optional
        Shared operator cache; created on demand.
    """

    geom: BoxGeometry
    pot: Potential
    b: np.ndarray | None = None
    coords: Coordinates = Coordinates.PHI
    cache: GreenCache | None = field(default=None, repr=False)

    def __post_init__(self):
        if isinstance(self.b, LatticeField):
            b = self.b.to(Domain.BOX).values
        elif self.b is None:
            b = np.zeros(self.geom.n_box)
        else:
            b = np.asarray(self.b, dtype=float)
        if b.shape != (self.geom.n_box,):
            raise ParameterError(f"tilt must be a BOX field of length {self.geom.n_box}")
        if not np.all(np.isfinite(b)):
            raise ParameterError("tilt must be finite")
        object.__setattr__(self, "b", b)
        if self.cache is None:
            object.__setattr__(self, "cache", GreenCache(self.geom))

    @property
    def b_phi(self) -> np.ndarray:
        """``Delta_L b``, the tilt expressed in phi coordinates."""
        return laplacian(self.geom, self.b)

    def with_tilt(self, b) -> "ModelSpec":
        return replace(self, b=np.asarray(b, dtype=float))


def phi_energy(spec: ModelSpec, phi: np.ndarray):
    """Energy, gradient and ``Delta phi`` on CL1 for a batch of phi fields.

    Returns
    -------
    H : ndarray, shape (...)
    grad : ndarray, shape (..., N)
    eta_cl1 : ndarray, shape (..., N_cl1)
    """
    g, pot = spec.geom, spec.pot
    eta = laplacian(g, phi, out=Domain.CL1)
    bphi = spec.b_phi
    H = pot.V(eta).sum(axis=-1) - phi @ bphi
    grad = laplacian(g, pot.dV(eta), out=Domain.BOX) - bphi
    return H, grad, eta


def hamiltonian_phi(spec: ModelSpec, phi):
    """``H(phi) = sum_{CL1} V(Delta phi) - <Delta_L b, phi>`` and its gradient.

    Parameters
    ----------
    spec : ModelSpec
    phi : LatticeField or ndarray, shape (..., N)
        BOX values, zero-extended outside.

    Returns
    -------
    H : float or ndarray
    grad : ndarray
        ``Delta(V'(Delta phi)) - Delta_L b`` on BOX.
    """
    vals = phi.to(Domain.BOX).values if isinstance(phi, LatticeField) else np.asarray(phi, float)
    H, grad, _ = phi_energy(spec, vals)
    return (float(H) if np.ndim(H) == 0 else H), grad


def hamiltonian_eta(spec: ModelSpec, eta):
    """``H^b(eta) = sum V(eta) + sum_z V(alpha^z(eta)) - <b, eta>`` and gradient.

    The gradient is ``V'(eta) - sum_z V'(alpha^z) P^z - b``.
    """
    vals = eta.to(Domain.BOX).values if isinstance(eta, LatticeField) else np.asarray(eta, float)
    g, pot = spec.geom, spec.pot
    alpha = spec.cache.alpha(vals)
    H = pot.V(vals).sum(axis=-1) + pot.V(alpha).sum(axis=-1) - vals @ spec.b
    grad = pot.dV(vals) - alpha_adjoint(g, pot.dV(alpha)) - spec.b
    return (float(H) if np.ndim(H) == 0 else H), grad


def hessian_eta(spec: ModelSpec, eta: np.ndarray) -> np.ndarray:
    """Dense Hessian ``diag V''(eta) + P^T diag V''(alpha) P`` (small boxes)."""
    P = spec.cache.P
    alpha = -P @ eta
    return np.diag(spec.pot.d2V(eta)) + (P.T * spec.pot.d2V(alpha)) @ P


# -- Gaussian oracle -----------------------------------------------------------


class GaussianOracle:
    """Exact law of ``eta`` for the quadratic potential ``c xi^2 / 2``.

    The precision is ``c (I + P^T P)``. For large boxes the covariance is
    applied without forming ``P`` through ``Sigma = Delta_L A^{-1} Delta_L / c``
    with ``A`` the bi-Laplacian.

    Parameters
    ----------
    geom : BoxGeometry
    c : float
    cache : GreenCache, optional
    dense : bool, optional
        Form and factor the precision matrix (default when N <= 4000).
    """

    def __init__(self, geom: BoxGeometry, c: float = 1.0, cache: GreenCache | None = None,
                 dense: bool | None = None):
        if not c > 0:
            raise ParameterError("Gaussian oracle needs c > 0")
        self.geom, self.c = geom, float(c)
        self.cache = cache or GreenCache(geom)
        self.dense = geom.n_box <= 4000 if dense is None else dense
        self._chol = None
        if self.dense:
            P = self.cache.P
            self.precision = self.c * (np.eye(geom.n_box) + P.T @ P)
            self._chol = linalg.cho_factor(self.precision, lower=True)

    @classmethod
    def from_potential(cls, geom: BoxGeometry, pot: Potential, **kw) -> "GaussianOracle":
        if not pot.is_quadratic:
            raise ParameterError("the Gaussian oracle needs a quadratic potential")
        return cls(geom, pot.c_min, **kw)

    def apply(self, a: np.ndarray) -> np.ndarray:
        """``Sigma a``."""
        a = np.asarray(a, dtype=float)
        if self._chol is not None:
            return linalg.cho_solve(self._chol, a.T).T
        g = self.geom
        return laplacian(g, self.cache.bilaplacian.solve(laplacian(g, a))) / self.c

    def covariance(self) -> np.ndarray:
        return self.apply(np.eye(self.geom.n_box))

    def mean(self, b: np.ndarray) -> np.ndarray:
        """Mean of ``eta`` under the tilt ``b``."""
        return self.apply(b)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws through the Cholesky factor of the precision."""
        if self._chol is None:
            raise ParameterError("direct sampling needs the dense oracle")
        z = rng.standard_normal((n, self.geom.n_box))
        Lf = np.tril(self._chol[0])
        return linalg.solve_triangular(Lf, z.T, lower=True, trans="T").T


def gaussian_cgf(oracle: GaussianOracle, a, scale: float = 1.0) -> float:
    """``(1/2) <a, Sigma a>``, optionally with ``Sigma`` multiplied by ``scale``."""
    vals = a.to(Domain.BOX).values if isinstance(a, LatticeField) else np.asarray(a, float)
    return 0.5 * scale * float(vals @ oracle.apply(vals))


def boundary_coefficient_minimizer(P: np.ndarray, gamma: np.ndarray, c: float) -> np.ndarray:
    """Minimiser over eta-independent profiles for ``a = sum_z gamma_z P^z``.

    Solves ``lambda_z + sum_w lambda_w <P^z, P^w>_BOX = gamma_z / c`` and returns
    ``sum_z lambda_z P^z`` on BOX.
    """
    gram = P @ P.T
    lam = linalg.solve(np.eye(P.shape[0]) + gram, np.asarray(gamma, float) / c, assume_a="pos")
    return lam @ P


# -- separable profiles and energies -----------------------------------------


class ProfileKind(str, enum.Enum):
    ANSATZ_W = "ANSATZ_W"
    CONSTANT = "CONSTANT"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True, eq=False)
class SeparableProfile:
    """Profile ``v(x, eta) = g_x(eta(x))`` given by vectorised evaluators.

    ``g(eta)`` and ``dg(eta)`` map arrays of shape ``(..., N)`` to arrays of
    the same shape holding ``g_x(eta(x))`` and ``g_x'(eta(x))``.
    """

    g: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]
    kind: ProfileKind = ProfileKind.CUSTOM

    @classmethod
    def constant(cls, values) -> "SeparableProfile":
        values = np.asarray(values, dtype=float)
        return cls(lambda eta: np.broadcast_to(values, np.shape(eta)),
                   lambda eta: np.zeros(np.shape(eta)), ProfileKind.CONSTANT)

    @classmethod
    def zero(cls, n: int) -> "SeparableProfile":
        return cls.constant(np.zeros(n))


def default_layer_width(d: int, L: int) -> int:
    """``round(L^(1 - eps))`` with ``eps = (d-1)/(3d-1)``, clipped to [1, L]."""
    eps = (d - 1) / (3 * d - 1)
    return int(min(max(round(L ** (1 - eps)), 1), L))


def ansatz_w(geom: BoxGeometry, pot: Potential, a: np.ndarray, b: np.ndarray | None = None,
             ell: int | None = None, **grid) -> SeparableProfile:
    """The separable ansatz ``w``.

    Inside ``Box_{L-ell}``: ``g_x = a(x) U^{b(x)}``. On the layer outside it:
    ``g_x = a(x) E_{nu^0} U^0`` (constant in eta).
    """
    a = np.asarray(a, dtype=float)[: geom.n_box]
    b = np.zeros(geom.n_box) if b is None else np.asarray(b, dtype=float)
    ell = default_layer_width(geom.d, geom.L) if ell is None else int(ell)
    inner = np.abs(geom.interior_sites).max(axis=1) <= geom.L - ell
    u0 = solve_U(OneDMeasure.build(pot, 0.0, **grid))
    profiles = {}
    keys = np.round(b, 12)
    for beta in np.unique(keys[inner]):
        profiles[float(beta)] = u0 if beta == 0.0 else solve_U(OneDMeasure.build(pot, float(beta), **grid))
    groups = [(np.flatnonzero(inner & (keys == beta)), prof) for beta, prof in profiles.items()]
    layer_const = a * u0.mean

    def g(eta):
        out = np.broadcast_to(layer_const, np.shape(eta)).copy()
        for idx, prof in groups:
            out[..., idx] = a[idx] * prof(eta[..., idx])
        return out

    def dg(eta):
        out = np.zeros(np.shape(eta))
        for idx, prof in groups:
            out[..., idx] = a[idx] * prof.derivative(eta[..., idx])
        return out

    return SeparableProfile(g, dg, ProfileKind.ANSATZ_W)


def _eta_samples(samples) -> np.ndarray:
    eta = samples.eta if hasattr(samples, "eta") else np.asarray(samples, dtype=float)
    if eta.ndim == 2:
        eta = eta[None]
    return eta


def _energy_series(profile, a, eta, pot, spec=None):
    v = profile.g(eta)
    dv = profile.dg(eta)
    series = 0.5 * np.sum(dv**2 + pot.d2V(eta) * v**2, axis=-1) - v @ a
    if spec is not None:
        alpha_eta = spec.cache.alpha(eta)
        alpha_v = spec.cache.alpha(v)
        series = series + 0.5 * np.sum(pot.d2V(alpha_eta) * alpha_v**2, axis=-1)
    return series


def evaluate_F(profile: SeparableProfile, a, samples, pot: Potential,
               min_ess: float = 100.0) -> Estimate:
    """Monte Carlo estimate of the energy without boundary term.

    ``E[ (1/2) sum_x (g_x'(eta_x)^2 + V''(eta_x) g_x(eta_x)^2) - sum_x a(x) g_x(eta_x) ]``

    Parameters
    ----------
    profile : SeparableProfile
    a : ndarray
        Direction on BOX.
    samples : SampleBatch or ndarray, shape (chains, draws, N) or (draws, N)
    pot : Potential
    """
    eta = _eta_samples(samples)
    a = np.asarray(a, dtype=float)[: eta.shape[-1]]
    return mean_estimate(_energy_series(profile, a, eta, pot), min_ess)


def evaluate_E(profile: SeparableProfile, a, samples, spec: ModelSpec,
               min_ess: float = 100.0) -> Estimate:
    """As :func:`evaluate_F` plus ``(1/2) E[sum_z V''(alpha^z(eta)) alpha^z(v)^2]``."""
    eta = _eta_samples(samples)
    a = np.asarray(a, dtype=float)[: eta.shape[-1]]
    return mean_estimate(_energy_series(profile, a, eta, spec.pot, spec), min_ess)


def boundary_term(profile: SeparableProfile, samples, spec: ModelSpec,
                  min_ess: float = 100.0) -> Estimate:
    """``(1/2) E[sum_z V''(alpha^z(eta)) alpha^z(v)^2]`` alone."""
    eta = _eta_samples(samples)
    v = profile.g(eta)
    series = 0.5 * np.sum(spec.pot.d2V(spec.cache.alpha(eta)) * spec.cache.alpha(v) ** 2, axis=-1)
    return mean_estimate(series, min_ess)
