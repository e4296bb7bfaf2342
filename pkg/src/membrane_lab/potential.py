"""Single-spin potentials and the one-dimensional tilted measures they induce.

For a potential ``V`` the tilted single-site law is

    nu^beta(dxi) = exp(beta * xi - V(xi)) dxi / J(beta).

Everything here is computed on a uniform trapezoid grid. The trapezoid rule
is spectrally accurate for the smooth, rapidly decaying integrands involved,
so a moderate node count reaches machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from .errors import ParameterError, SolverError, TruncationError

DEFAULT_NODES = 2049
DEFAULT_MAX_TILT = 10.0
TAIL_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Potential:
    """A symmetric, uniformly convex single-spin potential.

    Attributes
    ----------
    name : str
        Family name (``"quadratic"`` or ``"logcosh"``).
    params : dict
        Family parameters.
    V, dV, d2V, d3V : callable
        Vectorised evaluators of the potential and its first three derivatives.
    c_min, c_max : float
        Infimum and supremum of ``V''``.
    t_max : float
        Supremum of ``|V'''|``.
    symmetric : bool
        Whether ``V(xi) = V(-xi)``.
    """

    name: str
    params: dict
    V: Callable[[np.ndarray], np.ndarray]
    dV: Callable[[np.ndarray], np.ndarray]
    d2V: Callable[[np.ndarray], np.ndarray]
    d3V: Callable[[np.ndarray], np.ndarray]
    c_min: float
    c_max: float
    t_max: float
    symmetric: bool = True

    @property
    def tag(self) -> str:
        """Stable text identifier, e.g. ``logcosh(c=1.0,a=0.5)``."""
        inner = ",".join(f"{k}={float(v)!r}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"

    @property
    def is_quadratic(self) -> bool:
        return self.c_min == self.c_max


def _log_cosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)


def _sech2(x):
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / (1.0 + e) ** 2


def quadratic(c: float = 1.0) -> Potential:
    """``V(xi) = c xi^2 / 2``."""
    c = float(c)
    if not c > 0:
        raise ParameterError(f"quadratic potential needs c > 0, got {c}")
    return Potential(
        name="quadratic",
        params={"c": c},
        V=lambda x: 0.5 * c * np.square(x),
        dV=lambda x: c * np.asarray(x, dtype=float),
        d2V=lambda x: np.full(np.shape(x), c),
        d3V=lambda x: np.zeros(np.shape(x)),
        c_min=c,
        c_max=c,
        t_max=0.0,
    )


def logcosh(c: float = 1.0, a: float = 0.5) -> Potential:
    """``V(xi) = c xi^2 / 2 + a log cosh(xi)``.

    ``V'' = c + a sech^2`` ranges over ``(c, c + a]`` and
    ``sup |V'''| = a sup |2 sech^2 tanh| = 4 sqrt(3) a / 9``.
    """
    c, a = float(c), float(a)
    if not c > 0:
        raise ParameterError(f"logcosh potential needs c > 0, got {c}")
    if a < 0:
        raise ParameterError(f"logcosh potential needs a >= 0, got {a}")
    return Potential(
        name="logcosh",
        params={"c": c, "a": a},
        V=lambda x: 0.5 * c * np.square(x) + a * _log_cosh(x),
        dV=lambda x: c * np.asarray(x, dtype=float) + a * np.tanh(x),
        d2V=lambda x: c + a * _sech2(x),
        d3V=lambda x: -2.0 * a * _sech2(x) * np.tanh(x),
        c_min=c,
        c_max=c + a,
        t_max=a * 4.0 * math.sqrt(3.0) / 9.0,
    )


_REGISTRY = {"quadratic": quadratic, "logcosh": logcosh}


def builtin_potentials(name: str, params: dict | None = None, **kwargs) -> Potential:
    """Instantiate one of the built-in potential families by name.

    Parameters
    ----------
    name : {"quadratic", "logcosh"}
    params : dict, optional
        Keyword parameters of the family (``c`` and, for logcosh, ``a``).

    Examples
    --------
    >>> builtin_potentials("logcosh", {"c": 1.0, "a": 0.5}).c_max
    1.5
    """
    if name not in _REGISTRY:
        raise ParameterError(f"unknown potential {name!r}; choose from {sorted(_REGISTRY)}")
    merged = dict(params or {})
    merged.update(kwargs)
    try:
        return _REGISTRY[name](**merged)
    except TypeError as exc:
        raise ParameterError(str(exc)) from None


def _mode(pot: Potential, beta: float) -> float:
    """Maximiser of ``beta*xi - V(xi)``, i.e. the root of ``V'(xi) = beta``."""
    if beta == 0.0 and pot.symmetric:
        return 0.0
    # V' is increasing with slope >= c_min, so the root lies within |beta|/c_min
    span = abs(beta) / pot.c_min + 1.0
    return float(optimize.brentq(lambda x: float(pot.dV(x)) - beta, -span, span, xtol=1e-14))


@dataclass(frozen=True, eq=False)
class OneDMeasure:
    """Quadrature representation of ``nu^beta``.

    The grid is centred at the mode of the density and has half-width
    ``radius`` (default ``8 / sqrt(c_min)``). At ``beta = 0`` the grid is the
    symmetric interval ``[-R, R]``.
    """

    pot: Potential
    beta: float
    xi: np.ndarray
    h: float
    log_J: float
    weights: np.ndarray
    tail_mass: float
    radius: float
    center: float
    log_density: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, pot: Potential, beta: float = 0.0, radius: float | None = None,
              nodes: int = DEFAULT_NODES) -> "OneDMeasure":
        beta = float(beta)
        if radius is None:
            radius = 8.0 / math.sqrt(pot.c_min)
        if nodes < 5 or nodes % 2 == 0:
            raise ParameterError("node count must be odd and at least 5")
        center = _mode(pot, beta)
        xi = center + np.linspace(-radius, radius, nodes)
        h = 2.0 * radius / (nodes - 1)
        logp = beta * xi - pot.V(xi)
        shift = logp.max()
        trap = np.full(nodes, h)
        trap[[0, -1]] *= 0.5
        unnorm = trap * np.exp(logp - shift)
        total = unnorm.sum()
        weights = unnorm / total
        # Mills-ratio estimate of the mass beyond each end of the grid; the
        # log-density is concave with slope at least c_min*radius there.
        slope = pot.c_min * radius
        dens_ends = np.exp(logp[[0, -1]] - shift) / total
        tail = float(dens_ends.sum() / slope)
        return cls(pot=pot, beta=beta, xi=xi, h=h, log_J=float(np.log(total) + shift),
                   weights=weights, tail_mass=tail, radius=float(radius), center=center,
                   log_density=logp)

    def expect(self, f) -> float:
        """Quadrature expectation of ``f(xi)``."""
        vals = f(self.xi) if callable(f) else np.asarray(f)
        return float(np.dot(self.weights, vals))

    @property
    def mean(self) -> float:
        return self.expect(lambda x: x)

    @property
    def variance(self) -> float:
        m = self.mean
        return self.expect(lambda x: (x - m) ** 2)

    def cdf(self, x) -> np.ndarray:
        """Distribution function, piecewise linear between nodes."""
        c = np.cumsum(self.weights)
        c = (c - 0.5 * self.weights) / c[-1]  # midpoint convention
        return np.interp(x, self.xi, c, left=0.0, right=1.0)


def one_d_measure(pot: Potential, beta: float = 0.0, **kw) -> OneDMeasure:
    """Build the quadrature representation of ``nu^beta`` (see OneDMeasure)."""
    return OneDMeasure.build(pot, beta, **kw)


def cgf_psi(m: OneDMeasure, lam: float, max_tilt: float = DEFAULT_MAX_TILT) -> float:
    """Cumulant generating function ``psi(lam) = log E_{nu^0} exp(lam xi)``.

    The tilted integral is evaluated on a grid of the same width recentred
    at the mode of ``exp(lam xi - V)``.

    Raises
    ------
    ParameterError
        If ``m`` is not untilted or ``|lam|`` exceeds ``max_tilt``.
    TruncationError
        If either grid misses more than ``1e-12`` of its mass.
    """
    if m.beta != 0.0:
        raise ParameterError("cgf_psi expects the untilted measure")
    lam = float(lam)
    if abs(lam) > max_tilt:
        raise ParameterError(f"|lambda| = {abs(lam)} exceeds the maximal tilt {max_tilt}")
    if lam == 0.0:
        return 0.0
    tilted = OneDMeasure.build(m.pot, lam, radius=m.radius, nodes=m.xi.size)
    for meas in (m, tilted):
        if meas.tail_mass > TAIL_TOL:
            raise TruncationError(f"grid tail mass {meas.tail_mass:.3g} exceeds {TAIL_TOL}")
    return tilted.log_J - m.log_J


def variance_nu0(pot: Potential, **kw) -> float:
    """``Var_{nu^0}(xi)`` by quadrature."""
    return OneDMeasure.build(pot, 0.0, **kw).variance


@dataclass(frozen=True, eq=False)
class OneDProfile:
    """The minimiser ``U^beta`` of the one-dimensional energy on a grid."""

    beta: float
    xi: np.ndarray
    U: np.ndarray
    dU: np.ndarray
    residual: float
    measure: OneDMeasure = field(repr=False)

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation of ``U`` (constant continuation off-grid)."""
        return np.interp(x, self.xi, self.U)

    def derivative(self, x) -> np.ndarray:
        return np.interp(x, self.xi, self.dU)

    @property
    def mean(self) -> float:
        """``E_{nu^beta} U^beta``."""
        return self.measure.expect(self.U)


def solve_U(m: OneDMeasure) -> OneDProfile:
    """Solve ``-U'' + (V' - beta) U' + V'' U = 1`` on the measure's grid.

    The operator is discretised in divergence form,
    ``-(1/p)(p U')' + V'' U = 1`` with ``p`` the tilted density, using
    central differences and zero flux at the two ends of the grid. The
    resulting matrix is symmetric positive definite and tridiagonal.

    Raises
    ------
    SolverError
        If the banded solve fails or the weighted residual exceeds ``1e-8``.
    """
    pot, xi, h = m.pot, m.xi, m.h
    shift = m.log_density.max()
    p = np.exp(m.log_density - shift)
    mid = 0.5 * (xi[1:] + xi[:-1])
    p_half = np.exp(m.beta * mid - pot.V(mid) - shift) / h**2
    diag = p * pot.d2V(xi)
    diag[:-1] += p_half
    diag[1:] += p_half
    # solveh_banded upper form: row 0 holds the superdiagonal
    ab = np.zeros((2, xi.size))
    ab[0, 1:] = -p_half
    ab[1] = diag
    try:
        U = linalg.solveh_banded(ab, p, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"one-dimensional solve failed: {exc}") from None
    Au = diag * U
    Au[:-1] -= p_half * U[1:]
    Au[1:] -= p_half * U[:-1]
    res = np.zeros_like(U)
    mask = p > 0
    res[mask] = (Au[mask] - p[mask]) / p[mask]
    wres = float(np.sqrt(np.dot(m.weights, res**2)))
    if not np.isfinite(wres) or wres > 1e-8:
        raise SolverError("one-dimensional solve did not meet the residual target", residual=wres)
    dU = np.gradient(U, h, edge_order=2)
    return OneDProfile(beta=m.beta, xi=xi, U=U, dU=dU, residual=wres, measure=m)


def mean_U_beta_sensitivity(pot: Potential, beta: float, max_tilt: float = DEFAULT_MAX_TILT,
                            **kw) -> float:
    """``E_{nu^beta} U^beta - E_{nu^0} U^0``."""
    if abs(beta) > max_tilt:
        raise ParameterError(f"|beta| = {abs(beta)} exceeds the maximal tilt {max_tilt}")
    if beta == 0.0:
        return 0.0
    u_b = solve_U(OneDMeasure.build(pot, beta, **kw))
    u_0 = solve_U(OneDMeasure.build(pot, 0.0, **kw))
    return u_b.mean - u_0.mean
