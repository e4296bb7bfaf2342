"""Harmonic Bergman projection, special profiles and continuum comparison.

The Bergman projection ``K_L`` is the orthogonal projection in
``l^2(CL1)`` onto fields that are discrete harmonic in BOX. Its complement
is ``K_L^perp = Delta G_L Delta`` where ``G_L`` is the bi-Laplacian Green's
function with zero data outside the cube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, ParameterError
from .lattice import BoxGeometry, Domain, LatticeField
from .operators import (
    GREEN_SIGN,
    BilaplacianSolver,
    GreenCache,
    alpha_z,
    cube_dirichlet_solve,
    dirichlet_solve,
    laplacian,
)


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    """``a = Ka + Kperp_a`` with ``Ka`` harmonic in BOX (all on CL1)."""

    a: np.ndarray
    Ka: np.ndarray
    Kperp_a: np.ndarray


def _as_cl1(geom: BoxGeometry, a) -> np.ndarray:
    if isinstance(a, LatticeField):
        return a.to(Domain.CL1).values
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    if n == geom.n_cl1:
        return a
    if n == geom.n_box:
        out = np.zeros(a.shape[:-1] + (geom.n_cl1,))
        out[..., :n] = a
        return out
    raise DomainError(f"expected a BOX or CL1 field, got length {n}")


def bergman_split(geom: BoxGeometry, a, cache: GreenCache | None = None) -> ProjectionPair:
    """Split ``a`` on CL1 into its harmonic part and the complement.

    ``Kperp_a = Delta(G_L * (Delta a))`` with ``Delta a`` evaluated on BOX
    after zero extension, and ``Ka = a - Kperp_a``.

    Parameters
    ----------
    geom : BoxGeometry
    a : LatticeField or ndarray
        Field on CL1 (a BOX field is zero-extended). Leading batch axes are
        allowed for arrays.
    cache : GreenCache, optional
        Supplies a reusable bi-Laplacian solver.
    """
    a = _as_cl1(geom, a)
    solver = cache.bilaplacian if cache is not None else BilaplacianSolver(geom)
    v = solver.solve(laplacian(geom, a, out=Domain.BOX))
    kperp = laplacian(geom, v, out=Domain.CL1)
    return ProjectionPair(a=a, Ka=a - kperp, Kperp_a=kperp)


# -- special profile -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpecialProfile:
    """Field ``e`` on CL1 with ``<P^z, 1_{x0} + e> = 0`` for every boundary z.

    Attributes
    ----------
    x0 : tuple
    e : ndarray
        Values on CL1.
    weights : dict
        Shell weight ``epsilon(k)`` for each used shell ``k``; they sum to 1.
    """

    x0: tuple
    e: np.ndarray
    weights: dict

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.e))


def _shell(d: int, k: int):
    """Points of the outer boundary of ``Box_k`` and their interior neighbours."""
    r = np.arange(-k, k + 1)
    face = np.stack(np.meshgrid(*([r] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1) \
        if d > 1 else np.zeros((1, 0), dtype=int)
    pts, inner = [], []
    for ax in range(d):
        for s in (-1, 1):
            p = np.insert(face, ax, s * (k + 1), axis=1)
            q = np.insert(face, ax, s * k, axis=1)
            pts.append(p)
            inner.append(q)
    return np.concatenate(pts).astype(np.int64), np.concatenate(inner).astype(np.int64)


def _cl1_index(geom: BoxGeometry, pts: np.ndarray) -> np.ndarray:
    flat = np.ravel_multi_index(tuple((pts + geom.L + 2).T), geom.pad_shape)
    return geom.lookup[flat]


def special_profile(geom: BoxGeometry, x0) -> SpecialProfile:
    """Build the special profile ``e_{x0}`` from nested-cube exit kernels.

    For every shell ``k`` with ``|x0|_inf <= k <= L-1`` the outer boundary
    of ``Box_k`` receives ``-epsilon(k) P_k^x(x0)``, where ``P_k`` is the
    Poisson kernel of ``Box_k``. The weights are proportional to
    ``dist(x0, boundary of Box_k)^((d-1)/2)`` and sum to 1. By the strong
    Markov property each shell reproduces ``P_L^z(x0)``, which gives the
    orthogonality relation exactly.

    If ``x0`` is adjacent to the outer boundary, ``e = -1_{x0}``.

    Raises
    ------
    DomainError
        If ``x0`` is not in BOX.
    """
    x0 = tuple(int(c) for c in np.atleast_1d(x0))
    i0 = geom.index(x0, Domain.BOX)
    d, L = geom.d, geom.L
    e = np.zeros(geom.n_cl1)
    m = max(abs(c) for c in x0)
    if m == L:
        e[i0] = -1.0
        return SpecialProfile(x0=x0, e=e, weights={})
    ks = np.arange(m, L)
    raw = (ks + 1 - m).astype(float) ** ((d - 1) / 2.0)
    eps = raw / raw.sum()
    for k, w in zip(ks, eps):
        n = 2 * k + 1
        src = np.zeros((n,) * d)
        src[tuple(c + k for c in x0)] = 1.0
        # (-Delta_k)^{-1}(x0, .) evaluated at the interior neighbour of each exit site
        green = -cube_dirichlet_solve(src, d)
        pts, inner = _shell(d, int(k))
        exit_prob = green[tuple((inner + k).T)]
        e[_cl1_index(geom, pts)] = -w * exit_prob
    return SpecialProfile(x0=x0, e=e, weights={int(k): float(w) for k, w in zip(ks, eps)})


def boundary_energy(geom: BoxGeometry, a, P: np.ndarray | None = None) -> float:
    """``B_L(a) = sum_z <P^z, a>^2`` for a BOX field ``a``."""
    vals = a.to(Domain.BOX).values if isinstance(a, LatticeField) else np.asarray(a, dtype=float)
    if vals.shape[-1] != geom.n_box:
        vals = vals[..., : geom.n_box]
    return float(np.sum(alpha_z(geom, vals, P) ** 2))


# -- continuum comparison ------------------------------------------------------


@dataclass(frozen=True)
class TestFunctionPair:
    """Closed-form pair ``(u, f = Delta^2 u)`` on ``(-1, 1)^d``.

    ``u`` and ``grad u`` are used for the boundary-condition check.
    """

    __test__ = False  # keep pytest from collecting this as a test class

    name: str
    d: int
    u: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray], np.ndarray]
    grad_u: Callable[[np.ndarray], np.ndarray]

    def check_boundary(self, n_samples: int = 257, tol: float = 1e-12) -> None:
        """Raise ``ParameterError`` unless ``u`` and ``grad u`` vanish on the
        faces of the cube."""
        rng = np.random.default_rng(0)
        for ax in range(self.d):
            for s in (-1.0, 1.0):
                x = rng.uniform(-1, 1, size=(n_samples, self.d))
                x[:, ax] = s
                if np.max(np.abs(self.u(x))) > tol or np.max(np.abs(self.grad_u(x))) > tol:
                    raise ParameterError(f"{self.name}: u or its gradient does not vanish on the boundary")


def _p(s):
    return (1 - s**2) ** 2


def _p1(s):
    return -4 * s * (1 - s**2)


def _p2(s):
    return 12 * s**2 - 4


def bump_pair(d: int) -> TestFunctionPair:
    """``u(x) = prod_i (1 - x_i^2)^2`` with ``f = Delta^2 u``.

    With ``p(s) = (1-s^2)^2`` one has ``p'' = 12 s^2 - 4`` and ``p'''' = 24``, so
    ``Delta^2 u = sum_i 24 prod_{j!=i} p_j + 2 sum_{i<j} p_i'' p_j'' prod_{k!=i,j} p_k``.
    """

    def u(x):
        return np.prod(_p(x), axis=-1)

    def f(x):
        P = _p(x)
        P2 = _p2(x)
        total = np.zeros(x.shape[:-1])
        for i in range(d):
            others = np.prod(np.delete(P, i, axis=-1), axis=-1)
            total = total + 24.0 * others
            for j in range(i + 1, d):
                rest = np.prod(np.delete(P, [i, j], axis=-1), axis=-1)
                total = total + 2.0 * P2[..., i] * P2[..., j] * rest
        return total

    def grad_u(x):
        P = _p(x)
        out = []
        for i in range(d):
            others = np.prod(np.delete(P, i, axis=-1), axis=-1)
            out.append(_p1(x[..., i]) * others)
        return np.stack(out, axis=-1)

    return TestFunctionPair("bump", d, u, f, grad_u)


def zero_pair(d: int) -> TestFunctionPair:
    """The trivial pair ``u = f = 0``."""
    z = lambda x: np.zeros(x.shape[:-1])
    return TestFunctionPair("zero", d, z, z, lambda x: np.zeros(x.shape))


TEST_FUNCTIONS = {"bump": bump_pair, "zero": zero_pair}


def scaled_source(geom: BoxGeometry, pair: TestFunctionPair) -> np.ndarray:
    """``f_L(x) = L^{-d/2-2} f(x/L)`` on BOX."""
    L, d = geom.L, geom.d
    return L ** (-d / 2.0 - 2.0) * pair.f(geom.interior_sites / L)


def green_field(geom: BoxGeometry, pair: TestFunctionPair) -> np.ndarray:
    """``a = Gamma_L * f_L`` with the nonnegative Dirichlet Green's function,
    returned on CL1 (zero on the boundary)."""
    return GREEN_SIGN * dirichlet_solve(geom, scaled_source(geom, pair))


@dataclass(frozen=True)
class ContinuumRow:
    L: int
    norm: float
    fitted_exponent: float


def continuum_error(geom: BoxGeometry, pair: TestFunctionPair, cache: GreenCache | None = None) -> float:
    """``|| Delta u_L - Delta v ||_{l^2(CL1)}`` with ``u_L = L^{2-d/2} u(x/(L+2))``
    and ``v = G_L * f_L``."""
    L, d = geom.L, geom.d
    pts = geom.sites(Domain.CL2) / (L + 2.0)
    u_L = L ** (2.0 - d / 2.0) * pair.u(pts)
    solver = cache.bilaplacian if cache is not None else BilaplacianSolver(geom)
    v = solver.solve(scaled_source(geom, pair))
    diff = laplacian(geom, u_L, out=Domain.CL1) - laplacian(geom, v, out=Domain.CL1)
    return float(np.linalg.norm(diff))


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size < 2 or np.any(ys <= 0):
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def continuum_comparison(pair: TestFunctionPair, Ls, build=None) -> list[ContinuumRow]:
    """Continuum comparison error across an L-sweep.

    Parameters
    ----------
    pair : TestFunctionPair
        Must satisfy the boundary conditions (checked).
    Ls : sequence of int
    build : callable, optional
        ``build(d, L) -> BoxGeometry``; defaults to ``lattice.build_geometry``.

    Returns
    -------
    list of ContinuumRow
        One row per L; ``fitted_exponent`` is the log-log slope over the
        whole sweep (repeated on each row).
    """
    from .lattice import build_geometry

    pair.check_boundary()
    build = build or build_geometry
    norms = [continuum_error(build(pair.d, L), pair) for L in Ls]
    slope = fit_exponent(Ls, norms)
    return [ContinuumRow(int(L), n, slope) for L, n in zip(Ls, norms)]


def layer_constant(geom: BoxGeometry, pair: TestFunctionPair, ell: int,
                   cache: GreenCache | None = None) -> float:
    """Fitted constant of the boundary-layer bound at width ``ell``.

    Returns ``(||K_L a||^2_Lambda + ||a||^2_Lambda) * L / ((ell+1) (1 + 1_{d=2} log L))``
    for ``a = Gamma_L * f_L`` and ``Lambda = CL1 minus Box_{L-ell}``.
    """
    L = geom.L
    if not 1 <= ell <= L:
        raise ParameterError(f"layer width must lie in [1, L], got {ell}")
    a = green_field(geom, pair)
    split = bergman_split(geom, a, cache)
    layer = np.abs(geom.sites(Domain.CL1)).max(axis=1) > L - ell
    lhs = float(np.sum(split.Ka[layer] ** 2) + np.sum(a[layer] ** 2))
    log_factor = 1.0 + (math.log(L) if geom.d == 2 else 0.0)
    return lhs * L / ((ell + 1) * log_factor)
