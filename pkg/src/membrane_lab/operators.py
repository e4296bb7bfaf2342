"""Discrete Laplacian, Dirichlet Green's functions and Poisson kernels on Box_L.

Conventions
-----------
``laplacian`` uses the unnormalised stencil ``sum_{y~x} (v(y) - v(x))``.

The Dirichlet Laplacian ``Delta_L`` on the cube is diagonalised exactly by the
type-I discrete sine transform, so ``Delta_L^{-1}`` is applied in
``O(N log N)`` with round-off accuracy. The kernel returned by
:meth:`GreenCache.green_matrix` is the matrix of ``Delta_L^{-1}``; it is
``GREEN_SIGN`` times the nonnegative Green's function ``(-Delta_L)^{-1}``.

The bi-Laplacian with zero data outside the cube is ``A = D^T D`` where ``D``
is the Laplacian from BOX fields (zero-extended) to CL1 values. Writing
``A = Delta_L^2 + diag(n_b)`` with ``n_b(x)`` the number of outer-boundary
neighbours of ``x``, ``A^{-1}`` is applied either through a Woodbury update
of the sine-transform inverse (when the boundary layer is small enough for a
dense capacitance matrix) or by conjugate gradients preconditioned with
``Delta_L^{-2}``.
"""

from __future__ import annotations

import functools
import logging
import math

import numpy as np
from scipy import fft as sfft
from scipy import integrate, linalg, sparse, special
from scipy.sparse import linalg as splinalg

from .errors import CapacityError, RangeError, SolverError
from .io import read_array_file, write_array_file
from .lattice import BoxGeometry, Domain, LatticeField

logger = logging.getLogger(__name__)

#: stored Green's kernel = GREEN_SIGN * (nonnegative Green's function of -Delta_L)
GREEN_SIGN = -1.0

#: largest boundary layer for which the dense Woodbury capacitance is formed
WOODBURY_MAX = 4000
#: largest number of entries of an explicitly materialised dense matrix
DENSE_MAX_ENTRIES = 60_000_000


def _unwrap(v, geom=None):
    if isinstance(v, LatticeField):
        return v.values, v.geom
    return np.asarray(v, dtype=float), geom


def _wrap(values, like, geom, domain):
    if isinstance(like, LatticeField):
        return LatticeField(geom, domain, values)
    return values


@functools.lru_cache(maxsize=16)
def _stencil_matrix(geom: BoxGeometry) -> sparse.csr_matrix:
    """Sparse Laplacian from CL2 values to CL1 values (rows in CL1 order)."""
    d = geom.d
    pts = geom.sites(Domain.CL1)
    n1 = pts.shape[0]
    rows = [np.arange(n1)]
    cols = [np.arange(n1)]
    vals = [np.full(n1, -2.0 * d)]
    for ax in range(d):
        for s in (-1, 1):
            nb = pts.copy()
            nb[:, ax] += s
            flat = np.ravel_multi_index(tuple((nb + geom.L + 2).T), geom.pad_shape)
            rows.append(np.arange(n1))
            cols.append(geom.lookup[flat])
            vals.append(np.ones(n1))
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n1, geom.n_cl2)
    )
    mat.sort_indices()
    return mat


@functools.lru_cache(maxsize=64)
def _stencil_block(geom: BoxGeometry, n_out: int, n_in: int) -> sparse.csr_matrix:
    return sparse.csr_matrix(_stencil_matrix(geom)[:n_out, :n_in])


def laplacian(geom: BoxGeometry, v, out=Domain.BOX):
    """Apply the lattice Laplacian to a zero-extended field.

    Parameters
    ----------
    geom : BoxGeometry
    v : LatticeField or ndarray, shape (..., n)
        Values on BOX, CL1 or CL2 (inferred from the length); leading batch
        axes are allowed for arrays.
    out : Domain
        Sites at which the Laplacian is returned (BOX or CL1).

    Returns
    -------
    LatticeField or ndarray
        ``Delta v`` on ``out``.

    Examples
    --------
    >>> from membrane_lab.lattice import build_geometry
    >>> laplacian(build_geometry(1, 1), [0.0, 1.0, 0.0])
    array([ 1., -2.,  1.])
    """
    vals, g = _unwrap(v, geom)
    out = Domain(out)
    if out == Domain.CL2:
        raise ValueError("the Laplacian is only evaluated on BOX or CL1")
    n_in = vals.shape[-1]
    geom.domain_of(n_in)
    mat = _stencil_block(geom, geom.size(out), n_in)
    if vals.ndim == 1:
        res = mat @ vals
    else:
        flat = vals.reshape(-1, n_in)
        res = (mat @ flat.T).T.reshape(vals.shape[:-1] + (mat.shape[0],))
    return _wrap(np.ascontiguousarray(res), v, geom, out)


def laplacian_adjoint(geom: BoxGeometry, w) -> np.ndarray:
    """Adjoint of ``BOX -> CL1`` Laplacian: ``w`` on CL1 to a BOX field."""
    return laplacian(geom, np.asarray(w, dtype=float), out=Domain.BOX)


# -- sparse assembly (used for dense oracles and small systems) --------------


def _tridiag(n):
    return sparse.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])


@functools.lru_cache(maxsize=16)
def laplacian_matrix(geom: BoxGeometry) -> sparse.csr_matrix:
    """Sparse matrix of the Dirichlet Laplacian ``Delta_L`` on BOX."""
    n = geom.side
    T = _tridiag(n)
    eye = sparse.identity(n)
    out = sparse.csr_matrix((n**geom.d, n**geom.d))
    for ax in range(geom.d):
        term = None
        for k in range(geom.d):
            f = T if k == ax else eye
            term = f if term is None else sparse.kron(term, f)
        out = out + term
    return sparse.csr_matrix(out)


@functools.lru_cache(maxsize=16)
def extended_laplacian_matrix(geom: BoxGeometry) -> sparse.csr_matrix:
    """Sparse matrix ``D`` of the Laplacian from BOX to CL1.

    The boundary rows pick the interior neighbour: ``(D phi)(z) = phi(z~)``.
    """
    lap = laplacian_matrix(geom)
    nb = geom.n_boundary
    brows = sparse.csr_matrix(
        (np.ones(nb), (np.arange(nb), geom.interior_neighbor())), shape=(nb, geom.n_box)
    )
    return sparse.csr_matrix(sparse.vstack([lap, brows]))


def bilaplacian_matrix(geom: BoxGeometry) -> sparse.csr_matrix:
    """Sparse ``A = D^T D``, the bi-Laplacian with zero data outside BOX."""
    D = extended_laplacian_matrix(geom)
    return sparse.csr_matrix(D.T @ D)


# -- spectral Dirichlet solver ---------------------------------------------------


@functools.lru_cache(maxsize=64)
def _dst_eigenvalues(n: int, d: int) -> np.ndarray:
    k = np.arange(1, n + 1)
    lam1 = -4.0 * np.sin(np.pi * k / (2.0 * (n + 1))) ** 2
    lam = np.zeros((n,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        lam = lam + lam1.reshape(shape)
    return lam


def cube_dirichlet_solve(eta: np.ndarray, d: int, power: int = 1) -> np.ndarray:
    """Apply ``Delta^{-power}`` with zero Dirichlet data on a cube grid.

    Parameters
    ----------
    eta : ndarray, shape (..., n, ..., n)
        Values on a cube of side ``n``; the last ``d`` axes are spatial.
    d : int
    power : int
        Power of the inverse (1 or 2).
    """
    n = eta.shape[-1]
    axes = tuple(range(eta.ndim - d, eta.ndim))
    lam = _dst_eigenvalues(n, d)
    coef = sfft.dstn(eta, type=1, axes=axes, norm="ortho")
    coef /= lam**power
    return sfft.idstn(coef, type=1, axes=axes, norm="ortho")


def _solve_box(geom: BoxGeometry, eta: np.ndarray, power: int = 1) -> np.ndarray:
    grid = geom.box_view(eta)
    return cube_dirichlet_solve(grid, geom.d, power).reshape(eta.shape)


def dirichlet_solve(geom: BoxGeometry, eta, check: bool = True, tol: float = 1e-10):
    """Solve ``Delta phi = eta`` in BOX with ``phi = 0`` on the outer boundary.

    Parameters
    ----------
    geom : BoxGeometry
    eta : LatticeField or ndarray, shape (..., N)
        Right-hand side on BOX.
    check : bool
        Verify ``||Delta phi - eta||_inf <= tol ||eta||_inf``.

    Returns
    -------
    LatticeField or ndarray
        ``phi`` on CL1 (zero on the boundary).

    Raises
    ------
    SolverError
        If the residual check fails.
    """
    vals, _ = _unwrap(eta, geom)
    phi = _solve_box(geom, vals, 1)
    if check:
        res = np.max(np.abs(laplacian(geom, phi) - vals), initial=0.0)
        scale = np.max(np.abs(vals), initial=0.0)
        if res > tol * scale:
            raise SolverError(f"Dirichlet residual {res:.3g} exceeds {tol:g} * {scale:.3g}", residual=res)
    full = np.zeros(vals.shape[:-1] + (geom.n_cl1,))
    full[..., : geom.n_box] = phi
    return _wrap(full, eta, geom, Domain.CL1)


# -- Poisson kernel and boundary maps -----------------------------------------


def alpha_z(geom: BoxGeometry, eta, P: np.ndarray | None = None):
    """Boundary values ``alpha^z(eta) = -<P^z, eta>``.

    With ``P`` the dense Poisson-kernel matrix is used; otherwise the
    representation-free identity ``alpha^z(eta) = phi(z~)`` with
    ``phi = Delta_L^{-1} eta`` is applied.

    Returns
    -------
    ndarray, shape (..., Nb)
    """
    vals, _ = _unwrap(eta, geom)
    if P is not None:
        return -vals @ P.T
    phi = _solve_box(geom, vals, 1)
    return phi[..., geom.interior_neighbor()]


def alpha_adjoint(geom: BoxGeometry, w: np.ndarray) -> np.ndarray:
    """``sum_z w_z P^z`` as a BOX field, i.e. minus the adjoint of alpha."""
    w = np.asarray(w, dtype=float)
    src = np.zeros(w.shape[:-1] + (geom.n_box,))
    nbr = geom.interior_neighbor()
    if w.ndim == 1:
        src = np.bincount(nbr, weights=w, minlength=geom.n_box).astype(float)
    else:
        flat = w.reshape(-1, w.shape[-1])
        src = np.stack([np.bincount(nbr, weights=row, minlength=geom.n_box) for row in flat])
        src = src.reshape(w.shape[:-1] + (geom.n_box,))
    return -_solve_box(geom, src, 1)


def poisson_kernel(geom: BoxGeometry) -> np.ndarray:
    """Dense Poisson-kernel matrix ``P`` with ``P[z, x] = P^z(x)``.

    ``P^z(x) = (-Delta_L)^{-1}(z~, x)``: the exit kernel from ``x`` equals the
    Green's function at the interior neighbour of ``z``.

    Raises
    ------
    CapacityError
        If the matrix would exceed the dense-size guard.
    """
    nb, N = geom.n_boundary, geom.n_box
    if nb * N > DENSE_MAX_ENTRIES:
        raise CapacityError(f"Poisson kernel of size {nb}x{N} is too large to materialise")
    nbr = geom.interior_neighbor()
    uniq, inv = np.unique(nbr, return_inverse=True)
    rhs = np.zeros((uniq.size, N))
    rhs[np.arange(uniq.size), uniq] = 1.0
    cols = GREEN_SIGN * _solve_box(geom, rhs, 1)
    return cols[inv]


# -- bi-Laplacian --------------------------------------------------------------


class BilaplacianSolver:
    """Applies ``A^{-1}`` for ``A = D^T D`` (zero data outside BOX).

    Parameters
    ----------
    geom : BoxGeometry
    method : {"auto", "woodbury", "cg"}
    """

    def __init__(self, geom: BoxGeometry, method: str = "auto"):
        self.geom = geom
        deg = geom.boundary_degree().astype(float)
        self.support = np.flatnonzero(deg > 0)
        self.degree = deg[self.support]
        m = self.support.size
        if method == "auto":
            method = "woodbury" if m <= WOODBURY_MAX else "cg"
        self.method = method
        self._chol = None
        if method == "woodbury":
            self._build_capacitance()
        elif method != "cg":
            raise ValueError(f"unknown bi-Laplacian method {method!r}")

    def _build_capacitance(self):
        geom, sup = self.geom, self.support
        m = sup.size
        C = np.diag(1.0 / self.degree)
        chunk = max(1, int(DENSE_MAX_ENTRIES // (4 * geom.n_box)))
        for start in range(0, m, chunk):
            idx = sup[start : start + chunk]
            rhs = np.zeros((idx.size, geom.n_box))
            rhs[np.arange(idx.size), idx] = 1.0
            cols = _solve_box(geom, rhs, 2)
            C[start : start + idx.size] += cols[:, sup]
        C = 0.5 * (C + C.T)
        self._chol = linalg.cho_factor(C)

    def apply_A(self, v: np.ndarray) -> np.ndarray:
        """``A v`` through two stencil applications."""
        return laplacian(self.geom, laplacian(self.geom, v, out=Domain.CL1), out=Domain.BOX)

    def _woodbury(self, f: np.ndarray) -> np.ndarray:
        Tf = _solve_box(self.geom, f, 2)
        s = Tf[..., self.support]
        c = linalg.cho_solve(self._chol, s.T, check_finite=False).T
        corr = np.zeros_like(f)
        corr[..., self.support] = c
        return Tf - _solve_box(self.geom, corr, 2)

    def _cg(self, f: np.ndarray, rtol: float) -> np.ndarray:
        N = self.geom.n_box
        A = splinalg.LinearOperator((N, N), matvec=lambda x: self.apply_A(x.ravel()), dtype=float)
        M = splinalg.LinearOperator((N, N), matvec=lambda x: _solve_box(self.geom, x.ravel(), 2),
                                    dtype=float)
        flat = f.reshape(-1, N)
        out = np.empty_like(flat)
        for i, row in enumerate(flat):
            sol, info = splinalg.cg(A, row, rtol=rtol, atol=0.0, M=M, maxiter=2000)
            if info != 0:
                res = float(np.linalg.norm(self.apply_A(sol) - row))
                raise SolverError("bi-Laplacian CG did not converge", residual=res)
            out[i] = sol
        return out.reshape(f.shape)

    def solve(self, f: np.ndarray, rtol: float = 1e-12, refine: int = 2) -> np.ndarray:
        """``A^{-1} f`` on BOX (batch axes allowed)."""
        f = np.asarray(f, dtype=float)
        if self.method == "cg":
            return self._cg(f, rtol)
        v = self._woodbury(f)
        for _ in range(refine):
            v = v + self._woodbury(f - self.apply_A(v))
        return v


def bilaplacian_green(geom: BoxGeometry, f, solver: BilaplacianSolver | None = None,
                      tol: float = 1e-9):
    """``v = G_L * f``: solve ``Delta^2 v = f`` in BOX with ``v = 0`` outside.

    Returns
    -------
    LatticeField or ndarray
        ``v`` on CL2 (zero on both outer layers).

    Raises
    ------
    SolverError
        If ``||Delta^2 v - f||_inf > tol * max(||f||_inf, 1)``.
    """
    vals, _ = _unwrap(f, geom)
    solver = solver or BilaplacianSolver(geom)
    v = solver.solve(vals)
    res = np.max(np.abs(solver.apply_A(v) - vals), initial=0.0)
    if res > tol * max(np.max(np.abs(vals), initial=0.0), 1.0):
        raise SolverError(f"bi-Laplacian residual {res:.3g} too large", residual=res)
    full = np.zeros(vals.shape[:-1] + (geom.n_cl2,))
    full[..., : geom.n_box] = v
    return _wrap(full, f, geom, Domain.CL2)


# -- cache ----------------------------------------------------------------------


class GreenCache:
    """Lazily computed operators for one geometry.

    Attributes are computed on first access and then reused: the dense
    Poisson kernel ``P``, the dense Dirichlet Green matrix, and the
    bi-Laplacian solver.
    """

    def __init__(self, geom: BoxGeometry, bilaplacian_method: str = "auto"):
        self.geom = geom
        self._method = bilaplacian_method
        self._P = None
        self._green = None
        self._bilap = None

    @property
    def P(self) -> np.ndarray:
        if self._P is None:
            self._P = poisson_kernel(self.geom)
        return self._P

    @property
    def has_P(self) -> bool:
        return self._P is not None

    def green_matrix(self) -> np.ndarray:
        """Dense matrix of ``Delta_L^{-1}`` (sign ``GREEN_SIGN``)."""
        if self._green is None:
            N = self.geom.n_box
            if N * N > DENSE_MAX_ENTRIES:
                raise CapacityError(f"dense Green matrix of size {N}x{N} is too large")
            self._green = _solve_box(self.geom, np.eye(N), 1)
        return self._green

    @property
    def bilaplacian(self) -> BilaplacianSolver:
        if self._bilap is None:
            self._bilap = BilaplacianSolver(self.geom, self._method)
        return self._bilap

    def dirichlet_solve(self, eta):
        return dirichlet_solve(self.geom, eta)

    def bilaplacian_green(self, f):
        return bilaplacian_green(self.geom, f, solver=self.bilaplacian)

    def alpha(self, eta) -> np.ndarray:
        """``alpha^z`` values, through ``P`` when it is already materialised."""
        return alpha_z(self.geom, eta, self._P)

    def save(self, path) -> None:
        """Write the Poisson kernel to a versioned binary cache file."""
        write_array_file(path, self.P, {"kind": "poisson_kernel", "d": self.geom.d, "L": self.geom.L})

    def load(self, path) -> None:
        """Load a Poisson kernel previously written by :meth:`save`."""
        header, mat = read_array_file(path)
        if (header.get("kind"), header.get("d"), header.get("L")) != ("poisson_kernel", self.geom.d, self.geom.L):
            raise ValueError(f"cache file {path} does not match d={self.geom.d}, L={self.geom.L}")
        self._P = mat


# -- infinite-lattice Green's functions -------------------------------------------

MAX_GREEN_RANGE = 64


def _bessel_product(x, t):
    out = np.ones_like(t)
    for xi in x:
        out = out * special.ive(abs(int(xi)), 2.0 * t)
    return out


def _panel_integral(func, T):
    edges = [0.0, 0.5, 1.0]
    while edges[-1] < T:
        edges.append(edges[-1] * 2.0)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(func, a, b, epsabs=1e-15, epsrel=1e-13, limit=200)
        total += val
    return total, edges[-1]


@functools.lru_cache(maxsize=4096)
def _infinite_green_cached(d: int, x: tuple, power: int) -> float:
    s = sum(4 * xi * xi - 1 for xi in x)
    r2 = sum(xi * xi for xi in x)
    T = 1e6 * max(1.0, float(r2))
    c = (4.0 * math.pi) ** (-d / 2.0)
    if d == 2:
        integrand = lambda t: special.ive(0, 2.0 * t) ** 2 - _bessel_product(x, np.asarray(t))
        val, T = _panel_integral(integrand, T)
        tail = r2 / (16.0 * math.pi * T)
        return float(val + tail)
    if power == 1:
        val, T = _panel_integral(lambda t: _bessel_product(x, np.asarray(t)), T)
        k = d / 2.0
        tail = c * (T ** (1 - k) / (k - 1) - (s / 16.0) * T ** (-k) / k)
        return float(val + tail)
    val, T = _panel_integral(lambda t: t * _bessel_product(x, np.asarray(t)), T)
    k = d / 2.0
    tail = c * (T ** (2 - k) / (k - 2) - (s / 16.0) * T ** (1 - k) / (k - 1))
    return float(val + tail)


def infinite_green(d: int, x) -> float:
    """Green's function of ``-Delta`` on ``Z^d`` (d >= 3), or the potential
    kernel ``a(x) >= 0`` in d = 2.

    Uses the heat-kernel representation
    ``Gamma(x) = int_0^inf prod_i e^{-2t} I_{x_i}(2t) dt``; in d = 2 the
    integrand is replaced by the difference of its values at ``0`` and ``x``.
    The large-time tail is integrated analytically from the Bessel
    asymptotics.

    Raises
    ------
    RangeError
        If ``d < 2`` or ``||x||_inf`` exceeds the supported range.

    Examples
    --------
    >>> round(infinite_green(2, (1, 0)), 12)
    0.25
    """
    x = tuple(abs(int(v)) for v in np.atleast_1d(x))
    if d < 2 or len(x) != d:
        raise RangeError("infinite_green needs d >= 2 and a point with d coordinates")
    if max(x) > MAX_GREEN_RANGE:
        raise RangeError(f"|x|_inf = {max(x)} exceeds the tabulation range {MAX_GREEN_RANGE}")
    return _infinite_green_cached(d, tuple(sorted(x)), 1)


def infinite_bigreen(d: int, x) -> float:
    """``sum_y Gamma(x - y) Gamma(y)``, the Green's function of ``Delta^2`` on
    ``Z^d`` (finite for d >= 5)."""
    x = tuple(abs(int(v)) for v in np.atleast_1d(x))
    if d < 5 or len(x) != d:
        raise RangeError("the bi-Laplacian Green's function on Z^d needs d >= 5")
    if max(x) > MAX_GREEN_RANGE:
        raise RangeError(f"|x|_inf = {max(x)} exceeds the tabulation range {MAX_GREEN_RANGE}")
    return _infinite_green_cached(d, tuple(sorted(x)), 2)
