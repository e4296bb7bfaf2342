"""Geometry of the discrete cube ``Box_L = [-L, L]^d`` and its outer layers.

Three nested site sets are used throughout the package:

* ``BOX``: the cube itself, ``(2L+1)^d`` sites.
* ``CL1``: the cube together with its outer boundary, i.e. all sites that
  differ from the cube by a single coordinate step.
* ``CL2``: everything within graph distance two of the cube.

Sites are stored so that every smaller set is a prefix of the larger one:
``CL1 = BOX + boundary`` and ``CL2 = CL1 + (second layer)``, each block in
lexicographic order. Restriction is therefore truncation and extension is
zero padding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError

DEFAULT_SITE_BUDGET = 10**6


class Domain(str, enum.Enum):
    """Tag for the site set a field lives on."""

    BOX = "BOX"
    CL1 = "CL1"
    CL2 = "CL2"


@dataclass(frozen=True, eq=False)
class BoxGeometry:
    """Site enumeration for ``Box_L`` and its two outer layers.

    Attributes
    ----------
    d, L : int
        Dimension and half-side.
    interior_sites : ndarray, shape (N, d)
        Points of ``Box_L`` in lexicographic order.
    boundary_sites : ndarray, shape (Nb, d)
        Outer boundary (exactly one coordinate equals ``L+1`` in absolute
        value, the others lie in ``[-L, L]``), lexicographic.
    boundary2_sites : ndarray, shape (N2, d)
        All sites outside the cube within graph distance two. The outer
        boundary comes first, followed by the remaining sites.
    rho : ndarray, shape (N,)
        Graph distance of each interior site to the outer boundary.
    """

    d: int
    L: int
    interior_sites: np.ndarray
    boundary_sites: np.ndarray
    boundary2_sites: np.ndarray
    rho: np.ndarray
    # flat positions of each CL2 site inside the padded grid of side 2L+5
    pad_flat: np.ndarray = field(repr=False)
    # padded flat index -> CL2 ordinal, -1 elsewhere
    lookup: np.ndarray = field(repr=False)

    @property
    def n_box(self) -> int:
        return self.interior_sites.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_sites.shape[0]

    @property
    def n_cl1(self) -> int:
        return self.n_box + self.n_boundary

    @property
    def n_cl2(self) -> int:
        return self.n_box + self.boundary2_sites.shape[0]

    @property
    def side(self) -> int:
        """Number of sites along one axis of the cube."""
        return 2 * self.L + 1

    @property
    def pad_shape(self) -> tuple:
        return (2 * self.L + 5,) * self.d

    def size(self, domain) -> int:
        """Number of sites in ``domain``."""
        domain = Domain(domain)
        return {Domain.BOX: self.n_box, Domain.CL1: self.n_cl1, Domain.CL2: self.n_cl2}[domain]

    def sites(self, domain) -> np.ndarray:
        """Coordinates of the sites of ``domain`` in storage order."""
        n = self.size(domain)
        return np.concatenate([self.interior_sites, self.boundary2_sites])[:n]

    def index(self, point, domain=Domain.CL2) -> int:
        """Ordinal of ``point`` in ``domain``.

        Raises
        ------
        DomainError
            If the point is not a member of ``domain``.
        """
        p = np.asarray(point, dtype=int)
        if p.shape != (self.d,):
            raise DomainError(f"point must have {self.d} coordinates")
        shifted = p + self.L + 2
        if np.any(shifted < 0) or np.any(shifted >= 2 * self.L + 5):
            raise DomainError(f"{tuple(p)} is outside the second layer")
        k = int(self.lookup[np.ravel_multi_index(tuple(shifted), self.pad_shape)])
        if k < 0 or k >= self.size(domain):
            raise DomainError(f"{tuple(p)} is not in {Domain(domain).value}")
        return k

    def domain_of(self, n: int) -> Domain:
        """Infer the domain tag from a vector length."""
        for dom in Domain:
            if self.size(dom) == n:
                return dom
        raise DomainError(f"length {n} matches no domain of this geometry")

    def interior_neighbor(self) -> np.ndarray:
        """Box ordinal of the unique interior neighbour of each boundary site."""
        z = self.boundary_sites
        inner = z - np.sign(z) * (np.abs(z) == self.L + 1)
        flat = np.ravel_multi_index(tuple((inner + self.L + 2).T), self.pad_shape)
        return self.lookup[flat]

    def boundary_degree(self) -> np.ndarray:
        """Number of outer-boundary neighbours of each interior site."""
        return np.sum(np.abs(self.interior_sites) == self.L, axis=1)

    # -- padded-grid helpers (used by the stencil operators) -----------------

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        """Scatter a field (any domain, leading batch axes allowed) into the
        padded grid of side ``2L+5``, zero elsewhere."""
        values = np.asarray(values, dtype=float)
        n = values.shape[-1]
        self.domain_of(n)
        batch = values.shape[:-1]
        grid = np.zeros(batch + (int(np.prod(self.pad_shape)),))
        grid[..., self.pad_flat[:n]] = values
        return grid.reshape(batch + self.pad_shape)

    def from_grid(self, grid: np.ndarray, domain=Domain.BOX) -> np.ndarray:
        """Gather the sites of ``domain`` from a padded grid."""
        n = self.size(domain)
        batch = grid.shape[: grid.ndim - self.d]
        flat = grid.reshape(batch + (-1,))
        return flat[..., self.pad_flat[:n]]

    def box_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape a BOX field (with batch axes) to ``(..., 2L+1, ..., 2L+1)``."""
        values = np.asarray(values)
        return values.reshape(values.shape[:-1] + (self.side,) * self.d)


def build_geometry(d: int, L: int, site_budget: int = DEFAULT_SITE_BUDGET) -> BoxGeometry:
    """Enumerate ``Box_L`` in dimension ``d`` together with its outer layers.

    Parameters
    ----------
    d : int
        Dimension, at least 1.
    L : int
        Half-side, at least 1.
    site_budget : int, optional
        Maximal admissible ``(2L+1)^d``.

    Returns
    -------
    BoxGeometry

    Raises
    ------
    CapacityError
        If the cube has more sites than ``site_budget``.

    Examples
    --------
    >>> g = build_geometry(2, 1)
    >>> g.n_box, g.n_boundary
    (9, 12)
    """
    d, L = int(d), int(L)
    if d < 1 or L < 1:
        raise DomainError("need d >= 1 and L >= 1")
    if (2 * L + 1) ** d > site_budget:
        raise CapacityError(
            f"Box_{L} in d={d} has {(2 * L + 1) ** d} sites, budget is {site_budget}"
        )
    pad_shape = (2 * L + 5,) * d
    pts = np.indices(pad_shape, dtype=np.int64).reshape(d, -1).T - (L + 2)
    # excess of each coordinate beyond the cube; its sum is the graph distance
    excess = np.clip(np.abs(pts) - L, 0, None).sum(axis=1)
    inside = excess == 0
    boundary = excess == 1
    second = excess == 2
    order = np.concatenate([np.flatnonzero(inside), np.flatnonzero(boundary), np.flatnonzero(second)])
    pad_flat = np.ravel_multi_index(tuple((pts[order] + L + 2).T), pad_shape)
    lookup = np.full(int(np.prod(pad_shape)), -1, dtype=np.int64)
    lookup[pad_flat] = np.arange(order.size)
    interior = pts[inside]
    rho = (L + 1 - np.abs(interior).max(axis=1)).astype(np.int64)
    return BoxGeometry(
        d=d,
        L=L,
        interior_sites=interior,
        boundary_sites=pts[boundary],
        boundary2_sites=pts[np.concatenate([np.flatnonzero(boundary), np.flatnonzero(second)])],
        rho=rho,
        pad_flat=pad_flat,
        lookup=lookup,
    )


@dataclass(frozen=True, eq=False)
class LatticeField:
    """Real values on one of the site sets of a geometry.

    Parameters
    ----------
    geom : BoxGeometry
    domain : Domain
    values : ndarray
        Aligned with ``geom.sites(domain)``.
    """

    geom: BoxGeometry
    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.geom.size(self.domain),):
            raise DomainError(
                f"{self.domain.value} field needs {self.geom.size(self.domain)} values, got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, geom: BoxGeometry, domain=Domain.BOX) -> "LatticeField":
        return cls(geom, Domain(domain), np.zeros(geom.size(domain)))

    @classmethod
    def indicator(cls, geom: BoxGeometry, point, domain=Domain.BOX) -> "LatticeField":
        v = np.zeros(geom.size(domain))
        v[geom.index(point, domain)] = 1.0
        return cls(geom, Domain(domain), v)

    def to(self, domain) -> "LatticeField":
        """Restrict to a smaller domain or extend by zero to a larger one."""
        domain = Domain(domain)
        n = self.geom.size(domain)
        if n <= self.values.size:
            return LatticeField(self.geom, domain, self.values[:n].copy())
        out = np.zeros(n)
        out[: self.values.size] = self.values
        return LatticeField(self.geom, domain, out)

    def __getitem__(self, point) -> float:
        try:
            return float(self.values[self.geom.index(point, self.domain)])
        except DomainError:
            return 0.0


def l2_inner(u: LatticeField, v: LatticeField, domain=Domain.BOX) -> float:
    """Inner product ``sum_x u(x) v(x)`` over the sites of ``domain``.

    Both fields are restricted to, or zero-extended to, ``domain`` first.

    Raises
    ------
    DomainError
        If the fields come from different geometries.
    """
    if u.geom is not v.geom and (u.geom.d, u.geom.L) != (v.geom.d, v.geom.L):
        raise DomainError("fields live on different geometries")
    return float(np.dot(u.to(domain).values, v.to(domain).values))
