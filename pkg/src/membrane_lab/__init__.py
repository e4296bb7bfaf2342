"""Numerical laboratory for the lattice membrane model.

The package is organised bottom-up:

lattice
    Box geometry, boundary layers and lattice fields.
potential
    Single-site potentials and one-dimensional quadrature for ``nu^beta``.
operators
    Laplacians, Dirichlet solves, Poisson kernels and Green's functions.
bergman
    Harmonic projection, special profiles and continuum comparisons.
gibbs
    Hamiltonians, the Gaussian oracle and energy functionals.
sampler
    Preconditioned MALA for the (tilted) Laplacian-field law.
limits
    Thermodynamic integration and the large-volume checks.
cli
    The ``membrane-lab`` command.
"""

from .errors import MembraneLabError
from .lattice import BoxGeometry, Domain, LatticeField, build_geometry
from .potential import Potential, builtin_potentials, logcosh, quadratic

__all__ = ["BoxGeometry", "Domain", "LatticeField", "MembraneLabError", "Potential",
           "build_geometry", "builtin_potentials", "logcosh", "quadratic"]
