import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membrane_lab.errors import CapacityError, DomainError
from membrane_lab.lattice import Domain, LatticeField, build_geometry, l2_inner

small_geoms = st.tuples(st.integers(1, 3), st.integers(1, 4)).filter(lambda t: (2 * t[1] + 5) ** t[0] < 20000)


class TestGeometry:
    def test_d1_L1_by_hand(self):
        g = build_geometry(1, 1)
        np.testing.assert_array_equal(g.sites(Domain.BOX).ravel(), [-1, 0, 1])
        np.testing.assert_array_equal(g.sites(Domain.CL1).ravel(), [-1, 0, 1, -2, 2])
        np.testing.assert_array_equal(g.sites(Domain.CL2).ravel(), [-1, 0, 1, -2, 2, -3, 3])
        np.testing.assert_array_equal(g.rho, [1, 2, 1])

    @given(small_geoms)
    def test_counts(self, dl):
        d, L = dl
        g = build_geometry(d, L)
        assert g.n_box == (2 * L + 1) ** d
        assert g.n_boundary == 2 * d * (2 * L + 1) ** (d - 1)
        # the second layer: sites at l1-excess exactly 2 beyond the cube
        excess = np.clip(np.abs(g.sites(Domain.CL2)) - L, 0, None).sum(axis=1)
        assert np.all(excess[: g.n_box] == 0)
        assert np.all(excess[g.n_box : g.n_cl1] == 1)
        assert np.all(excess[g.n_cl1 :] == 2)

    @given(small_geoms)
    def test_index_roundtrip(self, dl):
        g = build_geometry(*dl)
        pts = g.sites(Domain.CL2)
        idx = [g.index(tuple(p)) for p in pts]
        np.testing.assert_array_equal(idx, np.arange(g.n_cl2))

    @given(small_geoms)
    def test_rho_closed_form(self, dl):
        d, L = dl
        g = build_geometry(d, L)
        pts = g.sites(Domain.BOX)
        # distance to the outer boundary along a coordinate direction
        np.testing.assert_array_equal(g.rho, (L + 1 - np.abs(pts)).min(axis=1))
        assert g.rho.min() == 1

    def test_interior_neighbor(self):
        g = build_geometry(2, 3)
        z = g.sites(Domain.CL1)[g.n_box :]
        nb = g.sites(Domain.CL1)[g.interior_neighbor()]
        assert np.all(np.abs(z - nb).sum(axis=1) == 1)
        assert np.all(np.abs(nb).max(axis=1) == 3)

    def test_errors(self):
        with pytest.raises(DomainError):
            build_geometry(0, 2)
        with pytest.raises(CapacityError):
            build_geometry(5, 10, site_budget=10**5)
        g = build_geometry(2, 2)
        with pytest.raises(DomainError):
            g.index((5, 0))
        with pytest.raises(DomainError):
            g.index((3, 0), Domain.BOX)


class TestLatticeField:
    def test_restrict_extend(self):
        g = build_geometry(2, 2)
        f = LatticeField.indicator(g, (1, -2))
        ext = f.to(Domain.CL2)
        assert ext.values.size == g.n_cl2
        assert ext[(1, -2)] == 1.0 and ext[(3, 0)] == 0.0
        np.testing.assert_array_equal(ext.to(Domain.BOX).values, f.values)

    def test_outside_reads_zero(self):
        g = build_geometry(1, 2)
        f = LatticeField(g, Domain.BOX, np.arange(5.0))
        assert f[(10,)] == 0.0

    def test_inner_product(self):
        g = build_geometry(2, 1)
        u = LatticeField(g, Domain.BOX, np.ones(g.n_box))
        assert l2_inner(u, u) == pytest.approx(9.0)
