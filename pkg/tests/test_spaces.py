import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chdarcy.mesh import Mesh, build_crossed_mesh, edge_incidence
from chdarcy import spaces
from chdarcy.spaces import (
    P0Field,
    P1Field,
    RT0Field,
    QUAD4_BARY,
    QUAD4_W,
    lumped_mass_product,
    pi0,
    pi0_pi1h,
    pi1h,
    p1_stiffness_apply,
    p1_stiffness_matrix,
    rt0_divergence,
    rt0_interpolate_constant,
    rt0_l2_product,
    zero_mean_pressure,
)

RNG = np.random.default_rng(20260810)


@pytest.fixture(scope="module")
def mesh():
    return build_crossed_mesh(3, 3, (0.0, 3.0, 0.0, 3.0))


def quad_integral_p1(mesh, vertex_values):
    """Independent quadrature oracle for the integral of a P1 function."""
    vals = vertex_values[mesh.triangles]  # (nt, 3)
    at_q = vals @ QUAD4_BARY.T  # (nt, nq)
    return float(np.sum(mesh.areas[:, None] * QUAD4_W[None, :] * at_q))


class TestQuadratureRule:
    def test_exact_for_quartic_monomials(self):
        # oracle: int over reference triangle of l0^a l1^b l2^c
        # = 2 * |T| * a! b! c! / (a+b+c+2)!
        from math import factorial

        for a in range(5):
            for b in range(5 - a):
                for c in range(5 - a - b):
                    exact = 2 * 0.5 * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2)
                    approx = 0.5 * np.sum(
                        QUAD4_W * QUAD4_BARY[:, 0] ** a * QUAD4_BARY[:, 1] ** b * QUAD4_BARY[:, 2] ** c
                    )
                    assert approx == pytest.approx(exact, rel=1e-13)


class TestPi0:
    def test_constant(self, mesh):
        g = P1Field(np.full(mesh.n_vertices, 2.5))
        assert np.allclose(pi0(mesh, g).values, 2.5, rtol=0, atol=1e-15)

    def test_single_triangle_mean(self):
        m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        g = P1Field(np.array([0.0, 1.0, 2.0]))
        assert pi0(m, g).values[0] == pytest.approx(1.0)

    def test_preserves_integral(self, mesh):
        g = P1Field(RNG.normal(size=mesh.n_vertices))
        lhs = float(mesh.areas @ pi0(mesh, g).values)
        assert lhs == pytest.approx(quad_integral_p1(mesh, g.values), rel=1e-13)


class TestPi1h:
    def test_constant(self, mesh):
        g = P0Field.constant(mesh, 0.7)
        assert np.allclose(pi1h(mesh, g).values, 0.7, rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(data=st.data())
    def test_preserves_bounds(self, mesh, data):
        vals = data.draw(
            arrays(float, 36, elements=st.floats(0.0, 1.0, allow_nan=False))
        )
        w = pi1h(mesh, P0Field(vals))
        assert w.values.min() >= -1e-15
        assert w.values.max() <= 1.0 + 1e-15

    def test_mass_preservation(self, mesh):
        g = P0Field(RNG.normal(size=mesh.n_triangles))
        total_p0 = float(mesh.areas @ g.values)
        w = pi1h(mesh, g)
        total_p1 = float(mesh.vertex_support_volume @ w.values)
        assert total_p1 == pytest.approx(total_p0, rel=1e-13)

    def test_pi0_pi1h_composes(self, mesh):
        g = P0Field(RNG.uniform(size=mesh.n_triangles))
        direct = pi0_pi1h(mesh, g).values
        composed = pi0(mesh, pi1h(mesh, g)).values
        assert np.array_equal(direct, composed)

    def test_pi0_pi1h_bounds(self, mesh):
        g = P0Field(RNG.uniform(size=mesh.n_triangles))
        out = pi0_pi1h(mesh, g).values
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestAdjointness:
    def test_dt_identity(self, mesh):
        # (du, Pi0 mu) = lumped(Pi1h du, mu) for all P0 du, P1 mu
        for _ in range(10):
            du = P0Field(RNG.normal(size=mesh.n_triangles))
            mu = P1Field(RNG.normal(size=mesh.n_vertices))
            lhs = float(mesh.areas @ (du.values * pi0(mesh, mu).values))
            rhs = lumped_mass_product(mesh, pi1h(mesh, du), mu)
            assert rhs == pytest.approx(lhs, rel=1e-12, abs=1e-12)


class TestLumpedProduct:
    def test_ones_give_area(self, mesh):
        one = P1Field(np.ones(mesh.n_vertices))
        assert lumped_mass_product(mesh, one, one) == pytest.approx(9.0, rel=1e-13)

    def test_lumped_integral(self, mesh):
        b = P1Field(RNG.normal(size=mesh.n_vertices))
        one = P1Field(np.ones(mesh.n_vertices))
        expected = float(mesh.vertex_support_volume @ b.values)
        assert lumped_mass_product(mesh, one, b) == pytest.approx(expected, rel=1e-14)

    def test_positive_definite(self, mesh):
        a = P1Field(RNG.normal(size=mesh.n_vertices))
        assert lumped_mass_product(mesh, a, a) > 0


class TestStiffness:
    def test_constant_in_kernel(self, mesh):
        a = P1Field(np.full(mesh.n_vertices, 3.0))
        assert np.abs(p1_stiffness_apply(mesh, a)).max() <= 1e-12

    def test_symmetry(self, mesh):
        a = P1Field(RNG.normal(size=mesh.n_vertices))
        b = P1Field(RNG.normal(size=mesh.n_vertices))
        sa = p1_stiffness_apply(mesh, a)
        sb = p1_stiffness_apply(mesh, b)
        assert float(sa @ b.values) == pytest.approx(float(sb @ a.values), rel=1e-12)

    def test_reference_element_matrix(self):
        m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        S = p1_stiffness_matrix(m).toarray()
        expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        assert np.allclose(S, expected, rtol=0, atol=1e-14)


class TestRT0:
    def test_zero_divergence_of_zero(self, mesh):
        assert np.array_equal(rt0_divergence(mesh, RT0Field.zeros(mesh)).values, 0.0 * mesh.areas)

    def test_single_flux_signs(self, mesh):
        e = 0
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        c = np.zeros(mesh.n_interior_edges)
        c[e] = 2.0
        div = rt0_divergence(mesh, RT0Field(c)).values
        assert div[K] == pytest.approx(2.0 / mesh.areas[K])
        assert div[L] == pytest.approx(-2.0 / mesh.areas[L])

    def test_total_divergence_zero(self, mesh):
        v = RT0Field(RNG.normal(size=mesh.n_interior_edges))
        total = float(mesh.areas @ rt0_divergence(mesh, v).values)
        assert total == pytest.approx(0.0, abs=1e-12)

    def test_divergence_compatibility(self, mesh):
        # per element: signed sum of edge fluxes equals |K| * divergence
        v = RT0Field(RNG.normal(size=mesh.n_interior_edges))
        full = v.full_coeffs(mesh)
        div = rt0_divergence(mesh, v).values
        for t, edges in enumerate(edge_incidence(mesh)):
            net = sum(s * full[e] for e, s in edges)
            assert net == pytest.approx(mesh.areas[t] * div[t], rel=1e-12, abs=1e-13)

    def test_l2_product_psd_and_symmetric(self, mesh):
        v = RT0Field(RNG.normal(size=mesh.n_interior_edges))
        w = RT0Field(RNG.normal(size=mesh.n_interior_edges))
        assert rt0_l2_product(mesh, v, v) > 0
        assert rt0_l2_product(mesh, RT0Field.zeros(mesh), RT0Field.zeros(mesh)) == 0.0
        assert rt0_l2_product(mesh, v, w) == pytest.approx(rt0_l2_product(mesh, w, v), rel=1e-12)

    def test_constant_field_product_is_area(self):
        for n in (1, 2, 3):
            m = build_crossed_mesh(n, n, (0.0, float(n), 0.0, float(n)))
            v = rt0_interpolate_constant(m, (1.0, 0.0))
            assert rt0_l2_product(m, v, v) == pytest.approx(m.domain_area, rel=1e-12)
            w = rt0_interpolate_constant(m, (0.3, -0.7))
            assert rt0_l2_product(m, w, w) == pytest.approx(m.domain_area * (0.3**2 + 0.7**2), rel=1e-12)

    def test_constant_field_cell_average(self, mesh):
        v = rt0_interpolate_constant(mesh, (0.5, -1.5))
        avg = spaces.rt0_cell_average(mesh, v)
        assert np.allclose(avg, [0.5, -1.5], rtol=0, atol=1e-12)

    def test_constant_field_divergence_free(self, mesh):
        v = rt0_interpolate_constant(mesh, (1.0, 2.0))
        assert np.abs(rt0_divergence(mesh, v).values).max() <= 1e-12


class TestPressure:
    def test_zero_mean(self, mesh):
        p = zero_mean_pressure(mesh, RNG.normal(size=mesh.n_triangles) + 5.0)
        mean = float(mesh.areas @ p.values) / mesh.domain_area
        assert abs(mean) <= 1e-12 * max(1.0, np.abs(p.values).max())
        assert p.mean == pytest.approx(5.0, abs=0.5)


class TestValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            P0Field(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="non-finite"):
            P1Field(np.array([np.inf]))
