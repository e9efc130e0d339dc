"""Discrete function spaces and the projection/regularization operators.

Four spaces carry the unknowns: piecewise-constant DG scalars (tumor, nutrient,
nutrient potential), continuous P1 with mass lumping (tumor potential),
lowest-order Raviart-Thomas (velocity), and piecewise-constant pressure with a
zero area-weighted mean.

RT0 normalization: the coefficient of an edge is the total flux across it in
the direction of the stored normal (K->L for interior edges, outward for
boundary edges), so the constant normal trace is coefficient / edge length and
element divergences are signed coefficient sums divided by the area. Solver
velocity fields carry interior coefficients only; the slip condition v.n = 0
is enforced by leaving the boundary block at its zero default.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

# Degree-4 quadrature on the reference triangle (6 points, barycentric
# coordinates, weights normalized to sum 1). Exact for quartics, which is what
# makes the discrete energy law a machine-precision identity: the double-well
# of a P1 function is a quartic.
_D4_A = 0.445948490915965
_D4_B = 0.091576213509771
_D4_WA = 0.223381589678011
_D4_WB = 0.109951743655322
QUAD4_BARY = np.array(
    [
        [1.0 - 2.0 * _D4_A, _D4_A, _D4_A],
        [_D4_A, 1.0 - 2.0 * _D4_A, _D4_A],
        [_D4_A, _D4_A, 1.0 - 2.0 * _D4_A],
        [1.0 - 2.0 * _D4_B, _D4_B, _D4_B],
        [_D4_B, 1.0 - 2.0 * _D4_B, _D4_B],
        [_D4_B, _D4_B, 1.0 - 2.0 * _D4_B],
    ]
)
QUAD4_W = np.array([_D4_WA, _D4_WA, _D4_WA, _D4_WB, _D4_WB, _D4_WB])


def _finite(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.isfinite(a).all():
        raise ValueError(f"non-finite values in {what}")
    return a


@dataclass
class P0Field:
    """One scalar per triangle (discontinuous piecewise constant)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _finite(self.values, "P0Field")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "P0Field":
        return cls(np.zeros(mesh.n_triangles))

    @classmethod
    def constant(cls, mesh: Mesh, c: float) -> "P0Field":
        return cls(np.full(mesh.n_triangles, float(c)))


@dataclass
class P1Field:
    """One scalar per vertex (continuous piecewise linear)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _finite(self.values, "P1Field")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "P1Field":
        return cls(np.zeros(mesh.n_vertices))


@dataclass
class RT0Field:
    """Normal-flux coefficients: interior edges, plus an optional boundary block.

    Solver fields keep ``boundary_coeffs = None`` (identically zero fluxes,
    the strong slip condition). The boundary block exists so that full RT0
    interpolants (e.g. of constant fields) can be formed for verification.
    """

    coeffs: np.ndarray
    boundary_coeffs: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.coeffs = _finite(self.coeffs, "RT0Field")
        if self.boundary_coeffs is not None:
            self.boundary_coeffs = _finite(self.boundary_coeffs, "RT0Field boundary")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "RT0Field":
        return cls(np.zeros(mesh.n_interior_edges))

    def full_coeffs(self, mesh: Mesh) -> np.ndarray:
        """Coefficients over all edges in global edge-id order."""
        out = np.zeros(mesh.n_interior_edges + mesh.n_boundary_edges)
        out[: mesh.n_interior_edges] = self.coeffs
        if self.boundary_coeffs is not None:
            out[mesh.n_interior_edges:] = self.boundary_coeffs
        return out


@dataclass
class PressureField:
    """One scalar per triangle with its area-weighted mean recorded."""

    values: np.ndarray
    mean: float = 0.0

    def __post_init__(self):
        self.values = _finite(self.values, "PressureField")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "PressureField":
        return cls(np.zeros(mesh.n_triangles), 0.0)


def zero_mean_pressure(mesh: Mesh, values: np.ndarray) -> PressureField:
    """Shift element values to zero area-weighted mean, recording the shift."""
    values = _finite(values, "pressure")
    mean = float(mesh.areas @ values / mesh.domain_area)
    return PressureField(values - mean, mean)


# ---------------------------------------------------------------------------
# cached per-mesh assembled operators
# ---------------------------------------------------------------------------

_cache: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()


def _mesh_ops(mesh: Mesh) -> dict:
    ops = _cache.get(mesh)
    if ops is None:
        ops = {}
        _cache[mesh] = ops
    return ops


def p1_p0_pairing_matrix(mesh: Mesh) -> sp.csr_matrix:
    """T with T[j, K] = |K|/3 for vertices j of K: (g, phi_j) for P0 g is T g."""
    ops = _mesh_ops(mesh)
    if "T" not in ops:
        nt, nv = mesh.n_triangles, mesh.n_vertices
        rows = mesh.triangles.ravel()
        cols = np.repeat(np.arange(nt), 3)
        vals = np.repeat(mesh.areas / 3.0, 3)
        ops["T"] = sp.csr_matrix((vals, (rows, cols)), shape=(nv, nt))
    return ops["T"]


def pi1h_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Vertex averaging: (Pi1h g)_j = sum_{K in Sop(a_j)} |K| g_K / sum |K|."""
    ops = _mesh_ops(mesh)
    if "A" not in ops:
        T = p1_p0_pairing_matrix(mesh)
        inv_omega = 1.0 / mesh.vertex_support_volume
        ops["A"] = (sp.diags(inv_omega) @ T).tocsr()
    return ops["A"]


def p1_stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """P1 stiffness int grad(phi_i).grad(phi_j); SPSD with constant kernel."""
    ops = _mesh_ops(mesh)
    if "S" not in ops:
        verts, tris = mesh.vertices, mesh.triangles
        nv = mesh.n_vertices
        # grad of barycentric basis i: perp(p_{i+2} - p_{i+1}) / (2|K|)
        p = verts[tris]  # (nt, 3, 2)
        g = np.empty_like(p)
        for i in range(3):
            d = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
            g[:, i, 0] = -d[:, 1]
            g[:, i, 1] = d[:, 0]
        g /= (2.0 * mesh.areas)[:, None, None]
        local = np.einsum("tid,tjd->tij", g, g) * mesh.areas[:, None, None]
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        ops["S"] = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(nv, nv))
        ops["p1grads"] = g
    return ops["S"]


def p1_gradients(mesh: Mesh) -> np.ndarray:
    """Per-element gradients of the three barycentric basis functions (nt, 3, 2)."""
    p1_stiffness_matrix(mesh)
    return _mesh_ops(mesh)["p1grads"]


def p1_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix assembled with the degree-4 rule.

    The rule over-integrates the quadratic integrand, so this equals the exact
    mass matrix; assembling it from the same rule keeps it bit-identical to
    the linearization of quadrature-evaluated nonlinear terms.
    """
    ops = _mesh_ops(mesh)
    if "M1" not in ops:
        tris = mesh.triangles
        nv = mesh.n_vertices
        local = np.einsum("q,qi,qj->ij", QUAD4_W, QUAD4_BARY, QUAD4_BARY)
        vals = mesh.areas[:, None, None] * local[None, :, :]
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        ops["M1"] = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(nv, nv))
    return ops["M1"]


def rt0_divergence_matrix(mesh: Mesh) -> sp.csr_matrix:
    """B over all edges with B[K, e] = +-1: element net fluxes are B c_full."""
    ops = _mesh_ops(mesh)
    if "B" not in ops:
        nt = mesh.n_triangles
        ne = mesh.n_interior_edges + mesh.n_boundary_edges
        rows = np.repeat(np.arange(nt), 3)
        ops["B"] = sp.csr_matrix(
            (mesh.elem_edge_signs.ravel().astype(float), (rows, mesh.elem_edge_ids.ravel())),
            shape=(nt, ne),
        )
    return ops["B"]


def _rt0_basis_geometry(mesh: Mesh):
    """Per (element, local edge): global id, sign, opposite vertex coordinates."""
    ops = _mesh_ops(mesh)
    if "rt0geo" not in ops:
        tris = mesh.triangles
        # local edge l runs from vertex l to l+1; opposite vertex is l+2
        opp = mesh.vertices[np.stack([tris[:, 2], tris[:, 0], tris[:, 1]], axis=1)]
        ops["rt0geo"] = (mesh.elem_edge_ids, mesh.elem_edge_signs, opp)
    return ops["rt0geo"]


def rt0_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Exact RT0 mass matrix over all edges (edge-midpoint rule, degree 2)."""
    ops = _mesh_ops(mesh)
    if "Mrt" not in ops:
        ne = mesh.n_interior_edges + mesh.n_boundary_edges
        ids, signs, opp = _rt0_basis_geometry(mesh)
        p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
        mids = 0.5 * (p + np.roll(p, -1, axis=1))  # midpoint of local edge l
        inv2A = 1.0 / (2.0 * mesh.areas)
        w = mesh.areas / 3.0
        # basis for local edge l at quadrature point: sign * (x - opp_l) / (2|K|)
        phi = (mids[:, None, :, :] - opp[:, :, None, :]) * inv2A[:, None, None, None]
        phi = phi * signs[:, :, None, None]
        local = np.einsum("t,tiqd,tjqd->tij", w, phi, phi)
        rows = np.repeat(ids, 3, axis=1).ravel()
        cols = np.tile(ids, (1, 3)).ravel()
        ops["Mrt"] = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(ne, ne))
    return ops["Mrt"]


def rt0_interior_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Interior-edge block of the RT0 mass matrix (the solver's velocity mass)."""
    ops = _mesh_ops(mesh)
    if "Mrt_i" not in ops:
        nei = mesh.n_interior_edges
        ops["Mrt_i"] = rt0_mass_matrix(mesh)[:nei, :nei].tocsr()
    return ops["Mrt_i"]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def pi0(mesh: Mesh, g: P1Field) -> P0Field:
    """L2 projection onto P0: element averages, exact for P1 (vertex means)."""
    return P0Field(g.values[mesh.triangles].mean(axis=1))


def pi1h(mesh: Mesh, g: P0Field) -> P1Field:
    """Mass-lumped regularization onto continuous P1.

    Vertex values are support-volume weighted averages of the incident element
    values; preserves total mass against the lumped P1 integral and maps
    [0, 1]-bounded fields to [0, 1]-bounded fields.
    """
    return P1Field(pi1h_matrix(mesh) @ g.values)


def pi0_pi1h(mesh: Mesh, g: P0Field) -> P0Field:
    """Composition Pi0(Pi1h g): per element, the mean of its three vertex averages."""
    return pi0(mesh, pi1h(mesh, g))


def lumped_mass_product(mesh: Mesh, a: P1Field, b: P1Field) -> float:
    """Mass-lumping scalar product sum_j omega_j a_j b_j."""
    return float(np.sum(mesh.vertex_support_volume * a.values * b.values))


def p1_stiffness_apply(mesh: Mesh, a: P1Field) -> np.ndarray:
    """Stiffness action as a dual coefficient vector over P1 test functions."""
    return p1_stiffness_matrix(mesh) @ a.values


def rt0_divergence(mesh: Mesh, v: RT0Field) -> P0Field:
    """Elementwise divergence: signed edge flux sum over the area."""
    return P0Field((rt0_divergence_matrix(mesh) @ v.full_coeffs(mesh)) / mesh.areas)


def rt0_l2_product(mesh: Mesh, v: RT0Field, w: RT0Field) -> float:
    """Exact int_Omega v.w for RT0 fields."""
    return float(v.full_coeffs(mesh) @ (rt0_mass_matrix(mesh) @ w.full_coeffs(mesh)))


def rt0_cell_average(mesh: Mesh, v: RT0Field) -> np.ndarray:
    """Cell-averaged velocity vectors (nt, 2), exact for RT0."""
    ops = _mesh_ops(mesh)
    if "rt0avg" not in ops:
        ne = mesh.n_interior_edges + mesh.n_boundary_edges
        ids, signs, opp = _rt0_basis_geometry(mesh)
        # int_K basis_l = sign * (b_K - opp_l) / 2; average divides by |K|
        contrib = signs[:, :, None] * (mesh.barycenters[:, None, :] - opp) / 2.0
        contrib = contrib / mesh.areas[:, None, None]
        rows = np.repeat(np.arange(mesh.n_triangles), 3)
        cols = ids.ravel()
        gx = sp.csr_matrix((contrib[..., 0].ravel(), (rows, cols)), shape=(mesh.n_triangles, ne))
        gy = sp.csr_matrix((contrib[..., 1].ravel(), (rows, cols)), shape=(mesh.n_triangles, ne))
        ops["rt0avg"] = (gx, gy)
    gx, gy = ops["rt0avg"]
    c = v.full_coeffs(mesh)
    return np.column_stack([gx @ c, gy @ c])


def rt0_interpolate_constant(mesh: Mesh, vec: tuple[float, float]) -> RT0Field:
    """Full RT0 interpolant of a constant vector field (exact representation)."""
    d = np.array([float(vec[0]), float(vec[1])])
    interior = mesh.iedge_length * (mesh.iedge_normal @ d)
    boundary = mesh.bedge_length * (mesh.bedge_normal @ d)
    return RT0Field(interior, boundary)
