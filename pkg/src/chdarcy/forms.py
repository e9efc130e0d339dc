"""Edge forms of the scheme: classical upwind transport, mobility-split
barycenter upwind diffusion, the centered force form, the velocity
stabilization, and the consistent remainder used by the energy-law check.

All integrands are constant on each edge for RT0 velocities and P0 scalars, so
every edge integral here is (constant) * |e| and carries no quadrature error;
the structure identities asserted by the diagnostics are exact.

Scalar entry points take field objects; the ``*_dual`` variants return
coefficient vectors indexed like the test space and share the same per-edge
kernels, so the scalar and assembled views cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh
from .physics import MobilitySpec, mobility_split
from .spaces import P0Field, RT0Field


@dataclass(frozen=True)
class EdgeQuantities:
    """Per-interior-edge caches: constant normal velocity and field traces."""

    vn: np.ndarray  # v . n_e, one value per interior edge

    @staticmethod
    def of(mesh: Mesh, v: RT0Field) -> "EdgeQuantities":
        return EdgeQuantities(v.coeffs / mesh.iedge_length)


def edge_jump(mesh: Mesh, p0_values: np.ndarray) -> np.ndarray:
    """[[w]] = w_K - w_L per interior edge."""
    return p0_values[mesh.iedge_K] - p0_values[mesh.iedge_L]


def edge_avg(mesh: Mesh, p0_values: np.ndarray) -> np.ndarray:
    """<w> = (w_K + w_L)/2 per interior edge."""
    return 0.5 * (p0_values[mesh.iedge_K] + p0_values[mesh.iedge_L])


def grad_n0(mesh: Mesh, mu: P0Field, edge: int) -> float:
    """Two-point normal-gradient reconstruction (mu_L - mu_K) / D_e.

    Antisymmetric under swapping the adjacent elements together with the
    normal flip. Raises for boundary edges, which have no neighbor.
    """
    if not 0 <= edge < mesh.n_interior_edges:
        raise ValueError(f"edge {edge} is not an interior edge")
    K, L = mesh.iedge_K[edge], mesh.iedge_L[edge]
    return float((mu.values[L] - mu.values[K]) / mesh.iedge_bary_dist[edge])


# ---------------------------------------------------------------------------
# per-edge kernels (array based, shared by scalar and dual views)
# ---------------------------------------------------------------------------

def aupw_edge_terms(mesh: Mesh, coeffs: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """q_e = (c_e)_+ phi_K - (c_e)_- phi_L; the form is sum q_e [[test]]_e.

    c_e is the edge flux, so the edge-length factor of the integral is already
    inside: (v.n)_+ integrated over e equals (c_e)_+.
    """
    cp = np.maximum(coeffs, 0.0)
    cm = np.maximum(-coeffs, 0.0)
    return cp * phi[mesh.iedge_K] - cm * phi[mesh.iedge_L]


def bupw_edge_terms(
    mesh: Mesh, mu: np.ndarray, w: np.ndarray, spec: MobilitySpec
) -> np.ndarray:
    """r_e of the mobility-split upwind form; the form is sum r_e [[test]]_e.

    r_e = (|e|/D_e) ([[mu]]_+ (Mup(w_K)+Mdown(w_L))_+ -
                     [[mu]]_- (Mup(w_L)+Mdown(w_K))_+).
    The outer positive parts truncate mobility sums that can go negative for
    out-of-bound Newton iterates.
    """
    J = edge_jump(mesh, mu)
    up, down = mobility_split(spec, w)
    A = np.maximum(up[mesh.iedge_K] + down[mesh.iedge_L], 0.0)
    B = np.maximum(up[mesh.iedge_L] + down[mesh.iedge_K], 0.0)
    scale = mesh.iedge_length / mesh.iedge_bary_dist
    return scale * (np.maximum(J, 0.0) * A - np.maximum(-J, 0.0) * B)


def _p0_dual_from_edges(mesh: Mesh, edge_terms: np.ndarray) -> np.ndarray:
    out = np.zeros(mesh.n_triangles)
    np.add.at(out, mesh.iedge_K, edge_terms)
    np.add.at(out, mesh.iedge_L, -edge_terms)
    return out


def ch_edge_terms(mesh: Mesh, w: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """G_e: the centered form against the unit-flux RT0 basis of edge e.

    c_h(w, mu, vbar) = sum_e vbar_e G_e for interior-supported vbar, with
    G_e = -(mu_K w_K - mu_L w_L) - <w> [[mu]].
    """
    K, L = mesh.iedge_K, mesh.iedge_L
    return -(mu[K] * w[K] - mu[L] * w[L]) - edge_avg(mesh, w) * edge_jump(mesh, mu)


def stabilization_factor(vn: np.ndarray, eta: float) -> np.ndarray:
    """sign(v.n) for eta = 0 (sign(0) = 0), else (v.n)/(|v.n| + eta)."""
    if eta == 0.0:
        return np.sign(vn)
    return vn / (np.abs(vn) + eta)


def sh_edge_terms(
    mesh: Mesh, coeffs: np.ndarray, phi: np.ndarray, mu: np.ndarray, eta: float
) -> np.ndarray:
    """H_e: stabilization against the unit-flux RT0 basis of edge e.

    s_h(u, phi, mu, test, eta) = sum_e test_e H_e with
    H_e = -(1/2) g(u.n_e) [[phi]] [[mu]].
    """
    vn = coeffs / mesh.iedge_length
    g = stabilization_factor(vn, eta)
    return -0.5 * g * edge_jump(mesh, phi) * edge_jump(mesh, mu)


# ---------------------------------------------------------------------------
# scalar forms
# ---------------------------------------------------------------------------

def a_upw(mesh: Mesh, v: RT0Field, phi: P0Field, test: P0Field) -> float:
    """Classical edge upwind transport form."""
    q = aupw_edge_terms(mesh, v.coeffs, phi.values)
    return float(q @ edge_jump(mesh, test.values))


def a_upw_dual(mesh: Mesh, v: RT0Field, phi: P0Field) -> np.ndarray:
    """Transport form as a dual vector over the P0 test basis."""
    return _p0_dual_from_edges(mesh, aupw_edge_terms(mesh, v.coeffs, phi.values))


def b_upw(mesh: Mesh, mu: P0Field, w: P0Field, spec: MobilitySpec, test: P0Field) -> float:
    """Mobility-split barycenter upwind form; b_upw(mu, w, spec, mu) >= 0."""
    r = bupw_edge_terms(mesh, mu.values, w.values, spec)
    return float(r @ edge_jump(mesh, test.values))


def b_upw_dual(mesh: Mesh, mu: P0Field, w: P0Field, spec: MobilitySpec) -> np.ndarray:
    return _p0_dual_from_edges(mesh, bupw_edge_terms(mesh, mu.values, w.values, spec))


def c_h(mesh: Mesh, w: P0Field, mu: P0Field, vbar: RT0Field) -> float:
    """Centered force form: -int div(w vbar) mu - sum_e int_e (vbar.n)<w>[[mu]].

    The elementwise part reduces to -sum_K mu_K w_K (net flux of vbar over
    the element boundary) because w and mu are piecewise constant.
    """
    from .spaces import rt0_divergence_matrix

    net = rt0_divergence_matrix(mesh) @ vbar.full_coeffs(mesh)
    bulk = -float((mu.values * w.values) @ net)
    edge = -float(
        vbar.coeffs
        @ (edge_avg(mesh, w.values) * edge_jump(mesh, mu.values))
    )
    return bulk + edge


def c_h_dual(mesh: Mesh, w: P0Field, mu: P0Field) -> np.ndarray:
    """Centered force form against each interior-edge RT0 basis function."""
    return ch_edge_terms(mesh, w.values, mu.values)


def s_h(
    mesh: Mesh, u_vel: RT0Field, phi: P0Field, mu: P0Field, test: RT0Field, eta: float
) -> float:
    """Consistent velocity stabilization (sign form at eta = 0)."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    h = sh_edge_terms(mesh, u_vel.coeffs, phi.values, mu.values, eta)
    return float(test.coeffs @ h)


def s_h_dual(mesh: Mesh, u_vel: RT0Field, phi: P0Field, mu: P0Field, eta: float) -> np.ndarray:
    return sh_edge_terms(mesh, u_vel.coeffs, phi.values, mu.values, eta)


def tau_diag(
    mesh: Mesh, v: RT0Field, phi: P0Field, mu: P0Field, sigma: float, eta: float
) -> float:
    """Consistent energy-law remainder.

    tau = (1/2) sum_e int_e ((1-sigma)|v.n| + eta) / (|v.n| + eta) * |v.n|
          [[phi]][[mu]]; exactly zero when sigma = 1 and eta = 0. Edges with
    |v.n| + eta = 0 contribute nothing (the |v.n| factor vanishes).
    """
    vn = v.coeffs / mesh.iedge_length
    absvn = np.abs(vn)
    denom = absvn + eta
    ratio = np.divide(
        (1.0 - sigma) * absvn + eta,
        denom,
        out=np.zeros_like(denom),
        where=denom > 0.0,
    )
    terms = 0.5 * mesh.iedge_length * ratio * absvn
    return float(terms @ (edge_jump(mesh, phi.values) * edge_jump(mesh, mu.values)))
