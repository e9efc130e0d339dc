"""Constitutive functions: degenerate mobilities and their monotone split,
double-well potential with convex splitting, proliferation, nutrient chemical
potential, and the discrete energy functional.

Positive/negative part conventions: x_plus = max(x, 0) and x_minus = max(-x, 0),
both nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh
from .spaces import (
    P0Field,
    QUAD4_BARY,
    QUAD4_W,
    p1_stiffness_matrix,
    pi0_pi1h,
    pi1h,
)


@dataclass(frozen=True)
class MobilitySpec:
    """Normalized degenerate mobility h_{p,q}(v) = K_pq * v_+^p * (1-v)_+^q.

    The normalization constant makes the maximum over [0, 1] equal to 1,
    attained at w_star = p / (p + q).
    """

    p: int = 1
    q: int = 1

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError("mobility exponents must be >= 1")

    @property
    def w_star(self) -> float:
        return self.p / (self.p + self.q)

    @property
    def K_pq(self) -> float:
        w = self.w_star
        return 1.0 / (w**self.p * (1.0 - w) ** self.q)


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical constants of the model and scheme."""

    eps: float = 0.1
    delta: float = 0.01
    C_u: float = 2.8
    C_n: float = 2.8e-4
    K_perm: float = 1.0
    chi0: float = 0.1
    prolif_rate: float = 0.5
    mobility: MobilitySpec = field(default_factory=MobilitySpec)
    prolif_exps: tuple[int, int] = (1, 1)
    sigma_u: float = 0.0
    sigma_n: float = 0.0
    eta: float = 1e-8
    dt: float = 0.1

    def __post_init__(self):
        if self.delta <= 0 or self.C_u <= 0 or self.C_n <= 0 or self.K_perm <= 0:
            raise ValueError("delta, C_u, C_n, K_perm must be positive")
        if self.eps < 0 or self.chi0 < 0 or self.prolif_rate < 0:
            raise ValueError("eps, chi0, prolif_rate must be nonnegative")
        if self.sigma_u < 0 or self.sigma_n < 0 or self.eta < 0:
            raise ValueError("sigma_u, sigma_n, eta must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        r, s = self.prolif_exps
        if r < 1 or s < 1:
            raise ValueError("proliferation exponents must be >= 1")

    @property
    def prolif_mobility(self) -> MobilitySpec:
        r, s = self.prolif_exps
        return MobilitySpec(r, s)


def mobility_eval(spec: MobilitySpec, v):
    """h_{p,q}(v): zero outside [0, 1], at most 1, equal to 1 at w_star."""
    v = np.asarray(v, dtype=float)
    inside = (v > 0.0) & (v < 1.0)
    vv = np.where(inside, v, 0.5)  # dummy where degenerate, masked below
    out = np.where(inside, spec.K_pq * vv**spec.p * (1.0 - vv) ** spec.q, 0.0)
    return out if out.ndim else float(out)


def mobility_deriv(spec: MobilitySpec, v):
    """One-sided derivative of h_{p,q}: the interior formula on (0, 1), else 0."""
    v = np.asarray(v, dtype=float)
    inside = (v > 0.0) & (v < 1.0)
    vv = np.where(inside, v, 0.5)
    d = spec.K_pq * (
        spec.p * vv ** (spec.p - 1) * (1.0 - vv) ** spec.q
        - spec.q * vv**spec.p * (1.0 - vv) ** (spec.q - 1)
    )
    out = np.where(inside, d, 0.0)
    return out if out.ndim else float(out)


def mobility_split(spec: MobilitySpec, v):
    """Split M into its nondecreasing and nonincreasing parts about w_star.

    M_up(v) = M(v) for v <= w_star and M(w_star) = 1 above; M_down(v) = 0
    below w_star and M(v) - 1 above. Their sum is M(v) everywhere.
    """
    v = np.asarray(v, dtype=float)
    m = np.asarray(mobility_eval(spec, v))
    above = v > spec.w_star
    up = np.where(above, 1.0, m)
    down = np.where(above, m - 1.0, 0.0)
    if up.ndim:
        return up, down
    return float(up), float(down)


def mobility_split_deriv(spec: MobilitySpec, v):
    """One-sided derivatives of the split branches (kinks take the lower branch)."""
    v = np.asarray(v, dtype=float)
    d = np.asarray(mobility_deriv(spec, v))
    above = v > spec.w_star
    dup = np.where(above, 0.0, d)
    ddown = np.where(above, d, 0.0)
    if dup.ndim:
        return dup, ddown
    return float(dup), float(ddown)


def potential_F(u):
    """Ginzburg-Landau double well F(u) = u^2 (1-u)^2 / 4."""
    u = np.asarray(u, dtype=float)
    out = 0.25 * u**2 * (1.0 - u) ** 2
    return out if out.ndim else float(out)


def potential_F_prime(u):
    u = np.asarray(u, dtype=float)
    out = u**3 - 1.5 * u**2 + 0.5 * u
    return out if out.ndim else float(out)


def convex_split_f(a, b):
    """Convex-splitting increment f(a, b) = (3a + 4b^3 - 6b^2 - b) / 4.

    The implicit part is the convex 3u^2/8; the explicit remainder is concave
    on [0, 1], which gives F(a) - F(b) <= f(a, b) (a - b) there. f(u, u)
    recovers F'(u).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = 0.25 * (3.0 * a + 4.0 * b**3 - 6.0 * b**2 - b)
    return out if out.ndim else float(out)


def proliferation_P(u, n, exps: tuple[int, int]):
    """P(u, n) = h_{r,s}(u) * n_+: zero off (0,1) in u or for n <= 0."""
    spec = MobilitySpec(*exps)
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    out = np.asarray(mobility_eval(spec, u)) * np.maximum(n, 0.0)
    return out if out.ndim else float(out)


def mu_n_discrete(mesh: Mesh, n_next: P0Field, u_prev: P0Field, params: ModelParams) -> P0Field:
    """Nutrient chemical potential (1/delta) n^{m+1} - chi0 Pi0(Pi1h u^m).

    The chemotaxis coupling is explicit: ``u_prev`` must be the previous time
    level.
    """
    return P0Field(
        n_next.values / params.delta - params.chi0 * pi0_pi1h(mesh, u_prev).values
    )


def _p1_at_quadrature(mesh: Mesh, vertex_values: np.ndarray) -> np.ndarray:
    """Evaluate a P1 function at the degree-4 quadrature points, (nt, nq)."""
    return vertex_values[mesh.triangles] @ QUAD4_BARY.T


def integrate_p1_composed(mesh: Mesh, vertex_values: np.ndarray, func) -> float:
    """Integrate func(w) over the domain for P1 w with the degree-4 rule."""
    at_q = func(_p1_at_quadrature(mesh, vertex_values))
    return float(np.sum(mesh.areas[:, None] * QUAD4_W[None, :] * at_q))


def energy_breakdown(mesh: Mesh, u: P0Field, n: P0Field, params: ModelParams):
    """Energy components evaluated at (Pi1h u, n).

    Returns (total, gradient, potential, cross, nutrient): the epsilon^2/2
    gradient term of Pi1h u, the exactly integrated double well of Pi1h u, the
    chemotaxis cross term -chi0 int (Pi1h u) n, and the n^2/(2 delta) term.
    """
    w = pi1h(mesh, u)
    S = p1_stiffness_matrix(mesh)
    e_grad = 0.5 * params.eps**2 * float(w.values @ (S @ w.values))
    e_pot = integrate_p1_composed(mesh, w.values, potential_F)
    # int (Pi1h u) n is exact with element vertex means (P1 x P0)
    wbar = w.values[mesh.triangles].mean(axis=1)
    e_cross = -params.chi0 * float(mesh.areas @ (wbar * n.values))
    e_nutr = float(mesh.areas @ n.values**2) / (2.0 * params.delta)
    return e_grad + e_pot + e_cross + e_nutr, e_grad, e_pot, e_cross, e_nutr


def energy_discrete(mesh: Mesh, u: P0Field, n: P0Field, params: ModelParams) -> float:
    """Discrete energy E(Pi1h u, n)."""
    return energy_breakdown(mesh, u, n, params)[0]
