"""Coupled nonlinear time step: Darcy mixed block, tumor transport-diffusion,
chemical potential with convex splitting, nutrient transport-diffusion and the
proliferation exchange, solved monolithically by semismooth Newton with a
sparse direct factorization.

Unknown ordering: [velocity fluxes | pressure | tumor | tumor potential |
nutrient | pressure multiplier]. The pressure nullspace is handled by a sparse
bordered row/column gauging one pressure value; the zero area-weighted mean is
restored in post-processing (the multiplier vanishes at the solution because
the total divergence of an interior-flux RT0 field telescopes to zero).

The linear solves row-permute the Jacobian to a zero-free diagonal (a perfect
element/edge matching covers the structurally zero-diagonal pressure block) so
SuperLU's threshold pivoting can follow the fill-reducing ordering; without
this, pivoting on the saddle-point block inflates fill by more than an order
of magnitude.

Semismooth conventions: the derivative of the positive part and of sign is 0
at the kink, and the mobility-split branch derivatives are one-sided.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh
from .physics import (
    ModelParams,
    energy_discrete,
    mobility_eval,
    mobility_deriv,
    mobility_split,
    mobility_split_deriv,
)
from .forms import (
    aupw_edge_terms,
    bupw_edge_terms,
    ch_edge_terms,
    stabilization_factor,
)
from .spaces import (
    P0Field,
    P1Field,
    PressureField,
    RT0Field,
    QUAD4_BARY,
    QUAD4_W,
    p1_mass_matrix,
    p1_p0_pairing_matrix,
    p1_stiffness_matrix,
    pi1h_matrix,
    rt0_divergence_matrix,
    rt0_interior_mass_matrix,
    zero_mean_pressure,
)


class NewtonDiverged(RuntimeError):
    """Newton hit the iteration cap without meeting the residual tolerance."""


class SingularLinearSystem(RuntimeError):
    """The sparse direct solve failed or produced non-finite corrections."""


class BoundsViolation(RuntimeError):
    """A solved state left [0, 1] by more than the tolerance band."""


class StepFailed(RuntimeError):
    """A time step failed; carries the 1-based step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step


@dataclass
class State:
    """One time level of the coupled system (nutrient potential is derived)."""

    v: RT0Field
    p: PressureField
    u: P0Field
    mu_u: P1Field
    n: P0Field
    mu_n: P0Field
    t: float


@dataclass(frozen=True)
class NewtonConfig:
    residual_tol: float = 1e-9  # absolute, on the max-scaled residual
    max_iters: int = 30
    shrink: float = 0.5
    relax_floor: float = 2.0**-10

    def __post_init__(self):
        if self.residual_tol <= 0 or self.max_iters < 1:
            raise ValueError("residual_tol must be > 0 and max_iters >= 1")


@dataclass
class StepReport:
    """Per-step diagnostics: solver stats plus every structure-theorem term."""

    step: int
    time: float
    dt: float
    newton_iters: int
    final_residual: float
    residual_history: tuple
    mass_total: float
    mass_total_pi1h: float
    u_min: float
    u_max: float
    n_min: float
    n_max: float
    energy: float
    D_u: float
    D_n: float
    D_prolif: float
    D_darcy: float
    D_dt_u: float
    D_dt_n: float
    tau_u: float
    tau_n: float
    energy_law_residual: float
    cs_slack: float
    div_v_inf: float
    local_incomp_inf: float
    pressure_mean: float
    stabilized: bool = False


@dataclass(frozen=True)
class _Layout:
    """DOF offsets. When the velocity stabilization is active, the per-edge
    stabilization ratios g = v.n / (|v.n| + eta) are carried as auxiliary
    unknowns constrained to |g| <= 1 with the stick-slip equation
    eta g - v.n (1 - |g|) = 0. Where the eliminated form has slope 1/eta this
    linearization pins v.n ("stuck" edges, |v.n| = O(eta), interior g) while
    on "sliding" edges (|v.n| >> eta, g near +-1) it pins g, so the Newton
    model stays well conditioned on both branches."""

    nei: int
    nt: int
    nv: int
    has_ratio: bool = False

    @property
    def c0(self):
        return 0

    @property
    def p0(self):
        return self.nei

    @property
    def u0(self):
        return self.nei + self.nt

    @property
    def m0(self):
        return self.nei + 2 * self.nt

    @property
    def n0(self):
        return self.nei + 2 * self.nt + self.nv

    @property
    def g0(self):
        return self.nei + 3 * self.nt + self.nv

    @property
    def lam(self):
        return self.g0 + (self.nei if self.has_ratio else 0)

    @property
    def size(self):
        return self.lam + 1


def _heaviside(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(float)


@dataclass
class _StepContext:
    """Quantities frozen over one time step (explicit couplings)."""

    u_prev: np.ndarray
    n_prev: np.ndarray
    mu_n_offset: np.ndarray  # -chi0 * Pi0(Pi1h u_prev), per element
    f_explicit_vec: np.ndarray  # (explicit convex-split part, phi_j), per vertex


class _Assembler:
    """Vectorized residual/Jacobian assembly for a fixed mesh and parameters."""

    def __init__(self, mesh: Mesh, params: ModelParams):
        self.mesh = mesh
        self.params = params
        self.has_ratio = bool(params.sigma_u or params.sigma_n)
        if self.has_ratio and params.eta <= 0.0:
            raise ValueError(
                "sigma > 0 with eta = 0 is supported only for diagnostics, "
                "not inside the solver (the sign form is not differentiable)"
            )
        self.lay = _Layout(
            mesh.n_interior_edges, mesh.n_triangles, mesh.n_vertices, self.has_ratio
        )
        self.gauge_elem = 0  # pressure DOF pinned by the bordered row

        self.Mrt = rt0_interior_mass_matrix(mesh)
        self.Bi = rt0_divergence_matrix(mesh)[:, : self.lay.nei].tocsr()
        self.S = p1_stiffness_matrix(mesh)
        self.M1 = p1_mass_matrix(mesh)
        self.T = p1_p0_pairing_matrix(mesh)
        self.A = pi1h_matrix(mesh)
        self.omega = mesh.vertex_support_volume
        self.areas = mesh.areas

        # residual row scales: integral equations are volume-weighted; ratio
        # rows carry a state-dependent scale applied in scaled_residual
        parts = [mesh.iedge_length, self.areas, self.areas, self.omega, self.areas]
        if self.has_ratio:
            parts.append(np.ones(mesh.n_interior_edges))
        parts.append(np.array([1.0]))
        self.scale = np.concatenate(parts)

        self._build_constant_triplets()
        self._build_row_permutation()

    def _build_row_permutation(self):
        """Row order giving a structurally zero-free diagonal.

        Pressure rows have no diagonal entry (saddle point), which forces
        SuperLU off the fill-reducing ordering. A perfect matching pairing
        each element with one of its interior edges lets the pressure row of
        K sit on the column of its matched flux and vice versa; the gauge row
        and multiplier column swap with the gauge element's pair.
        """
        from scipy.sparse.csgraph import maximum_bipartite_matching

        lay = self.lay
        perm = np.arange(lay.size, dtype=np.int64)
        pat = self.Bi.copy()
        pat.data = np.ones_like(pat.data)
        match = maximum_bipartite_matching(pat.tocsr(), perm_type="column")
        if (match < 0).any():
            self.row_perm = perm  # tiny/degenerate meshes: let SuperLU pivot
            return
        for K in range(lay.nt):
            e = int(match[K])
            if K == self.gauge_elem:
                continue
            perm[e] = lay.p0 + K
            perm[lay.p0 + K] = e
        perm[lay.p0 + self.gauge_elem] = lay.lam
        perm[lay.lam] = lay.p0 + self.gauge_elem
        self.row_perm = perm

    # -- residual ----------------------------------------------------------

    def unpack(self, x: np.ndarray):
        lay = self.lay
        ratio = x[lay.g0 : lay.g0 + lay.nei] if lay.has_ratio else None
        return (
            x[: lay.nei],
            x[lay.p0 : lay.p0 + lay.nt],
            x[lay.u0 : lay.u0 + lay.nt],
            x[lay.m0 : lay.m0 + lay.nv],
            x[lay.n0 : lay.n0 + lay.nt],
            ratio,
            x[lay.lam],
        )

    def pack(self, state: "State") -> np.ndarray:
        parts = [
            state.v.coeffs,
            state.p.values,
            state.u.values,
            state.mu_u.values,
            state.n.values,
        ]
        if self.lay.has_ratio:
            vn = state.v.coeffs / self.mesh.iedge_length
            parts.append(stabilization_factor(vn, self.params.eta))
        parts.append(np.array([0.0]))
        return np.concatenate(parts)

    def scaled_residual(self, R: np.ndarray, x: np.ndarray, ctx=None) -> np.ndarray:
        """Row-scaled residual used for convergence control.

        Ratio rows are measured by their influence on the velocity equation:
        |coefficient| * |g - v.n/(|v.n| + eta)| / |e|, which is exactly the
        error the factor mismatch induces in the true (eliminated) velocity
        residual. Factor errors on edges whose stabilization coefficient
        vanishes are physically irrelevant and must not block convergence:
        with half the edges carrying |v.n| = O(eta) noise velocities, their
        exact factors are noise too.
        """
        out = R / self.scale
        if self.lay.has_ratio:
            lay, prm, mesh = self.lay, self.params, self.mesh
            iK, iL = mesh.iedge_K, mesh.iedge_L
            c, _, u, mu, n, ratio, _ = self.unpack(x)
            vn = c / mesh.iedge_length
            g_true = vn / (np.abs(vn) + prm.eta)
            m_u = mu[mesh.triangles].mean(axis=1)
            coeff = prm.sigma_u * (u[iK] - u[iL]) * (m_u[iK] - m_u[iL])
            if ctx is not None:
                mu_n = n / prm.delta + ctx.mu_n_offset
            else:
                mu_n = n / prm.delta
            coeff += prm.sigma_n * (n[iK] - n[iL]) * (mu_n[iK] - mu_n[iL])
            out[lay.g0 : lay.g0 + lay.nei] = (
                0.5 * np.abs(coeff) * np.abs(ratio - g_true) / mesh.iedge_length
            )
        return out

    def clip_ratios(self, x: np.ndarray) -> np.ndarray:
        """Project the auxiliary ratios back to [-1, 1] (their invariant; the
        stick-slip equation has spurious roots outside it)."""
        if self.lay.has_ratio:
            lay = self.lay
            np.clip(x[lay.g0 : lay.g0 + lay.nei], -1.0, 1.0,
                    out=x[lay.g0 : lay.g0 + lay.nei])
        return x

    def correct_ratio_branches(self, x: np.ndarray) -> np.ndarray:
        """Flip ratios that settled on the wrong sign branch.

        The projected stick-slip iteration has a stable spurious fixed point
        at the clip boundary opposite the flux sign (the unclipped equation
        has a root just beyond |g| = 1). Edges whose flux sign firmly
        disagrees with their ratio are reset to the exact factor; this only
        touches the ratio entries, so the rest of the residual moves by the
        (tiny) stabilization coupling of those edges.
        """
        lay, prm = self.lay, self.params
        if not lay.has_ratio:
            return x
        vn = x[: lay.nei] / self.mesh.iedge_length
        g = x[lay.g0 : lay.g0 + lay.nei]
        wrong = (np.sign(g) * np.sign(vn) < 0) & (np.abs(vn) > 10.0 * prm.eta)
        if wrong.any():
            g_true = vn / (np.abs(vn) + prm.eta)
            g[wrong] = g_true[wrong]
        return x

    def _scatter_edges(self, terms: np.ndarray) -> np.ndarray:
        out = np.zeros(self.lay.nt)
        np.add.at(out, self.mesh.iedge_K, terms)
        np.add.at(out, self.mesh.iedge_L, -terms)
        return out

    def residual(self, x: np.ndarray, ctx: _StepContext, dt: float) -> np.ndarray:
        mesh, prm, lay = self.mesh, self.params, self.lay
        iK, iL = mesh.iedge_K, mesh.iedge_L
        c, p, u, mu, n, ratio, lam = self.unpack(x)

        w = self.A @ u
        m_u = mu[mesh.triangles].mean(axis=1)  # Pi0 of the tumor potential
        mu_n = n / prm.delta + ctx.mu_n_offset

        q_u = aupw_edge_terms(mesh, c, u)
        q_n = aupw_edge_terms(mesh, c, n)
        r_u = bupw_edge_terms(mesh, m_u, u, prm.mobility)
        r_n = bupw_edge_terms(mesh, mu_n, n, prm.mobility)

        R_v = (self.Mrt @ c) / prm.K_perm
        R_v -= p[iK] - p[iL]
        R_v += ch_edge_terms(mesh, u, m_u) + ch_edge_terms(mesh, n, mu_n)
        if lay.has_ratio:
            jumps = prm.sigma_u * (u[iK] - u[iL]) * (m_u[iK] - m_u[iL])
            jumps += prm.sigma_n * (n[iK] - n[iL]) * (mu_n[iK] - mu_n[iL])
            R_v -= 0.5 * ratio * jumps
            vn = c / mesh.iedge_length
            R_g = prm.eta * ratio - vn * (1.0 - np.abs(ratio))

        R_p = self.Bi @ c
        R_p[self.gauge_elem] += self.areas[self.gauge_elem] * lam

        s = mu_n - m_u
        sp = np.maximum(s, 0.0)
        P = mobility_eval(prm.prolif_mobility, u) * np.maximum(n, 0.0)
        prolif = prm.delta * prm.prolif_rate * self.areas * P * sp

        R_u = self.areas * (u - ctx.u_prev) / dt
        R_u += self._scatter_edges(q_u) + prm.C_u * self._scatter_edges(r_u)
        R_u -= prolif

        R_mu = self.omega * mu - prm.eps**2 * (self.S @ w)
        R_mu -= 0.75 * (self.M1 @ w) + ctx.f_explicit_vec
        R_mu += prm.chi0 * (self.T @ n)

        R_n = self.areas * (n - ctx.n_prev) / dt
        R_n += self._scatter_edges(q_n) + prm.C_n * self._scatter_edges(r_n)
        R_n += prolif

        R_lam = p[self.gauge_elem]
        blocks = [R_v, R_p, R_u, R_mu, R_n]
        if lay.has_ratio:
            blocks.append(R_g)
        blocks.append(np.array([R_lam]))
        return np.concatenate(blocks)

    # -- jacobian ----------------------------------------------------------

    def _build_constant_triplets(self):
        mesh, prm, lay = self.mesh, self.params, self.lay
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=np.int64))
            cols.append(np.asarray(c, dtype=np.int64))
            vals.append(np.asarray(v, dtype=float))

        mrt = self.Mrt.tocoo()
        add(mrt.row, mrt.col, mrt.data / prm.K_perm)

        e = np.arange(lay.nei)
        add(e, lay.p0 + mesh.iedge_K, np.full(lay.nei, -1.0))
        add(e, lay.p0 + mesh.iedge_L, np.full(lay.nei, 1.0))

        bi = self.Bi.tocoo()
        add(lay.p0 + bi.row, bi.col, bi.data)

        g = self.gauge_elem
        add([lay.p0 + g], [lay.lam], [self.areas[g]])
        add([lay.lam], [lay.p0 + g], [1.0])

        j = np.arange(lay.nv)
        add(lay.m0 + j, lay.m0 + j, self.omega)

        cmu_u = (-prm.eps**2 * (self.S @ self.A) - 0.75 * (self.M1 @ self.A)).tocoo()
        add(lay.m0 + cmu_u.row, lay.u0 + cmu_u.col, cmu_u.data)

        if prm.chi0:
            tmat = self.T.tocoo()
            add(lay.m0 + tmat.row, lay.n0 + tmat.col, prm.chi0 * tmat.data)

        self._const_rows = np.concatenate(rows)
        self._const_cols = np.concatenate(cols)
        self._const_vals = np.concatenate(vals)

    def jacobian(
        self, x: np.ndarray, ctx: _StepContext, dt: float, permuted: bool = False
    ) -> sp.csc_matrix:
        mesh, prm, lay = self.mesh, self.params, self.lay
        c, p, u, mu, n, ratio, lam = self.unpack(x)
        iK, iL = mesh.iedge_K, mesh.iedge_L
        VK = mesh.triangles[iK]  # (nei, 3) tumor-potential stencils
        VL = mesh.triangles[iL]
        e = np.arange(lay.nei)
        k = np.arange(lay.nt)

        m_u = mu[mesh.triangles].mean(axis=1)
        mu_n = n / prm.delta + ctx.mu_n_offset

        rows, cols, vals = [self._const_rows], [self._const_cols], [self._const_vals]

        def add(r, c_, v):
            rows.append(np.asarray(r, dtype=np.int64))
            cols.append(np.asarray(c_, dtype=np.int64))
            vals.append(np.asarray(v, dtype=float))

        # time-derivative diagonals
        add(lay.u0 + k, lay.u0 + k, self.areas / dt)
        add(lay.n0 + k, lay.n0 + k, self.areas / dt)

        # classical upwind, tumor and nutrient rows
        cp, cm = np.maximum(c, 0.0), np.maximum(-c, 0.0)
        Hp, Hm = _heaviside(c), _heaviside(-c)
        for off, phi in ((lay.u0, u), (lay.n0, n)):
            dqdc = Hp * phi[iK] + Hm * phi[iL]
            add(off + iK, off + iK, cp)
            add(off + iK, off + iL, -cm)
            add(off + iL, off + iK, -cp)
            add(off + iL, off + iL, cm)
            add(off + iK, e, dqdc)
            add(off + iL, e, -dqdc)

        # mobility-split upwind, tumor rows (potential is Pi0 of the P1 field)
        se = mesh.iedge_length / mesh.iedge_bary_dist
        spec = prm.mobility
        up, down = mobility_split(spec, u)
        dup, ddown = mobility_split_deriv(spec, u)
        J = m_u[iK] - m_u[iL]
        Jp, Jm = np.maximum(J, 0.0), np.maximum(-J, 0.0)
        HJp, HJm = _heaviside(J), _heaviside(-J)
        Ain = up[iK] + down[iL]
        Bin = up[iL] + down[iK]
        Av, Bv = np.maximum(Ain, 0.0), np.maximum(Bin, 0.0)
        HA, HB = _heaviside(Ain), _heaviside(Bin)
        drdJ = prm.C_u * se * (HJp * Av + HJm * Bv)
        drduK = prm.C_u * se * (Jp * HA * dup[iK] - Jm * HB * ddown[iK])
        drduL = prm.C_u * se * (Jp * HA * ddown[iL] - Jm * HB * dup[iL])
        for lv in range(3):
            add(lay.u0 + iK, lay.m0 + VK[:, lv], drdJ / 3.0)
            add(lay.u0 + iL, lay.m0 + VK[:, lv], -drdJ / 3.0)
            add(lay.u0 + iK, lay.m0 + VL[:, lv], -drdJ / 3.0)
            add(lay.u0 + iL, lay.m0 + VL[:, lv], drdJ / 3.0)
        add(lay.u0 + iK, lay.u0 + iK, drduK)
        add(lay.u0 + iL, lay.u0 + iK, -drduK)
        add(lay.u0 + iK, lay.u0 + iL, drduL)
        add(lay.u0 + iL, lay.u0 + iL, -drduL)

        # mobility-split upwind, nutrient rows (potential jump feels n directly)
        upn, downn = mobility_split(spec, n)
        dupn, ddownn = mobility_split_deriv(spec, n)
        Jn = mu_n[iK] - mu_n[iL]
        Jnp, Jnm = np.maximum(Jn, 0.0), np.maximum(-Jn, 0.0)
        HJnp, HJnm = _heaviside(Jn), _heaviside(-Jn)
        Ainn = upn[iK] + downn[iL]
        Binn = upn[iL] + downn[iK]
        Avn, Bvn = np.maximum(Ainn, 0.0), np.maximum(Binn, 0.0)
        HAn, HBn = _heaviside(Ainn), _heaviside(Binn)
        drdJn = prm.C_n * se * (HJnp * Avn + HJnm * Bvn)
        drdnK = drdJn / prm.delta + prm.C_n * se * (
            Jnp * HAn * dupn[iK] - Jnm * HBn * ddownn[iK]
        )
        drdnL = -drdJn / prm.delta + prm.C_n * se * (
            Jnp * HAn * ddownn[iL] - Jnm * HBn * dupn[iL]
        )
        add(lay.n0 + iK, lay.n0 + iK, drdnK)
        add(lay.n0 + iL, lay.n0 + iK, -drdnK)
        add(lay.n0 + iK, lay.n0 + iL, drdnL)
        add(lay.n0 + iL, lay.n0 + iL, -drdnL)

        # proliferation exchange
        pm = prm.prolif_mobility
        h = mobility_eval(pm, u)
        dh = mobility_deriv(pm, u)
        npos = np.maximum(n, 0.0)
        Pv = h * npos
        s = mu_n - m_u
        spos = np.maximum(s, 0.0)
        Hs = _heaviside(s)
        coef = prm.delta * prm.prolif_rate * self.areas
        dgdu = coef * dh * npos * spos
        dgdn = coef * (h * _heaviside(n) * spos + Pv * Hs / prm.delta)
        dgdm = -coef * Pv * Hs / 3.0
        for off, sgn in ((lay.u0, -1.0), (lay.n0, 1.0)):
            add(off + k, lay.u0 + k, sgn * dgdu)
            add(off + k, lay.n0 + k, sgn * dgdn)
            for lv in range(3):
                add(off + k, lay.m0 + mesh.triangles[:, lv], sgn * dgdm)

        # centered force form, velocity rows
        avg_u = 0.5 * (u[iK] + u[iL])
        add(e, lay.u0 + iK, -m_u[iK] - 0.5 * J)
        add(e, lay.u0 + iL, m_u[iL] - 0.5 * J)
        for lv in range(3):
            add(e, lay.m0 + VK[:, lv], (-u[iK] - avg_u) / 3.0)
            add(e, lay.m0 + VL[:, lv], (u[iL] + avg_u) / 3.0)
        avg_n = 0.5 * (n[iK] + n[iL])
        add(e, lay.n0 + iK, -mu_n[iK] - 0.5 * Jn + (-n[iK] - avg_n) / prm.delta)
        add(e, lay.n0 + iL, mu_n[iL] - 0.5 * Jn + (n[iL] + avg_n) / prm.delta)

        # stabilization via the auxiliary ratio unknowns (when switched on)
        if lay.has_ratio:
            vn = c / mesh.iedge_length
            ju = u[iK] - u[iL]
            jn = n[iK] - n[iL]
            # velocity rows: linear in the ratio, bilinear in the jumps
            add(e, lay.g0 + e, -0.5 * (prm.sigma_u * ju * J + prm.sigma_n * jn * Jn))
            if prm.sigma_u:
                add(e, lay.u0 + iK, -0.5 * prm.sigma_u * ratio * J)
                add(e, lay.u0 + iL, 0.5 * prm.sigma_u * ratio * J)
                for lv in range(3):
                    add(e, lay.m0 + VK[:, lv], -0.5 * prm.sigma_u * ratio * ju / 3.0)
                    add(e, lay.m0 + VL[:, lv], 0.5 * prm.sigma_u * ratio * ju / 3.0)
            if prm.sigma_n:
                add(e, lay.n0 + iK, -0.5 * prm.sigma_n * ratio * (Jn + jn / prm.delta))
                add(e, lay.n0 + iL, 0.5 * prm.sigma_n * ratio * (Jn + jn / prm.delta))
            # ratio rows: eta g - v.n (1 - |g|) = 0 (stick-slip form)
            add(lay.g0 + e, lay.g0 + e, prm.eta + vn * np.sign(ratio))
            add(lay.g0 + e, e, -(1.0 - np.abs(ratio)) / mesh.iedge_length)

        all_rows = np.concatenate(rows)
        if permuted:
            inv = np.empty_like(self.row_perm)
            inv[self.row_perm] = np.arange(lay.size)
            all_rows = inv[all_rows]
        mat = sp.coo_matrix(
            (np.concatenate(vals), (all_rows, np.concatenate(cols))),
            shape=(lay.size, lay.size),
        )
        return mat.tocsc()


_assembler_cache: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()


def _assembler(mesh: Mesh, params: ModelParams) -> _Assembler:
    per_mesh = _assembler_cache.get(mesh)
    if per_mesh is None:
        per_mesh = {}
        _assembler_cache[mesh] = per_mesh
    key = replace(params, dt=1.0)  # dt enters per call, not the assembly
    if key not in per_mesh:
        per_mesh[key] = _Assembler(mesh, key)
    return per_mesh[key]


def _explicit_split_vector(mesh: Mesh, asm: _Assembler, w_prev: np.ndarray) -> np.ndarray:
    """(F_e'(Pi1h u_prev), phi_j) with the degree-4 rule, per vertex."""
    wp_q = w_prev[mesh.triangles] @ QUAD4_BARY.T  # (nt, nq)
    fe_q = 0.25 * (4.0 * wp_q**3 - 6.0 * wp_q**2 - wp_q)
    out = np.zeros(mesh.n_vertices)
    for lv in range(3):
        contrib = mesh.areas * (fe_q @ (QUAD4_W * QUAD4_BARY[:, lv]))
        np.add.at(out, mesh.triangles[:, lv], contrib)
    return out


def _step_context(mesh: Mesh, asm: _Assembler, prev: State, params: ModelParams) -> _StepContext:
    u_prev = prev.u.values
    n_prev = prev.n.values
    w_prev = asm.A @ u_prev
    wbar_prev = w_prev[mesh.triangles].mean(axis=1)  # Pi0(Pi1h u_prev)
    return _StepContext(
        u_prev=u_prev,
        n_prev=n_prev,
        mu_n_offset=-params.chi0 * wbar_prev,
        f_explicit_vec=_explicit_split_vector(mesh, asm, w_prev),
    )


def state_to_vector(mesh: Mesh, state: State, params: ModelParams | None = None) -> np.ndarray:
    """Pack a state in the solver's DOF ordering.

    With ``params`` whose stabilization is active, the vector includes the
    auxiliary per-edge stabilization ratios (initialized consistently).
    """
    if params is not None:
        return _assembler(mesh, params).pack(state)
    return np.concatenate(
        [
            state.v.coeffs,
            state.p.values,
            state.u.values,
            state.mu_u.values,
            state.n.values,
            [0.0],
        ]
    )


def assemble_residual(
    mesh: Mesh, trial: State, prev: State, params: ModelParams, dt: float | None = None
) -> np.ndarray:
    """Residual of the coupled scheme at a trial state (one entry per DOF plus
    the mean-pressure constraint row)."""
    if (prev.u.values.min() < 0.0) or (prev.u.values.max() > 1.0):
        raise ValueError("previous tumor field must lie in [0, 1]")
    if (prev.n.values.min() < 0.0) or (prev.n.values.max() > 1.0):
        raise ValueError("previous nutrient field must lie in [0, 1]")
    asm = _assembler(mesh, params)
    ctx = _step_context(mesh, asm, prev, params)
    return asm.residual(asm.pack(trial), ctx, dt or params.dt)


def assemble_jacobian(
    mesh: Mesh, trial: State, prev: State, params: ModelParams, dt: float | None = None
) -> sp.csc_matrix:
    """Semismooth Newton linearization of the residual at a trial state."""
    asm = _assembler(mesh, params)
    ctx = _step_context(mesh, asm, prev, params)
    return asm.jacobian(asm.pack(trial), ctx, dt or params.dt)


BOUNDS_BAND = 1e-9  # post-solve tolerance band around [0, 1]


def _newton(asm: _Assembler, ctx: _StepContext, dt: float, x0: np.ndarray, cfg: NewtonConfig):
    """Damped semismooth Newton with factorization reuse.

    The factorization is kept across iterations while contraction stays fast
    (Shamanskii acceleration) and rebuilt when it stalls. Repeated floor-damped
    steps without merit decrease abort early: that is the
    swinging-across-a-kink signature and more iterations will not help.
    """
    x = asm.clip_ratios(x0.copy())
    R = asm.residual(x, ctx, dt)
    scaled = asm.scaled_residual(R, x, ctx)
    norm = float(np.abs(scaled).max())
    history = [norm]
    iters = 0
    merit = float(np.linalg.norm(scaled))
    lu = None
    fresh = False
    floor_fails = 0
    while norm > cfg.residual_tol:
        if iters >= cfg.max_iters:
            raise NewtonDiverged(
                f"{cfg.max_iters} iterations, residual {norm:.3e} > {cfg.residual_tol:.1e}"
            )
        if lu is None:
            J = asm.jacobian(x, ctx, dt, permuted=True)
            try:
                # zero-free diagonal + symmetric-mode ordering keeps the fill
                # near the symbolic prediction; threshold pivoting guards it
                lu = splu(
                    J,
                    permc_spec="MMD_AT_PLUS_A",
                    options=dict(SymmetricMode=True, DiagPivotThresh=0.001),
                )
            except RuntimeError as exc:
                raise SingularLinearSystem(str(exc)) from exc
            fresh = True
        rhs = -R[asm.row_perm]
        dx = lu.solve(rhs)
        if fresh:
            # one refinement pass if threshold pivoting lost accuracy
            lin_res = J @ dx - rhs
            if np.linalg.norm(lin_res) > 1e-10 * max(1.0, np.linalg.norm(rhs)):
                dx -= lu.solve(lin_res)
        if not np.isfinite(dx).all():
            raise SingularLinearSystem("non-finite Newton correction")
        alpha = 1.0
        while True:
            x_new = asm.clip_ratios(x + alpha * dx)
            R_new = asm.residual(x_new, ctx, dt)
            merit_new = float(np.linalg.norm(asm.scaled_residual(R_new, x_new, ctx)))
            if merit_new <= (1.0 - 1e-4 * alpha) * merit or alpha <= cfg.relax_floor:
                break
            alpha *= cfg.shrink
        if not fresh and (alpha < 1.0 or merit_new > 0.25 * merit):
            # stale direction underperformed: rebuild the Jacobian and retry
            lu = None
            continue
        if asm.lay.has_ratio:
            x_fix = asm.correct_ratio_branches(x_new.copy())
            if not np.array_equal(x_fix, x_new):
                x_new = x_fix
                R_new = asm.residual(x_new, ctx, dt)
                merit_new = float(np.linalg.norm(asm.scaled_residual(R_new, x_new, ctx)))
        if alpha <= cfg.relax_floor and merit_new >= merit:
            floor_fails += 1
            if floor_fails >= 8:
                raise NewtonDiverged(
                    f"line search floored repeatedly at residual {norm:.3e}"
                )
        else:
            floor_fails = 0
        slow = merit_new > 0.25 * merit
        x, R, merit = x_new, R_new, merit_new
        norm = float(np.abs(asm.scaled_residual(R, x, ctx)).max())
        history.append(norm)
        iters += 1
        if fresh and slow and norm > cfg.residual_tol:
            lu = None  # slow progress even when fresh: refactor at the new point
        fresh = False
    return x, iters, history


def _sigma_continuation(
    mesh: Mesh, prev: State, params: ModelParams, cfg: NewtonConfig, dt: float
):
    """Solve the stabilized step by continuation in the stabilization weight.

    The plain sigma = 0 step always provides a warm start; the fraction is
    raised toward 1 and bisected on failure. Partially stabilized stages are
    legitimate members of the scheme family, so every stage keeps the full
    structure of the problem.
    """
    total_iters = 0
    history = [np.inf]

    def stage_params(frac: float) -> ModelParams:
        return replace(
            params, sigma_u=params.sigma_u * frac, sigma_n=params.sigma_n * frac
        )

    def solve_stage(frac: float, x_warm):
        nonlocal total_iters, history
        sp_ = stage_params(frac)
        asm_s = _assembler(mesh, sp_)
        ctx_s = _step_context(mesh, asm_s, prev, sp_)
        x, iters, hist = _newton(asm_s, ctx_s, dt, x_warm, cfg)
        total_iters += iters
        history = hist
        return x

    def carry(x, frac_from: float, frac_to: float):
        """Repack a stage solution as the warm start of the next stage."""
        asm_from = _assembler(mesh, stage_params(frac_from))
        asm_to = _assembler(mesh, stage_params(frac_to))
        c, p, u, mu, n, ratio, _ = asm_from.unpack(x)
        parts = [c, p, u, mu, n]
        if asm_to.lay.has_ratio:
            if ratio is None:
                vn = c / mesh.iedge_length
                ratio = stabilization_factor(vn, params.eta)
            parts.append(ratio)
        parts.append(np.array([0.0]))
        return np.concatenate(parts)

    asm0 = _assembler(mesh, stage_params(0.0))
    ctx0 = _step_context(mesh, asm0, prev, stage_params(0.0))
    x, iters, _ = _newton(asm0, ctx0, dt, asm0.pack(prev), cfg)
    total_iters += iters

    solved_frac = 0.0
    target = 1.0
    stages = 0
    while solved_frac < 1.0:
        stages += 1
        if stages > 12:
            raise NewtonDiverged("stabilization continuation exceeded 12 stages")
        try:
            x_try = solve_stage(target, carry(x, solved_frac, target))
        except NewtonDiverged:
            target = 0.5 * (solved_frac + target)
            if target - solved_frac < 1e-3:
                raise
            continue
        x = x_try
        solved_frac = target
        target = 1.0
    return x, total_iters, history


def solve_timestep(
    mesh: Mesh,
    prev: State,
    params: ModelParams,
    cfg: NewtonConfig = NewtonConfig(),
    dt: float | None = None,
    guess: np.ndarray | None = None,
) -> tuple[State, StepReport]:
    """Advance one time level. Raises NewtonDiverged when the iteration cap is
    hit (the caller may halve dt and retry), SingularLinearSystem on a failed
    factorization, and BoundsViolation if the solved fields leave [0, 1] by
    more than the tolerance band.

    The factorization is reused across iterations while progress stays fast
    (Shamanskii acceleration); a fresh Jacobian is factored whenever the
    contraction stalls or the line search has to damp, so the fallback is the
    plain semismooth Newton iteration.
    """
    dt = params.dt if dt is None else dt
    asm = _assembler(mesh, params)
    ctx = _step_context(mesh, asm, prev, params)

    x0 = asm.pack(prev) if guess is None else guess.copy()
    try:
        x, iters, history = _newton(asm, ctx, dt, x0, cfg)
    except NewtonDiverged:
        if not asm.lay.has_ratio:
            raise
        # stabilized systems can start with every edge on the |v.n| kink;
        # continue from partially stabilized solves instead
        x, iters, history = _sigma_continuation(mesh, prev, params, cfg, dt)
    norm = history[-1]

    c, p, u, mu, n, _, _ = asm.unpack(x)

    u_min, u_max = float(u.min()), float(u.max())
    n_min, n_max = float(n.min()), float(n.max())
    if u_min < -BOUNDS_BAND or u_max > 1.0 + BOUNDS_BAND:
        raise BoundsViolation(f"tumor field outside band: [{u_min:.3e}, {u_max:.3e}]")
    if n_min < -BOUNDS_BAND or n_max > 1.0 + BOUNDS_BAND:
        raise BoundsViolation(f"nutrient field outside band: [{n_min:.3e}, {n_max:.3e}]")
    u = np.clip(u, 0.0, 1.0)
    n = np.clip(n, 0.0, 1.0)

    state = State(
        v=RT0Field(c.copy()),
        p=zero_mean_pressure(mesh, p),
        u=P0Field(u.copy()),
        mu_u=P1Field(mu.copy()),
        n=P0Field(n.copy()),
        mu_n=P0Field(n / params.delta + ctx.mu_n_offset),
        t=prev.t + dt,
    )

    from .diagnostics import check_energy_law, check_mass

    breakdown, law_residual, _ = check_energy_law(mesh, prev, state, params, dt=dt)
    mass, mass_pi1h = check_mass(mesh, None, state)
    net = asm.Bi @ c
    report = StepReport(
        step=-1,
        time=state.t,
        dt=dt,
        newton_iters=iters,
        final_residual=norm,
        residual_history=tuple(history),
        mass_total=mass,
        mass_total_pi1h=mass_pi1h,
        u_min=u_min,
        u_max=u_max,
        n_min=n_min,
        n_max=n_max,
        energy=breakdown.E_total,
        D_u=breakdown.D_u,
        D_n=breakdown.D_n,
        D_prolif=breakdown.D_prolif,
        D_darcy=breakdown.D_darcy,
        D_dt_u=breakdown.D_dt_u,
        D_dt_n=breakdown.D_dt_n,
        tau_u=breakdown.tau_u,
        tau_n=breakdown.tau_n,
        energy_law_residual=law_residual,
        cs_slack=breakdown.cs_slack,
        div_v_inf=float(np.abs(net / mesh.areas).max()),
        local_incomp_inf=float(np.abs(net).max()),
        pressure_mean=float(mesh.areas @ state.p.values / mesh.domain_area),
    )
    return state, report


def initial_state(mesh: Mesh, u0: P0Field, n0: P0Field, params: ModelParams) -> State:
    """Assemble the time-zero state: zero flow, consistent tumor potential."""
    if u0.values.min() < 0.0 or u0.values.max() > 1.0:
        raise ValueError("u0 must lie in [0, 1]")
    if n0.values.min() < 0.0 or n0.values.max() > 1.0:
        raise ValueError("n0 must lie in [0, 1]")
    asm = _assembler(mesh, params)
    w = asm.A @ u0.values
    fe = _explicit_split_vector(mesh, asm, w)
    mu = (
        params.eps**2 * (asm.S @ w)
        + 0.75 * (asm.M1 @ w)
        + fe
        - params.chi0 * (asm.T @ n0.values)
    ) / asm.omega
    from .physics import mu_n_discrete

    return State(
        v=RT0Field.zeros(mesh),
        p=PressureField.zeros(mesh),
        u=P0Field(u0.values.copy()),
        mu_u=P1Field(mu),
        n=P0Field(n0.values.copy()),
        mu_n=mu_n_discrete(mesh, n0, u0, params),
        t=0.0,
    )


MAX_DT_HALVINGS = 3
ENERGY_INCREASE_TOL = 1e-12  # relative, for the enforce-energy monitor


def run(
    mesh: Mesh,
    initial: State,
    params: ModelParams,
    cfg: NewtonConfig = NewtonConfig(),
    n_steps: int = 0,
    on_step=None,
    enforce_energy: bool = False,
) -> tuple[State, list[StepReport]]:
    """Fixed-step time loop.

    On NewtonDiverged the step is retried with up to three dt halvings (that
    step only); persistent failure raises StepFailed with the step index.
    With ``enforce_energy``, a step whose energy rises beyond roundoff is
    re-solved with full stabilization (sigma = 1, eta = 1e-8).
    """
    state = initial
    reports: list[StepReport] = []
    prev_energy = energy_discrete(mesh, state.u, state.n, params)
    asm = _assembler(mesh, params)
    older: tuple[np.ndarray, float] | None = None  # previous packed state, dt
    for step in range(1, n_steps + 1):
        x_prev = asm.pack(state)
        guess = None
        if older is not None:
            x_old, dt_old = older
            guess = x_prev + (params.dt / dt_old) * (x_prev - x_old)
        new_state = report = None
        try:
            for attempt in range(MAX_DT_HALVINGS + 1):
                try:
                    new_state, report = solve_timestep(
                        mesh,
                        state,
                        params,
                        cfg,
                        dt=params.dt / 2**attempt,
                        guess=guess if attempt == 0 else None,
                    )
                    break
                except NewtonDiverged:
                    if attempt == MAX_DT_HALVINGS:
                        raise
        except (NewtonDiverged, SingularLinearSystem, BoundsViolation) as exc:
            raise StepFailed(step, exc) from exc

        if (
            enforce_energy
            and (params.sigma_u == 0.0 and params.sigma_n == 0.0)
            and report.energy
            > prev_energy + ENERGY_INCREASE_TOL * max(1.0, abs(prev_energy))
        ):
            stabilized = replace(params, sigma_u=1.0, sigma_n=1.0, eta=1e-8)
            try:
                new_state, report = solve_timestep(mesh, state, stabilized, cfg, dt=report.dt)
            except (NewtonDiverged, SingularLinearSystem, BoundsViolation) as exc:
                raise StepFailed(step, exc) from exc
            report.stabilized = True

        report.step = step
        older = (x_prev, report.dt)
        state = new_state
        prev_energy = report.energy
        reports.append(report)
        if on_step is not None:
            on_step(step, state, report)
    return state, reports
