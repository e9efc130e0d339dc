"""Structure-theorem diagnostics: mass totals and drifts, pointwise bound
extrema, the per-step energy law with its full dissipation breakdown, and the
CSV / snapshot / VTK emitters consumed by the plotting component.

The energy-law residual is delta_t E + sum(dissipations) + tau_u + tau_n; for
exact solutions of the scheme it equals the convex-splitting slack, which is
nonpositive, so the check is one-sided. (The consistent upwind remainder
enters the law with a minus sign: the identity
a_upw + c_h + sigma s_h = +tau holds for the forms as defined here, so the
remainder lands on the right-hand side as -tau.) All integrals reuse the exact
quadratures of the physics module, keeping the inequality machine-precision
rather than quadrature-polluted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .mesh import Mesh
from .physics import (
    ModelParams,
    convex_split_f,
    energy_breakdown as physics_energy_breakdown,
    mobility_eval,
    potential_F,
)
from .forms import b_upw, tau_diag
from .spaces import (
    QUAD4_BARY,
    QUAD4_W,
    p1_stiffness_matrix,
    pi0,
    pi0_pi1h,
    pi1h,
    rt0_cell_average,
    rt0_l2_product,
)

if TYPE_CHECKING:
    from .stepper import State, StepReport


ENERGY_LAW_TOL = 1e-9  # relative to max(1, |E|)


@dataclass(frozen=True)
class EnergyBreakdown:
    E_total: float
    E_gradient: float
    E_potential: float
    E_cross: float
    E_nutrient: float
    D_u: float
    D_n: float
    D_prolif: float
    D_darcy: float
    D_dt_u: float
    D_dt_n: float
    tau_u: float
    tau_n: float
    cs_slack: float

    @property
    def dissipation_total(self) -> float:
        return (
            self.D_u + self.D_n + self.D_prolif + self.D_darcy + self.D_dt_u + self.D_dt_n
        )


@dataclass(frozen=True)
class BoundsReport:
    u_min: float
    u_max: float
    n_min: float
    n_max: float
    pi1h_u_min: float
    pi1h_u_max: float
    pi0_pi1h_u_min: float
    pi0_pi1h_u_max: float

    def within_unit_interval(self, tol: float = 1e-9) -> bool:
        lows = (self.u_min, self.n_min, self.pi1h_u_min, self.pi0_pi1h_u_min)
        highs = (self.u_max, self.n_max, self.pi1h_u_max, self.pi0_pi1h_u_max)
        return min(lows) >= -tol and max(highs) <= 1.0 + tol


def mass_totals(mesh: Mesh, state: "State") -> tuple[float, float]:
    """Total cells-plus-nutrients mass, and its Pi1h-regularized variant."""
    plain = float(mesh.areas @ (state.u.values + state.n.values))
    w = pi1h(mesh, state.u)
    reg = float(mesh.vertex_support_volume @ w.values + mesh.areas @ state.n.values)
    return plain, reg


def check_mass(mesh: Mesh, prev: "State | None", next_: "State") -> tuple[float, float]:
    """Mass drift between consecutive states (totals when prev is None)."""
    m1, m1p = mass_totals(mesh, next_)
    if prev is None:
        return m1, m1p
    m0, m0p = mass_totals(mesh, prev)
    return m1 - m0, m1p - m0p


def check_bounds(mesh: Mesh, state: "State") -> BoundsReport:
    w = pi1h(mesh, state.u)
    ww = pi0_pi1h(mesh, state.u)
    return BoundsReport(
        u_min=float(state.u.values.min()),
        u_max=float(state.u.values.max()),
        n_min=float(state.n.values.min()),
        n_max=float(state.n.values.max()),
        pi1h_u_min=float(w.values.min()),
        pi1h_u_max=float(w.values.max()),
        pi0_pi1h_u_min=float(ww.values.min()),
        pi0_pi1h_u_max=float(ww.values.max()),
    )


def _convex_split_slack(
    mesh: Mesh, w_next: np.ndarray, w_prev: np.ndarray, dt: float
) -> float:
    """delta_t int F(w) - (f(w, w_prev), delta_t w), degree-4 exact.

    Pointwise nonpositive whenever both arguments lie in [0, 1], so the
    integral is a roundoff-level nonpositive number for admissible states.
    """
    wq = w_next[mesh.triangles] @ QUAD4_BARY.T
    wpq = w_prev[mesh.triangles] @ QUAD4_BARY.T
    gap = potential_F(wq) - potential_F(wpq) - convex_split_f(wq, wpq) * (wq - wpq)
    return float(np.sum(mesh.areas[:, None] * QUAD4_W[None, :] * gap)) / dt


def check_energy_law(
    mesh: Mesh,
    prev: "State",
    next_: "State",
    params: ModelParams,
    dt: float | None = None,
) -> tuple[EnergyBreakdown, float, bool]:
    """Evaluate every term of the discrete energy law across one step.

    Returns the breakdown, the law residual delta_t E + sum(D) + tau_u + tau_n,
    and whether it passes the one-sided tolerance. The residual is a property
    of solutions: arbitrary state pairs may come out positive.
    """
    if dt is None:
        dt = next_.t - prev.t
    if dt <= 0:
        raise ValueError("states must be ordered in time")

    e_tot, e_grad, e_pot, e_cross, e_nutr = physics_energy_breakdown(
        mesh, next_.u, next_.n, params
    )
    e_prev = physics_energy_breakdown(mesh, prev.u, prev.n, params)[0]

    pi0_mu = pi0(mesh, next_.mu_u)
    d_u = params.C_u * b_upw(mesh, pi0_mu, next_.u, params.mobility, pi0_mu)
    d_n = params.C_n * b_upw(mesh, next_.mu_n, next_.n, params.mobility, next_.mu_n)

    s = next_.mu_n.values - pi0_mu.values
    spos = np.maximum(s, 0.0)
    prolif = mobility_eval(params.prolif_mobility, next_.u.values) * np.maximum(
        next_.n.values, 0.0
    )
    d_prolif = params.delta * params.prolif_rate * float(mesh.areas @ (prolif * spos**2))

    d_darcy = rt0_l2_product(mesh, next_.v, next_.v) / params.K_perm

    S = p1_stiffness_matrix(mesh)
    dw = pi1h(mesh, next_.u).values - pi1h(mesh, prev.u).values
    d_dt_u = params.eps**2 / (2.0 * dt) * float(dw @ (S @ dw))
    dn = next_.n.values - prev.n.values
    d_dt_n = float(mesh.areas @ dn**2) / (2.0 * params.delta * dt)

    t_u = tau_diag(mesh, next_.v, next_.u, pi0_mu, params.sigma_u, params.eta)
    t_n = tau_diag(mesh, next_.v, next_.n, next_.mu_n, params.sigma_n, params.eta)

    slack = _convex_split_slack(
        mesh, pi1h(mesh, next_.u).values, pi1h(mesh, prev.u).values, dt
    )

    breakdown = EnergyBreakdown(
        E_total=e_tot,
        E_gradient=e_grad,
        E_potential=e_pot,
        E_cross=e_cross,
        E_nutrient=e_nutr,
        D_u=d_u,
        D_n=d_n,
        D_prolif=d_prolif,
        D_darcy=d_darcy,
        D_dt_u=d_dt_u,
        D_dt_n=d_dt_n,
        tau_u=t_u,
        tau_n=t_n,
        cs_slack=slack,
    )
    residual = (e_tot - e_prev) / dt + breakdown.dissipation_total + t_u + t_n
    passed = residual <= ENERGY_LAW_TOL * max(1.0, abs(e_tot))
    return breakdown, residual, passed


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "step",
    "time",
    "newton_iters",
    "mass",
    "u_min",
    "u_max",
    "n_min",
    "n_max",
    "E",
    "D_u",
    "D_n",
    "D_prolif",
    "D_darcy",
    "D_dt_u",
    "D_dt_n",
    "tau_u",
    "tau_n",
    "law_residual",
    "div_v_inf",
)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def emit_csv(reports: Iterable["StepReport"], sink) -> None:
    """Write one row per step with the stable documented column order.

    ``sink`` is a path or a writable text file object. Decimals carry 17
    significant digits, so parsing them back reproduces the doubles exactly.
    """
    own = isinstance(sink, (str, bytes))
    fh = open(sink, "w", newline="") if own else sink
    try:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in reports:
            row = (
                r.step,
                r.time,
                r.newton_iters,
                r.mass_total,
                r.u_min,
                r.u_max,
                r.n_min,
                r.n_max,
                r.energy,
                r.D_u,
                r.D_n,
                r.D_prolif,
                r.D_darcy,
                r.D_dt_u,
                r.D_dt_n,
                r.tau_u,
                r.tau_n,
                r.energy_law_residual,
                r.div_v_inf,
            )
            fh.write(",".join(_fmt(x) for x in row) + "\n")
    finally:
        if own:
            fh.close()


# snapshot sections, in file order: consecutive sections alternate kinds so a
# reader can split on kind changes
SNAPSHOT_FIELDS = (
    ("u", "p0"),
    ("pi1h_u", "p1"),
    ("n", "p0"),
    ("mu_u", "p1"),
    ("mu_n", "p0"),
    ("p", "pressure"),
    ("v", "rt0"),
)


def write_snapshot_csv(mesh: Mesh, state: "State", sink) -> None:
    """Field snapshot: header ``kind,index,value`` and one section per field
    in the documented SNAPSHOT_FIELDS order."""
    w = pi1h(mesh, state.u)
    data = {
        "u": state.u.values,
        "pi1h_u": w.values,
        "n": state.n.values,
        "mu_u": state.mu_u.values,
        "mu_n": state.mu_n.values,
        "p": state.p.values,
        "v": state.v.coeffs,
    }
    own = isinstance(sink, (str, bytes))
    fh = open(sink, "w", newline="") if own else sink
    try:
        fh.write("kind,index,value\n")
        for name, kind in SNAPSHOT_FIELDS:
            for i, val in enumerate(data[name]):
                fh.write(f"{kind},{i},{_fmt(val)}\n")
    finally:
        if own:
            fh.close()


def read_snapshot_csv(path) -> dict[str, np.ndarray]:
    """Parse a snapshot back into named arrays (sections split on kind change)."""
    sections: list[tuple[str, list[float]]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["kind", "index", "value"]:
            raise ValueError(f"unexpected snapshot header: {header}")
        for kind, idx, value in reader:
            if not sections or sections[-1][0] != kind:
                sections.append((kind, []))
            if int(idx) != len(sections[-1][1]):
                raise ValueError("non-contiguous snapshot indices")
            sections[-1][1].append(float(value))
    if len(sections) != len(SNAPSHOT_FIELDS):
        raise ValueError(
            f"expected {len(SNAPSHOT_FIELDS)} snapshot sections, got {len(sections)}"
        )
    out = {}
    for (name, kind), (got_kind, values) in zip(SNAPSHOT_FIELDS, sections):
        if kind != got_kind:
            raise ValueError(f"section {name}: expected kind {kind}, got {got_kind}")
        out[name] = np.asarray(values)
    return out


def write_vtk(mesh: Mesh, state: "State", sink, title: str = "chdarcy snapshot") -> None:
    """Legacy ASCII VTK unstructured grid: P0 fields as CELL_DATA, P1 fields
    as POINT_DATA, velocity as cell-averaged vectors."""
    w = pi1h(mesh, state.u)
    vel = rt0_cell_average(mesh, state.v)
    own = isinstance(sink, (str, bytes))
    fh = open(sink, "w", newline="") if own else sink
    try:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{_fmt(x)} {_fmt(y)} 0\n")
        nt = mesh.n_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"3 {i} {j} {k}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"CELL_DATA {nt}\n")
        for name, vals in (
            ("u", state.u.values),
            ("n", state.n.values),
            ("mu_n", state.mu_n.values),
            ("p", state.p.values),
        ):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(_fmt(v) for v in vals) + "\n")
        fh.write("VECTORS velocity double\n")
        for vx, vy in vel:
            fh.write(f"{_fmt(vx)} {_fmt(vy)} 0\n")
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, vals in (("pi1h_u", w.values), ("mu_u", state.mu_u.values)):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(_fmt(v) for v in vals) + "\n")
    finally:
        if own:
            fh.close()
