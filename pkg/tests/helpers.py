"""Shared test utilities: independent brute-force form evaluations and
divergence-free velocity generation.

Everything here is deliberately written as plain per-edge/per-element loops,
independent of the package's vectorized kernels, so it can serve as an oracle.
"""

import numpy as np

from chdarcy.mesh import Mesh, edge_incidence


def stream_function_velocity(mesh: Mesh, psi: np.ndarray) -> np.ndarray:
    """Interior-edge fluxes of the rotated gradient of a continuous P1 stream
    function. Exactly divergence-free; zero boundary flux when psi is constant
    on the boundary."""
    a = mesh.iedge_verts[:, 0]
    b = mesh.iedge_verts[:, 1]
    return psi[b] - psi[a]


def random_divfree_velocity(mesh: Mesh, rng, scale: float = 1.0) -> np.ndarray:
    """Random divergence-free interior-edge fluxes with zero boundary flux."""
    psi = rng.normal(scale=scale, size=mesh.n_vertices)
    boundary_vertices = np.unique(mesh.bedge_verts.ravel())
    psi[boundary_vertices] = 0.0
    return stream_function_velocity(mesh, psi)


def positive_part(x):
    return max(x, 0.0)


def negative_part(x):
    return max(-x, 0.0)


def mobility_brute(p, q, v):
    if v <= 0.0 or v >= 1.0:
        return 0.0
    w = p / (p + q)
    kpq = 1.0 / (w**p * (1.0 - w) ** q)
    return kpq * v**p * (1.0 - v) ** q


def mobility_split_brute(p, q, v):
    w_star = p / (p + q)
    if v <= w_star:
        return mobility_brute(p, q, v), 0.0
    return 1.0, mobility_brute(p, q, v) - 1.0


def aupw_brute(mesh: Mesh, coeffs, phi, test) -> float:
    total = 0.0
    for e in range(mesh.n_interior_edges):
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        le = mesh.iedge_length[e]
        vn = coeffs[e] / le
        upwind = positive_part(vn) * phi[K] - negative_part(vn) * phi[L]
        total += le * upwind * (test[K] - test[L])
    return total


def bupw_brute(mesh: Mesh, mu, w, p, q, test) -> float:
    total = 0.0
    for e in range(mesh.n_interior_edges):
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        le = mesh.iedge_length[e]
        de = mesh.iedge_bary_dist[e]
        jmu = mu[K] - mu[L]
        upK, downK = mobility_split_brute(p, q, w[K])
        upL, downL = mobility_split_brute(p, q, w[L])
        term = positive_part(jmu) * positive_part(upK + downL) - negative_part(
            jmu
        ) * positive_part(upL + downK)
        total += (le / de) * term * (test[K] - test[L])
    return total


def ch_brute(mesh: Mesh, w, mu, vbar_full) -> float:
    total = 0.0
    for t, edges in enumerate(edge_incidence(mesh)):
        net_flux = sum(s * vbar_full[e] for e, s in edges)
        total -= mu[t] * w[t] * net_flux
    for e in range(mesh.n_interior_edges):
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        total -= vbar_full[e] * 0.5 * (w[K] + w[L]) * (mu[K] - mu[L])
    return total


def sh_brute(mesh: Mesh, u_coeffs, phi, mu, test_coeffs, eta) -> float:
    total = 0.0
    for e in range(mesh.n_interior_edges):
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        le = mesh.iedge_length[e]
        un = u_coeffs[e] / le
        tn = test_coeffs[e] / le
        if eta == 0.0:
            g = 0.0 if un == 0.0 else (1.0 if un > 0.0 else -1.0)
        else:
            g = un / (abs(un) + eta)
        total += -0.5 * le * tn * g * (phi[K] - phi[L]) * (mu[K] - mu[L])
    return total


def tau_brute(mesh: Mesh, coeffs, phi, mu, sigma, eta) -> float:
    total = 0.0
    for e in range(mesh.n_interior_edges):
        K, L = mesh.iedge_K[e], mesh.iedge_L[e]
        le = mesh.iedge_length[e]
        vn = abs(coeffs[e] / le)
        if vn + eta == 0.0:
            continue
        ratio = ((1.0 - sigma) * vn + eta) / (vn + eta)
        total += 0.5 * le * ratio * vn * (phi[K] - phi[L]) * (mu[K] - mu[L])
    return total


def level_set_area(mesh: Mesh, vertex_values, threshold: float) -> float:
    """Exact area of {P1 function > threshold}: per-triangle linear clipping."""
    s = vertex_values[mesh.triangles] - threshold  # (nt, 3)
    pos = s > 0.0
    npos = pos.sum(axis=1)
    area = float(mesh.areas[npos == 3].sum())
    # one vertex above: similar sub-triangle with legs cut at the crossings
    one = np.flatnonzero(npos == 1)
    for t in one:
        (i,) = np.flatnonzero(pos[t])
        j, k = [m for m in range(3) if m != i]
        frac = s[t, i] ** 2 / ((s[t, i] - s[t, j]) * (s[t, i] - s[t, k]))
        area += float(mesh.areas[t] * frac)
    # two vertices above: complement of the sub-triangle at the low vertex
    two = np.flatnonzero(npos == 2)
    for t in two:
        (k,) = np.flatnonzero(~pos[t])
        i, j = [m for m in range(3) if m != k]
        frac = s[t, k] ** 2 / ((s[t, k] - s[t, i]) * (s[t, k] - s[t, j]))
        area += float(mesh.areas[t] * (1.0 - frac))
    return area


def _push_off(values, target, margin):
    """Move entries inside a kink band just outside it (deterministic repair;
    rejection sampling on whole fields has vanishing acceptance)."""
    d = values - target
    inside = np.abs(d) < margin
    if inside.any():
        direction = np.where(d[inside] >= 0.0, 1.0, -1.0)
        values[inside] = target + 1.5 * margin * direction
    return values


def generic_trial_state(mesh: Mesh, rng, delta=0.01, chi0=0.1):
    """Trial state away from all semismooth kinks, for derivative checks."""
    from chdarcy.spaces import P0Field, P1Field, PressureField, RT0Field
    from chdarcy.stepper import State

    nt, nv, nei = mesh.n_triangles, mesh.n_vertices, mesh.n_interior_edges
    u = rng.uniform(0.1, 0.9, size=nt)
    n = rng.uniform(0.1, 0.9, size=nt)
    for target in (0.5, 5.0 / 6.0):
        _push_off(u, target, 1e-2)
        _push_off(n, target, 1e-2)
    c = _push_off(rng.normal(size=nei), 0.0, 1e-2)
    p = rng.normal(size=nt)
    # nutrient-potential jumps depend on n: nudge offending upwind elements
    # (the nudges are far below the u/n kink margins)
    for _ in range(20):
        mu_n = n / delta - chi0 * u
        jn = mu_n[mesh.iedge_K] - mu_n[mesh.iedge_L]
        bad = np.flatnonzero(np.abs(jn) < 1e-3)
        if bad.size == 0:
            break
        for e in bad:
            shift = 2e-3 * delta * (1.0 if jn[e] >= 0 else -1.0)
            n[mesh.iedge_K[e]] += shift
    else:
        raise RuntimeError("could not clear nutrient-potential jumps")
    # tumor-potential jumps come from the free P1 field: resample until clear
    for _ in range(200):
        mu = rng.normal(size=nv)
        m_u = mu[mesh.triangles].mean(axis=1)
        ju = m_u[mesh.iedge_K] - m_u[mesh.iedge_L]
        if np.abs(ju).min() > 1e-3:
            break
    else:
        raise RuntimeError("could not find kink-free tumor-potential jumps")
    return State(
        v=RT0Field(c), p=PressureField(p), u=P0Field(u), mu_u=P1Field(mu),
        n=P0Field(n), mu_n=P0Field(np.zeros(nt)), t=0.0,
    )


def jacobian_fd_slope(mesh: Mesh, params, prev, trial, rng,
                      hs=(1e-4, 1e-5, 1e-6, 1e-7)):
    """Log-log slope of the directional finite-difference error of the
    Jacobian; first order at generic points."""
    import chdarcy.stepper as stepper_mod
    from chdarcy.stepper import assemble_jacobian, assemble_residual

    asm = stepper_mod._assembler(mesh, params)
    ctx = stepper_mod._step_context(mesh, asm, prev, params)
    x = asm.pack(trial)
    J = assemble_jacobian(mesh, trial, prev, params)
    R0 = assemble_residual(mesh, trial, prev, params)
    d = rng.normal(size=x.size)
    d /= np.abs(d).max()
    jd = J @ d
    errs = []
    for h in hs:
        fd = (asm.residual(x + h * d, ctx, params.dt) - R0) / h
        errs.append(np.linalg.norm(fd - jd))
    slope = float(np.polyfit(np.log10(hs), np.log10(errs), 1)[0])
    return slope, errs
