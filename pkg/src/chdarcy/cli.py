"""Command-line driver: resolve a configuration, run the time loop, emit
diagnostics and snapshots, and (with ``--check``) assert the structure
theorems at every step.

Exit codes: 0 success, 2 malformed configuration (one ``error: <field>:
<reason>`` line on stderr), 1 runtime failure or a failed ``--check``
assertion (one ``error: check:<name>: ...`` line).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .mesh import MeshError, build_crossed_mesh, load_mesh_text
from .diagnostics import (
    ENERGY_LAW_TOL,
    check_bounds,
    emit_csv,
    write_snapshot_csv,
    write_vtk,
)
from .presets import (
    ConfigError,
    RunConfig,
    apply_overrides,
    initial_conditions,
    parse_config,
    preset,
    preset_names,
    serialize_config,
)
from .stepper import StepFailed, initial_state, run

MASS_TOL = 1e-10  # relative to the domain area
BOUNDS_TOL = 1e-9
DIV_TOL = 1e-10
PRESSURE_MEAN_TOL = 1e-12


class CheckFailed(RuntimeError):
    def __init__(self, name: str, step: int, value: float):
        super().__init__(f"check:{name}: step={step} value={value:.6e}")
        self.name = name
        self.step = step
        self.value = value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chdarcy",
        description="Structure-preserving Cahn-Hilliard-Darcy tumor growth solver",
    )
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", metavar="NAME", help="named experiment configuration")
    src.add_argument("--config", metavar="FILE", help="configuration file")
    src.add_argument(
        "--list-presets", action="store_true", help="print available preset names"
    )
    parser.add_argument("--steps", type=int, metavar="N", help="override step count")
    parser.add_argument(
        "--mesh", type=int, nargs=2, metavar=("NX", "NY"), help="override mesh size"
    )
    parser.add_argument("--out", default="out", metavar="DIR", help="output directory")
    parser.add_argument("--snapshot-every", type=int, metavar="N")
    parser.add_argument(
        "--check",
        action="store_true",
        help="assert mass/bounds/divergence/energy-law at every step",
    )
    parser.add_argument(
        "--enforce-energy",
        action="store_true",
        help="re-solve energy-increasing steps with full stabilization",
    )
    parser.add_argument("--mesh-file", metavar="PATH", help="plain-text mesh to load")
    parser.add_argument("--seed", type=int, metavar="N", help="seed for random initial data")
    return parser


def _resolve(args) -> RunConfig:
    if args.preset:
        cfg = preset(args.preset)
    else:
        try:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError("config", str(exc)) from exc
    return apply_overrides(
        cfg,
        steps=args.steps,
        mesh_size=tuple(args.mesh) if args.mesh else None,
        snapshot_every=args.snapshot_every,
        mesh_file=args.mesh_file,
        enforce_energy=args.enforce_energy,
        seed=args.seed,
    )


def _check_step(mesh, state, report, params, mass0, mass0_reg):
    area = mesh.domain_area
    if abs(report.mass_total - mass0) > MASS_TOL * area:
        raise CheckFailed("mass", report.step, report.mass_total - mass0)
    if abs(report.mass_total_pi1h - mass0_reg) > MASS_TOL * area:
        raise CheckFailed("mass-pi1h", report.step, report.mass_total_pi1h - mass0_reg)
    bounds = check_bounds(mesh, state)
    if not bounds.within_unit_interval(BOUNDS_TOL):
        worst = min(bounds.u_min, bounds.n_min, 0.0) + max(
            bounds.u_max - 1.0, bounds.n_max - 1.0, 0.0
        )
        raise CheckFailed("bounds", report.step, worst)
    if report.div_v_inf > DIV_TOL:
        raise CheckFailed("divergence", report.step, report.div_v_inf)
    if report.local_incomp_inf > DIV_TOL:
        raise CheckFailed("local-incompressibility", report.step, report.local_incomp_inf)
    p_scale = max(1.0, float(np.abs(state.p.values).max()))
    if abs(report.pressure_mean) > PRESSURE_MEAN_TOL * p_scale:
        raise CheckFailed("pressure-mean", report.step, report.pressure_mean)
    if report.energy_law_residual > ENERGY_LAW_TOL * max(1.0, abs(report.energy)):
        raise CheckFailed("energy-law", report.step, report.energy_law_residual)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        for name in preset_names():
            print(name)
        return 0

    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"error: {exc.field_name}: {exc.reason}", file=sys.stderr)
        return 2

    try:
        if cfg.mesh_file:
            mesh = load_mesh_text(cfg.mesh_file)
        else:
            mesh = build_crossed_mesh(cfg.nx, cfg.ny, cfg.domain)
    except (MeshError, OSError) as exc:
        print(f"error: mesh: {exc}", file=sys.stderr)
        return 2

    try:
        u0, n0 = initial_conditions(mesh, cfg.initial, eps=cfg.params.eps, seed=cfg.seed)
    except ConfigError as exc:
        print(f"error: {exc.field_name}: {exc.reason}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved"), "w") as fh:
        fh.write(serialize_config(cfg))

    state0 = initial_state(mesh, u0, n0, cfg.params)
    mass0 = float(mesh.areas @ (u0.values + n0.values))
    from .diagnostics import mass_totals

    _, mass0_reg = mass_totals(mesh, state0)

    def write_snapshot(step, state):
        stem = os.path.join(args.out, f"snap_{step:06d}")
        write_vtk(mesh, state, stem + ".vtk")
        write_snapshot_csv(mesh, state, stem + ".csv")

    write_snapshot(0, state0)
    reports = []

    def on_step(step, state, report):
        reports.append(report)
        if args.check:
            _check_step(mesh, state, report, cfg.params, mass0, mass0_reg)
        if step % cfg.snapshot_every == 0 or step == cfg.n_steps:
            write_snapshot(step, state)

    t0 = time.time()
    try:
        final, _ = run(
            mesh,
            state0,
            cfg.params,
            cfg.newton,
            n_steps=cfg.n_steps,
            on_step=on_step,
            enforce_energy=cfg.enforce_energy,
        )
    except CheckFailed as exc:
        emit_csv(reports, os.path.join(args.out, "diag.csv"))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StepFailed as exc:
        emit_csv(reports, os.path.join(args.out, "diag.csv"))
        print(f"error: step:{exc.step}: {exc.__cause__}", file=sys.stderr)
        return 1

    emit_csv(reports, os.path.join(args.out, "diag.csv"))
    wall = time.time() - t0
    if reports:
        last = reports[-1]
        print(
            f"completed {cfg.n_steps} steps in {wall:.1f} s: t={last.time:.4g} "
            f"E={last.energy:.6g} u in [{last.u_min:.3g}, {last.u_max:.3g}] "
            f"mass drift={last.mass_total - mass0:.3e}"
        )
    else:
        print("completed 0 steps")
    return 0


if __name__ == "__main__":
    sys.exit(main())
