"""Run configuration, experiment presets, and initial conditions.

The config file format is flat ``key = value`` text in four sections,
``[mesh] [model] [solver] [output]``; every model key is named after the
corresponding parameter field so presets, files, and the resolved-config echo
stay diffable.

Presets cover the experiment grid at desk scale (36x36 crossed mesh of
[-10,10]^2): seven parameter families, symmetric and nonsymmetric
mobility/proliferation choices, and permeabilities 0.1, 1, 10.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import Mesh
from .physics import MobilitySpec, ModelParams
from .spaces import P0Field
from .stepper import NewtonConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name
        self.reason = reason


@dataclass
class RunConfig:
    nx: int = 36
    ny: int = 36
    domain: tuple[float, float, float, float] = (-10.0, 10.0, -10.0, 10.0)
    mesh_file: str = ""
    params: ModelParams = field(default_factory=ModelParams)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    n_steps: int = 200
    snapshot_every: int = 50
    initial: str = "irregular"
    enforce_energy: bool = False
    seed: int = 0
    preset: str = ""
    desk_scale: bool = True

    def __post_init__(self):
        if self.n_steps < 0:
            raise ConfigError("n_steps", "must be >= 0")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every", "must be >= 1")


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def initial_conditions(
    mesh: Mesh, kind: str, eps: float = 0.1, seed: int = 0
) -> tuple[P0Field, P0Field]:
    """Initial tumor/nutrient fields by barycenter evaluation, clamped to [0,1].

    Kinds: ``irregular`` (circular tumor of radius 1.75 at the origin with
    three nutrient reservoirs), ``constant:c1,c2``, and ``random`` (seeded
    uniform fields, for property-test runs).
    """
    x, y = mesh.barycenters[:, 0], mesh.barycenters[:, 1]
    s2e = np.sqrt(2.0) * eps
    if kind == "irregular":
        u0 = 0.5 * (np.tanh((1.75 - np.hypot(x, y)) / s2e) + 1.0)
        n0 = 0.5 * (1.0 - u0) + 0.25 * (
            np.tanh((1.0 - np.hypot(x - 2.45, y - 1.45)) / s2e)
            + np.tanh((1.75 - np.hypot(x + 3.75, y - 1.0)) / s2e)
            + np.tanh((2.5 - np.hypot(x, y + 5.0)) / s2e)
            + 3.0
        )
    elif kind.startswith("constant:"):
        try:
            c1, c2 = (float(w) for w in kind.split(":", 1)[1].split(","))
        except ValueError as exc:
            raise ConfigError("initial", f"bad constant spec {kind!r}") from exc
        if not (0.0 <= c1 <= 1.0 and 0.0 <= c2 <= 1.0):
            raise ConfigError("initial", "constants must lie in [0, 1]")
        u0 = np.full(mesh.n_triangles, c1)
        n0 = np.full(mesh.n_triangles, c2)
    elif kind == "random":
        rng = np.random.default_rng(seed)
        u0 = rng.uniform(size=mesh.n_triangles)
        n0 = rng.uniform(size=mesh.n_triangles)
    else:
        raise ConfigError("initial", f"unknown initial-condition kind {kind!r}")
    return P0Field(np.clip(u0, 0.0, 1.0)), P0Field(np.clip(n0, 0.0, 1.0))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# family -> (proliferation rate, chemotaxis strength, time step)
_FAMILIES = {
    "reference": (0.5, 0.1, 0.1),
    "P0-0.001": (0.001, 0.1, 0.1),
    "P0-0.05": (0.05, 0.1, 0.1),
    "P0-2": (2.0, 0.1, 0.025),
    "chi-0.01": (0.5, 0.01, 0.1),
    "chi-0.5": (0.5, 0.5, 0.01),
    "chi-1": (0.5, 1.0, 0.01),
}
_FUNCTION_CHOICES = {
    "sym": (MobilitySpec(1, 1), (1, 1)),
    "nonsym": (MobilitySpec(5, 1), (1, 3)),
}
_PERMEABILITIES = {"0.1": 0.1, "1": 1.0, "10": 10.0}


def preset_names() -> list[str]:
    names = ["constant-sanity"]
    for fam in _FAMILIES:
        for fn in _FUNCTION_CHOICES:
            for k in _PERMEABILITIES:
                names.append(f"{fam}-{fn}-K{k}")
    return names


def preset(name: str) -> RunConfig:
    """Resolve a named experiment configuration (desk scale)."""
    if name == "constant-sanity":
        return RunConfig(
            params=ModelParams(chi0=0.0, prolif_rate=0.0, dt=0.1),
            n_steps=10,
            snapshot_every=5,
            initial="constant:0.5,0.5",
            preset=name,
        )
    parts = name.rsplit("-", 2)
    if len(parts) == 3 and parts[1] in _FUNCTION_CHOICES and parts[2].startswith("K"):
        fam, fn, kpart = parts
        if fam in _FAMILIES and kpart[1:] in _PERMEABILITIES:
            p0, chi0, dt = _FAMILIES[fam]
            mobility, prolif_exps = _FUNCTION_CHOICES[fn]
            return RunConfig(
                params=ModelParams(
                    eps=0.1,
                    delta=0.01,
                    C_u=2.8,
                    C_n=2.8e-4,
                    K_perm=_PERMEABILITIES[kpart[1:]],
                    chi0=chi0,
                    prolif_rate=p0,
                    mobility=mobility,
                    prolif_exps=prolif_exps,
                    dt=dt,
                ),
                n_steps=200,
                snapshot_every=50,
                initial="irregular",
                preset=name,
            )
    raise ConfigError("preset", f"unknown preset {name!r} (see preset_names())")


# ---------------------------------------------------------------------------
# config file round-trip
# ---------------------------------------------------------------------------

def _get(parser, section, key, conv, default, errors="named"):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc


def _pair(conv):
    def parse(raw):
        a, b = (w.strip() for w in raw.split(","))
        return conv(a), conv(b)

    return parse


def _quad(raw):
    vals = tuple(float(w) for w in raw.split(","))
    if len(vals) != 4:
        raise ValueError("need x0,x1,y0,y1")
    return vals


def _bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned key=value format into a RunConfig."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from exc

    base = RunConfig()
    dm = base.params
    try:
        mob = _get(parser, "model", "mobility", _pair(int), (dm.mobility.p, dm.mobility.q))
        params = ModelParams(
            eps=_get(parser, "model", "eps", float, dm.eps),
            delta=_get(parser, "model", "delta", float, dm.delta),
            C_u=_get(parser, "model", "C_u", float, dm.C_u),
            C_n=_get(parser, "model", "C_n", float, dm.C_n),
            K_perm=_get(parser, "model", "K_perm", float, dm.K_perm),
            chi0=_get(parser, "model", "chi0", float, dm.chi0),
            prolif_rate=_get(parser, "model", "prolif_rate", float, dm.prolif_rate),
            mobility=MobilitySpec(*mob),
            prolif_exps=_get(parser, "model", "prolif_exps", _pair(int), dm.prolif_exps),
            sigma_u=_get(parser, "model", "sigma_u", float, dm.sigma_u),
            sigma_n=_get(parser, "model", "sigma_n", float, dm.sigma_n),
            eta=_get(parser, "model", "eta", float, dm.eta),
            dt=_get(parser, "model", "dt", float, dm.dt),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from exc

    dn = base.newton
    try:
        newton = NewtonConfig(
            residual_tol=_get(parser, "solver", "residual_tol", float, dn.residual_tol),
            max_iters=_get(parser, "solver", "max_iters", int, dn.max_iters),
            shrink=_get(parser, "solver", "shrink", float, dn.shrink),
            relax_floor=_get(parser, "solver", "relax_floor", float, dn.relax_floor),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("solver", str(exc)) from exc

    return RunConfig(
        nx=_get(parser, "mesh", "nx", int, base.nx),
        ny=_get(parser, "mesh", "ny", int, base.ny),
        domain=_get(parser, "mesh", "domain", _quad, base.domain),
        mesh_file=_get(parser, "mesh", "mesh_file", str, base.mesh_file).strip(),
        params=params,
        newton=newton,
        n_steps=_get(parser, "output", "n_steps", int, base.n_steps),
        snapshot_every=_get(parser, "output", "snapshot_every", int, base.snapshot_every),
        initial=_get(parser, "output", "initial", str, base.initial).strip(),
        enforce_energy=_get(parser, "output", "enforce_energy", _bool, base.enforce_energy),
        seed=_get(parser, "output", "seed", int, base.seed),
        preset=_get(parser, "output", "preset", str, base.preset).strip(),
        desk_scale=_get(parser, "output", "desk_scale", _bool, base.desk_scale),
    )


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) reproduces cfg exactly."""
    p, nw = cfg.params, cfg.newton
    out = io.StringIO()
    out.write("[mesh]\n")
    out.write(f"nx = {cfg.nx}\n")
    out.write(f"ny = {cfg.ny}\n")
    out.write("domain = " + ",".join(format(v, ".17g") for v in cfg.domain) + "\n")
    if cfg.mesh_file:
        out.write(f"mesh_file = {cfg.mesh_file}\n")
    out.write("\n[model]\n")
    for key, val in (
        ("eps", p.eps), ("delta", p.delta), ("C_u", p.C_u), ("C_n", p.C_n),
        ("K_perm", p.K_perm), ("chi0", p.chi0), ("prolif_rate", p.prolif_rate),
    ):
        out.write(f"{key} = {val:.17g}\n")
    out.write(f"mobility = {p.mobility.p},{p.mobility.q}\n")
    out.write(f"prolif_exps = {p.prolif_exps[0]},{p.prolif_exps[1]}\n")
    for key, val in (("sigma_u", p.sigma_u), ("sigma_n", p.sigma_n), ("eta", p.eta), ("dt", p.dt)):
        out.write(f"{key} = {val:.17g}\n")
    out.write("\n[solver]\n")
    out.write(f"residual_tol = {nw.residual_tol:.17g}\n")
    out.write(f"max_iters = {nw.max_iters}\n")
    out.write(f"shrink = {nw.shrink:.17g}\n")
    out.write(f"relax_floor = {nw.relax_floor:.17g}\n")
    out.write("\n[output]\n")
    out.write(f"n_steps = {cfg.n_steps}\n")
    out.write(f"snapshot_every = {cfg.snapshot_every}\n")
    out.write(f"initial = {cfg.initial}\n")
    out.write(f"enforce_energy = {str(cfg.enforce_energy).lower()}\n")
    out.write(f"seed = {cfg.seed}\n")
    if cfg.preset:
        out.write(f"preset = {cfg.preset}\n")
    out.write(f"desk_scale = {str(cfg.desk_scale).lower()}\n")
    return out.getvalue()


def apply_overrides(
    cfg: RunConfig,
    steps: int | None = None,
    mesh_size: tuple[int, int] | None = None,
    snapshot_every: int | None = None,
    mesh_file: str | None = None,
    enforce_energy: bool = False,
    seed: int | None = None,
) -> RunConfig:
    if steps is not None:
        cfg = replace(cfg, n_steps=steps)
    if mesh_size is not None:
        cfg = replace(cfg, nx=mesh_size[0], ny=mesh_size[1])
    if snapshot_every is not None:
        cfg = replace(cfg, snapshot_every=snapshot_every)
    if mesh_file is not None:
        cfg = replace(cfg, mesh_file=mesh_file)
    if enforce_energy:
        cfg = replace(cfg, enforce_energy=True)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg
