"""Sectioned key-value build configuration.

The format is line based: ``[section]`` headers, ``key = value`` pairs,
``#`` comments.  Values are numbers with an optional unit suffix that is
normalized to SI at parse time; every error carries the offending line
number.  ``serialize_config`` emits the normalized form, so
serialize(parse(text)) is a fixed point.
"""

import math
from dataclasses import dataclass, field

from ..params import (
    BoundaryParams,
    ConfigError,
    HeatSourceParams,
    MaterialParams,
    MeshParams,
    ProcessParams,
    SolverSettings,
)

__all__ = ["GeometrySpec", "parse_config", "serialize_config"]

# unit suffix -> (dimension, scale to SI)
_UNITS = {
    "m": ("length", 1.0),
    "mm": ("length", 1e-3),
    "um": ("length", 1e-6),
    "µm": ("length", 1e-6),
    "s": ("time", 1.0),
    "ms": ("time", 1e-3),
    "us": ("time", 1e-6),
    "µs": ("time", 1e-6),
    "K": ("temperature", 1.0),
    "W": ("power", 1.0),
    "m/s": ("speed", 1.0),
    "mm/s": ("speed", 1e-3),
}

# key -> (dimension, n_values); dimension None means raw SI number(s)
_SCHEMA = {
    "material": {
        "k_powder": (None, 1), "k_melt": (None, 1), "k_solid": (None, 1),
        "rho": (None, 1), "c": (None, 1),
        "T_solidus": ("temperature", 1), "T_liquidus": ("temperature", 1),
        "emissivity": (None, 1),
        "T_ambient": ("temperature", 1), "T_boiling": ("temperature", 1),
        "C_P": (None, 1), "C_T": ("temperature", 1), "C_M": (None, 1),
        "h_evap": (None, 1), "T_h0": ("temperature", 1),
    },
    "laser": {
        "power": ("power", 1), "radius": ("length", 1),
        "velocity": ("speed", 1),
    },
    "mesh": {
        "h_coarse": ("length", 1), "n_refine": (None, 1),
        "h_powder": ("length", 1), "cells_per_layer": (None, 1),
        "dirichlet_bottom": ("bool", 1),
        "geometry": ("word", 1),
        "chamber": ("length", 3), "plate_thickness": ("length", 1),
        "part_box": ("length", 6), "plate_box": ("length", 4),
    },
    "solver": {
        "newton_tol": (None, 1), "newton_abs_tol": (None, 1),
        "newton_max_iter": (None, 1),
        "krylov_tol": (None, 1), "krylov_max_iter": (None, 1),
        "preconditioner": ("word", 1),
        "explicit_cooldown_steps": (None, 1), "dt_implicit": ("time", 1),
        "safety_factor": (None, 1), "n_lanes": (None, 1),
        "threads": (None, 1), "deterministic": ("bool", 1),
    },
    "schedule": {
        "T_0": ("temperature", 1), "cool_time": ("time", 1),
        "hatch_spacing": ("length", 1),
    },
}

_REQUIRED = [("laser", "power"), ("laser", "radius"), ("laser", "velocity"),
             ("mesh", "geometry")]

# keys that may repeat (each occurrence appended)
_REPEATABLE = {("mesh", "part_box")}


@dataclass
class GeometrySpec:
    """Geometry block of the config, in meters, before voxelization."""

    mode: str                     # chamber | fitted
    chamber: tuple = None         # (x, y, build_height)
    plate_thickness: float = 0.0
    part_boxes: list = field(default_factory=list)   # (x0,y0,z0,x1,y1,z1)
    plate_box: tuple = None       # (x0, y0, x1, y1)

    def build(self, mesh):
        from ..mesh import PartGeometry
        if self.mode == "chamber":
            x, y, h = self.chamber
            return PartGeometry.chamber((x, y), h, self.plate_thickness, mesh)
        pb = self.plate_box + (self.plate_thickness,)
        return PartGeometry.fitted(self.part_boxes, pb, mesh)


def _fail(lineno, msg):
    raise ConfigError(f"line {lineno}: {msg}")


def _parse_value(raw, dim, count, lineno, key):
    toks = raw.split()
    if dim == "bool":
        if len(toks) != 1 or toks[0] not in ("true", "false"):
            _fail(lineno, f"{key} expects true or false")
        return toks[0] == "true"
    if dim == "word":
        if len(toks) != 1:
            _fail(lineno, f"{key} expects a single word")
        return toks[0]
    scale = 1.0
    if toks and toks[-1] in _UNITS:
        unit_dim, scale = _UNITS[toks[-1]]
        if dim is None or unit_dim != dim:
            _fail(lineno, f"{key} does not take the unit {toks[-1]!r}")
        toks = toks[:-1]
    if len(toks) != count:
        _fail(lineno, f"{key} expects {count} value(s), got {len(toks)}")
    try:
        # snap unit-scaled values back to their decimal literal so exact
        # relations like h_coarse = 2^n * h_powder survive the conversion
        vals = [float(t) if scale == 1.0 else float(f"{float(t) * scale:.12g}")
                for t in toks]
    except ValueError:
        _fail(lineno, f"cannot parse number in {key} = {raw!r}")
    if not all(math.isfinite(v) for v in vals):
        _fail(lineno, f"{key} must be finite")
    return vals[0] if count == 1 else tuple(vals)


def _lex(text):
    """text -> {section: {key: value-or-list}} with schema validation."""
    doc = {s: {} for s in _SCHEMA}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                _fail(lineno, "unterminated section header")
            section = body[1:-1].strip()
            if section not in _SCHEMA:
                _fail(lineno, f"unknown section [{section}]")
            continue
        if section is None:
            _fail(lineno, "key outside of any section")
        if "=" not in body:
            _fail(lineno, "expected key = value")
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in _SCHEMA[section]:
            _fail(lineno, f"unknown key {key!r} in [{section}]")
        dim, count = _SCHEMA[section][key]
        val = _parse_value(raw, dim, count, lineno, key)
        if (section, key) in _REPEATABLE:
            doc[section].setdefault(key, []).append(val)
        elif key in doc[section]:
            _fail(lineno, f"duplicate key {key!r} in [{section}]")
        else:
            doc[section][key] = val
    for sec, key in _REQUIRED:
        if key not in doc[sec]:
            raise ConfigError(f"missing required key {key!r} in [{sec}]")
    return doc


def _build_geometry_spec(m):
    mode = m["geometry"]
    if mode == "chamber":
        for k in ("chamber", "plate_thickness"):
            if k not in m:
                raise ConfigError(f"chamber geometry requires {k!r} in [mesh]")
        return GeometrySpec("chamber", chamber=m["chamber"],
                            plate_thickness=m["plate_thickness"])
    if mode == "fitted":
        for k in ("part_box", "plate_box", "plate_thickness"):
            if k not in m:
                raise ConfigError(f"fitted geometry requires {k!r} in [mesh]")
        return GeometrySpec("fitted", part_boxes=m["part_box"],
                            plate_box=m["plate_box"],
                            plate_thickness=m["plate_thickness"])
    raise ConfigError(f"geometry must be chamber or fitted, got {mode!r}")


def parse_config(text):
    """Parse config text into (BuildPlan, MaterialParams, ProcessParams,
    SolverSettings).  The plan's scan path is empty; attach one from a
    scan-path file before running."""
    from ..driver import BuildPlan
    from ..physics import ScanPath

    doc = _lex(text)
    md = doc["material"]
    mat = MaterialParams(
        k_p=md.get("k_powder", 0.2), k_m=md.get("k_melt", 20.0),
        k_s=md.get("k_solid", 20.0), rho=md.get("rho", 7430.0),
        c=md.get("c", 965.0), T_s=md.get("T_solidus", 1500.0),
        T_l=md.get("T_liquidus", 1900.0))
    bnd = BoundaryParams(
        emissivity=md.get("emissivity", 0.7),
        T_inf=md.get("T_ambient", 303.0), T_v=md.get("T_boiling", 3000.0),
        C_P=md.get("C_P", 54e3), C_T=md.get("C_T", 50e3),
        C_M=md.get("C_M", 1e-3), h_v=md.get("h_evap", 6.0e6),
        T_h0=md.get("T_h0", 663.0))
    me = doc["mesh"]
    mesh = MeshParams(
        h_coarse=me.get("h_coarse", 0.64e-3),
        n_refine=int(me.get("n_refine", 4)),
        h_powder=me.get("h_powder", 40e-6),
        cells_per_layer=int(me.get("cells_per_layer", 1)),
        dirichlet_bottom=me.get("dirichlet_bottom", True))
    la = doc["laser"]
    laser = HeatSourceParams(radius=la["radius"], h_powder=mesh.h_powder,
                             power=la["power"], scan_velocity=la["velocity"])
    so = doc["solver"]
    settings = SolverSettings(
        newton_tol=so.get("newton_tol", 1e-8),
        newton_abs_tol=so.get("newton_abs_tol", 1e-14),
        newton_max_iter=int(so.get("newton_max_iter", 25)),
        krylov_tol=so.get("krylov_tol", 1e-10),
        krylov_max_iter=int(so.get("krylov_max_iter", 2000)),
        preconditioner=so.get("preconditioner", "diagonal"),
        explicit_cooldown_steps=int(so.get("explicit_cooldown_steps", 1000)),
        dt_implicit=so.get("dt_implicit", 2e-2),
        safety_factor=so.get("safety_factor", 0.4),
        n_lanes=int(so.get("n_lanes", 8)),
        threads=int(so.get("threads", 1)),
        deterministic=so.get("deterministic", True))
    sc = doc["schedule"]
    params = ProcessParams(mat, bnd, laser, mesh, T_0=sc.get("T_0", 303.0))
    params.validate()
    settings.validate()
    gs = _build_geometry_spec(me)
    geometry = gs.build(mesh)
    plan = BuildPlan(params, geometry, ScanPath([]), settings,
                     geometry_spec=gs)
    if "cool_time" in sc:
        plan.t_cool = sc["cool_time"]
    if "hatch_spacing" in sc:
        plan.d_h = sc["hatch_spacing"]
    return plan, mat, params, settings


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)) or (isinstance(v, float) and v == int(v)
                                 and abs(v) < 1e15):
        return str(int(v))
    return repr(float(v))


def serialize_config(params, settings, geometry_spec, t_cool=None, d_h=None):
    """Normalized config text; all values explicit, SI, no unit suffixes."""
    mat, bnd, la, me = (params.material, params.boundary, params.laser,
                        params.mesh)
    lines = ["[material]"]
    for key, v in [("k_powder", mat.k_p), ("k_melt", mat.k_m),
                   ("k_solid", mat.k_s), ("rho", mat.rho), ("c", mat.c),
                   ("T_solidus", mat.T_s), ("T_liquidus", mat.T_l),
                   ("emissivity", bnd.emissivity), ("T_ambient", bnd.T_inf),
                   ("T_boiling", bnd.T_v), ("C_P", bnd.C_P),
                   ("C_T", bnd.C_T), ("C_M", bnd.C_M), ("h_evap", bnd.h_v),
                   ("T_h0", bnd.T_h0)]:
        lines.append(f"{key} = {_fmt(v)}")
    lines += ["", "[laser]",
              f"power = {_fmt(la.power)}",
              f"radius = {_fmt(la.radius)}",
              f"velocity = {_fmt(la.scan_velocity)}"]
    lines += ["", "[mesh]",
              f"h_coarse = {_fmt(me.h_coarse)}",
              f"n_refine = {me.n_refine}",
              f"h_powder = {_fmt(me.h_powder)}",
              f"cells_per_layer = {me.cells_per_layer}",
              f"dirichlet_bottom = {_fmt(me.dirichlet_bottom)}",
              f"geometry = {geometry_spec.mode}"]
    gs = geometry_spec
    if gs.mode == "chamber":
        lines.append("chamber = " + " ".join(_fmt(v) for v in gs.chamber))
    else:
        for b in gs.part_boxes:
            lines.append("part_box = " + " ".join(_fmt(v) for v in b))
        lines.append("plate_box = " + " ".join(_fmt(v) for v in gs.plate_box))
    lines.append(f"plate_thickness = {_fmt(gs.plate_thickness)}")
    lines += ["", "[solver]"]
    for key, v in [("newton_tol", settings.newton_tol),
                   ("newton_abs_tol", settings.newton_abs_tol),
                   ("newton_max_iter", settings.newton_max_iter),
                   ("krylov_tol", settings.krylov_tol),
                   ("krylov_max_iter", settings.krylov_max_iter),
                   ("preconditioner", settings.preconditioner),
                   ("explicit_cooldown_steps", settings.explicit_cooldown_steps),
                   ("dt_implicit", settings.dt_implicit),
                   ("safety_factor", settings.safety_factor),
                   ("n_lanes", settings.n_lanes),
                   ("threads", settings.threads),
                   ("deterministic", settings.deterministic)]:
        lines.append(f"{key} = {v if isinstance(v, str) else _fmt(v)}")
    lines += ["", "[schedule]", f"T_0 = {_fmt(params.T_0)}"]
    if t_cool is not None:
        lines.append(f"cool_time = {_fmt(t_cool)}")
    if d_h is not None:
        lines.append(f"hatch_spacing = {_fmt(d_h)}")
    return "\n".join(lines) + "\n"
