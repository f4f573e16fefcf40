"""The two text formats a build job is described by.

A run is a config (sections of key = value with optional unit
suffixes) plus a scan path (one directive per line).  This script
parses both from literals, shows that serialization is a fixed point
of parsing, expands a hatch directive into tracks, and derives the
step criteria for the configured job -- the same thing
`scantherm check-dt job.cfg` prints.

The equivalent shell session is:

    scantherm run job.cfg path.scan --output-dir out/
    scantherm check-dt job.cfg
    scantherm bench job.cfg --steps 20
    scantherm oracle
"""

from scantherm import ThermalOperator, compute_step_criteria
from scantherm.driver import initialize_state
from scantherm.io import (
    parse_config,
    parse_scanpath,
    serialize_config,
    serialize_scanpath,
)

CFG = """\
# one-layer coupon on a small plate
[material]
rho = 7430
c = 965
k_powder = 0.2
k_melt = 20
k_solid = 20
T_solidus = 1500
T_liquidus = 1900
emissivity = 0.7

[laser]
power = 100 W
velocity = 1000 mm/s
radius = 50 um

[mesh]
chamber = 1.28 0.32 mm
height = 0.08 mm
plate_thickness = 0.2 mm
h_powder = 40 um
n_refine = 1

[solver]
n_lanes = 8
explicit_cooldown_steps = 100
dt_implicit = 2 ms

[schedule]
t_cool = 5 ms
hatch_spacing = 80 um
"""

PATH = """\
layer 0 z = 40 um
track 0.14e-3 0.10e-3 1.14e-3 0.10e-3 v = 1.0 P = 100
track 1.14e-3 0.18e-3 0.14e-3 0.18e-3 v = 1.0 P = 100
cool 5e-3

layer 1 z = 80 um
hatch box 0.14e-3 0.08e-3 1.14e-3 0.24e-3 dh = 80e-6 dir = x v = 1.0 P = 100
cool 5e-3
"""

plan, mat, params, settings = parse_config(CFG)
print(f"parsed config: {params.mesh.h_coarse * 1e6:.0f} um base cells "
      f"refined {params.mesh.n_refine}x, beam {params.laser.power:.0f} W "
      f"at {params.laser.scan_velocity:.1f} m/s")

path = parse_scanpath(PATH)
plan.path = path
plan.validate()
n_segs = [len(lp.segments) for lp in path.layers]
print(f"scan path: layers {[lp.layer_index for lp in path.layers]}, "
      f"{n_segs} tracks after hatch expansion, "
      f"{path.total_duration() * 1e3:.2f} ms on the clock")

# serialization is a fixed point: parse(serialize(x)) == parse-input
cfg2 = serialize_config(params, settings, plan.geometry_spec,
                        t_cool=plan.t_cool, d_h=plan.d_h)
plan2, mat2, params2, settings2 = parse_config(cfg2)
assert (mat2, params2.laser, params2.mesh) == (mat, params.laser,
                                               params.mesh)
assert parse_scanpath(serialize_scanpath(path)).total_duration() \
    == path.total_duration()
print("round trip: serialize -> parse reproduces every parameter\n")

# what `scantherm check-dt` reports for this job
state = initialize_state(plan)
crit = compute_step_criteria(state.op, settings)
print(f"dt_stability = {crit.dt_stability:.6e} s")
print(f"dt_accuracy  = {crit.dt_accuracy:.6e} s")
print(f"dt_used      = {crit.dt_used:.6e} s "
      f"(safety {settings.safety_factor})")
