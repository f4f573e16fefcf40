"""The temperature- and history-dependent material law, by hand.

Prints the liquid fraction, the three phase fractions and the blended
conductivity along a heating/cooling excursion, showing the hysteresis:
powder that has been molten once keeps solid conductivity on the way
back down.  Then tabulates the two nonlinear face losses (radiation,
evaporation) and closes with a quadrature check that the moving
volumetric source deposits exactly the beam power.
"""

import numpy as np

from scantherm import (
    BeamState,
    BoundaryParams,
    HeatSourceParams,
    MaterialParams,
    MeshParams,
    NodalField,
    PartGeometry,
    ProcessParams,
    SolverSettings,
    ThermalOperator,
    advance_layer,
    apply_update,
    build_coarse_grid,
    build_dofmap,
    initial_history,
)
from scantherm.material import (
    conductivity,
    liquid_fraction,
    phase_fractions,
    update_consolidated,
)
from scantherm.physics import evaporation_flux, radiation_flux

mat = MaterialParams()
bnd = BoundaryParams()

# -- one excursion: heat powder through the mushy band, cool it back
print("heating fresh powder, then cooling the melt:")
print(f"{'T [K]':>7} {'g':>6} {'r_p':>6} {'r_m':>6} {'r_s':>6} "
      f"{'k [W/m/K]':>10}")
path = [400.0, 1500.0, 1700.0, 1900.0, 2400.0, 1900.0, 1700.0, 400.0]
r_c = np.zeros(1)
for T in path:
    t = np.array([T])
    r_c = update_consolidated(r_c, t, mat)
    g = liquid_fraction(t, mat)
    r_p, r_m, r_s = phase_fractions(t, r_c, mat)
    k = conductivity(t, r_c, mat)
    print(f"{T:7.0f} {g[0]:6.3f} {r_p[0]:6.3f} {r_m[0]:6.3f} "
          f"{r_s[0]:6.3f} {k[0]:10.3f}")
print("(same temperatures, different conductivity after consolidation)\n")

# -- face losses: radiation grows quartically, evaporation switches on
#    at boiling and saturates at the clamp temperature
print(f"{'T [K]':>7} {'radiation [W/m^2]':>18} {'evaporation [W/m^2]':>20}")
for T in (303.0, 1000.0, 2000.0, 3000.0, 3200.0, 3500.0, 4000.0, 4500.0):
    t = np.array([T])
    q_r = radiation_flux(t, bnd)
    q_e = evaporation_flux(t, bnd, mat.c)
    print(f"{T:7.0f} {q_r[0]:18.4e} {q_e[0]:20.4e}")
print(f"(evaporation is zero through T_v = {bnd.T_v:.0f} K and is "
      f"evaluated at min(T, {bnd.T_max:.0f} K) above)\n")

# -- the source integrates to the beam power on a wide-enough mesh
mesh = MeshParams(h_coarse=40e-6, n_refine=0, h_powder=40e-6)
geo = PartGeometry.chamber((0.8e-3, 0.8e-3), 40e-6, 0.12e-3, mesh)
laser = HeatSourceParams(radius=50e-6, h_powder=40e-6, power=100.0,
                         scan_velocity=1.0)
params = ProcessParams(mat, bnd, laser, mesh)
forest = build_coarse_grid(geo, mesh)
history = initial_history(forest)
T = np.full(build_dofmap(forest).n_vertices, params.T_0)
plan = advance_layer(forest, history)
forest, fields, history = apply_update(forest, plan,
                                       [NodalField(T, forest.epoch)], history)
T = fields[0].values
dofmap = build_dofmap(forest)
op = ThermalOperator(forest, dofmap, params, SolverSettings())
beam = BeamState(np.array([0.4e-3, 0.4e-3]), 40e-6, laser.power, True)
f = op.evaluate_rhs(T, history.r_c, beam, diffusion=False, faces=False)
print(f"volumetric source quadrature: {f.sum():.3f} W "
      f"against a {laser.power:.0f} W beam")
