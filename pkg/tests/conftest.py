"""Shared mesh/state builders for the test suite.

Everything here builds small but structurally complete problems: active
powder layers on a plate, hanging nodes where a refinement level drops,
Dirichlet rows at the bottom.  Sizes are kept at a few hundred degrees
of freedom so the dense reference assembly stays cheap.
"""

import numpy as np
import pytest

from scantherm import (
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


def make_params(mesh, power=100.0, velocity=1.0, radius=50e-6,
                dirichlet=None):
    """ProcessParams around a given MeshParams, table defaults elsewhere."""
    if dirichlet is not None:
        mesh.dirichlet_bottom = dirichlet
    hs = HeatSourceParams(radius=radius, h_powder=mesh.h_powder,
                          power=power, scan_velocity=velocity)
    return ProcessParams(MaterialParams(), BoundaryParams(), hs, mesh)


def advance_layers(geometry, params, n, history_rc=None):
    """Build the coarse grid and activate n layers, returning
    (forest, dofmap, history, T).  history_rc, if given, is assigned to
    all quadrature points before each activation so coarsening paths
    also run."""
    forest = build_coarse_grid(geometry, params.mesh)
    history = initial_history(forest)
    dofmap = build_dofmap(forest)
    T = np.full(dofmap.n_vertices, params.T_0)
    for _ in range(n):
        if history_rc is not None:
            history.r_c[:] = history_rc
        plan = advance_layer(forest, history)
        forest, fields, history = apply_update(
            forest, plan, [NodalField(T, forest.epoch)], history,
            T_0=params.T_0)
        T = fields[0].values
        dofmap = build_dofmap(forest)
    return forest, dofmap, history, T


def plate_only_state(nx=16, ny=16, nz=8, h=40e-6, dirichlet=False,
                     settings=None):
    """Uniform fully consolidated plate (no powder activated): every
    active cell has r_c = 1, no hanging nodes.  The chamber needs at
    least one powder layer above, which stays inactive."""
    mesh = MeshParams(h_coarse=h, n_refine=0, h_powder=h,
                      dirichlet_bottom=dirichlet)
    geo = PartGeometry.chamber((nx * h, ny * h), h, nz * h, mesh)
    params = make_params(mesh)
    forest = build_coarse_grid(geo, mesh)
    history = initial_history(forest)
    dofmap = build_dofmap(forest)
    op = ThermalOperator(forest, dofmap, params,
                         settings or SolverSettings())
    return forest, dofmap, history, op, params


def oracle_cases():
    """Mesh fixtures for comparison against the dense assembly: uniform,
    one- and two-level refined, boundary-fitted with a gap, and a
    two-deposit stack where the first layer was coarsened behind the
    front.  Sizes stay at or below ~500 unconstrained dofs."""
    cases = []

    # uniform active layer on a plate, no constraints
    mesh = MeshParams(h_coarse=40e-6, n_refine=0, h_powder=40e-6)
    geo = PartGeometry.chamber((0.16e-3, 0.16e-3), 0.08e-3, 0.12e-3, mesh)
    params = make_params(mesh)
    f, dm, hist, _ = advance_layers(geo, params, 1)
    cases.append(("uniform", f, dm, hist, params))

    # one refinement level: fine powder cells over a coarse plate
    mesh = MeshParams(h_coarse=80e-6, n_refine=1, h_powder=40e-6)
    geo = PartGeometry.chamber((0.32e-3, 0.24e-3), 0.16e-3, 0.16e-3, mesh)
    params = make_params(mesh)
    f, dm, hist, _ = advance_layers(geo, params, 1)
    cases.append(("refine1", f, dm, hist, params))

    # two refinement levels (the verification fixture)
    from scantherm.verification import oracle_fixture
    f, dm, _, params, _, hist, _ = oracle_fixture()
    cases.append(("refine2", f, dm, hist, params))

    # boundary-fitted: two pads separated by a powder gap
    mesh = MeshParams(h_coarse=80e-6, n_refine=1, h_powder=40e-6)
    geo = PartGeometry.fitted(
        [(0.0, 0.0, 0.0, 0.16e-3, 0.16e-3, 0.08e-3),
         (0.32e-3, 0.0, 0.0, 0.48e-3, 0.16e-3, 0.08e-3)],
        (0.0, 0.0, 0.48e-3, 0.16e-3, 0.08e-3), mesh)
    params = make_params(mesh)
    f, dm, hist, _ = advance_layers(geo, params, 1)
    cases.append(("fitted", f, dm, hist, params))

    # second deposit with the first layer consolidated, so the update
    # coarsens behind the front and leaves level jumps mid-stack
    mesh = MeshParams(h_coarse=80e-6, n_refine=1, h_powder=40e-6)
    geo = PartGeometry.chamber((0.32e-3, 0.16e-3), 0.16e-3, 0.16e-3, mesh)
    params = make_params(mesh)
    f, dm, hist, _ = advance_layers(geo, params, 2, history_rc=1.0)
    cases.append(("stacked", f, dm, hist, params))
    return cases


def random_state(dofmap, history, rng, hot=True):
    """Random (T, r_c) pair covering powder, mushy, melt and boiling
    branches.  Constraints are closed so T is an admissible iterate."""
    lo, hi = (300.0, 3600.0) if hot else (300.0, 1400.0)
    T = rng.uniform(lo, hi, dofmap.n_vertices)
    dofmap.distribute(T)
    T[dofmap.is_dirichlet] = 303.0
    r_c = rng.uniform(0.0, 1.0, history.r_c.shape)
    return T, r_c


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(2024)
