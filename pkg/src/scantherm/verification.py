"""Independent reference implementations for cross-checking the solver.

Everything here is deliberately written the slow, obvious way: dense
matrices, python loops over elements and quadrature points, scalar
branching material laws.  None of the sum-factorized kernels are reused,
so agreement is meaningful.  Dense assembly refuses to run past
MAX_DENSE_DOFS vertices.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import interface_faces
from .physics import volumetric_source, radiation_flux, evaporation_flux

MAX_DENSE_DOFS = 2000

_GP = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))


def _shape_1d(i, x):
    return (1.0 + x) / 2.0 if i else (1.0 - x) / 2.0


def _dshape_1d(i):
    return 0.5 if i else -0.5


def _shape(c, x, y, z):
    ix, iy, iz = (c >> 2) & 1, (c >> 1) & 1, c & 1
    return _shape_1d(ix, x) * _shape_1d(iy, y) * _shape_1d(iz, z)


def _grad(c, x, y, z):
    ix, iy, iz = (c >> 2) & 1, (c >> 1) & 1, c & 1
    return np.array([
        _dshape_1d(ix) * _shape_1d(iy, y) * _shape_1d(iz, z),
        _shape_1d(ix, x) * _dshape_1d(iy) * _shape_1d(iz, z),
        _shape_1d(ix, x) * _shape_1d(iy, y) * _dshape_1d(iz),
    ])


def scalar_material_reference(T, r_c, p):
    """Material law evaluated one scalar at a time with literal branches.

    Returns (g, k, dkdT) for a single temperature and history value; the
    lane-wise masked-selection kernels must reproduce these bit for bit.
    """
    if T < p.T_s:
        g = 0.0
    elif T > p.T_l:
        g = 1.0
    else:
        g = (T - p.T_s) / (p.T_l - p.T_s)
    r_p = 1.0 - r_c
    r_m = g
    r_s = r_c - g
    if r_s < 0.0:
        r_s = 0.0
    k = (r_p * p.k_p + r_m * p.k_m) + r_s * p.k_s
    if p.T_s < T < p.T_l:
        dkdT = (p.k_m - p.k_s) / (p.T_l - p.T_s)
    else:
        dkdT = 0.0
    return g, k, dkdT


def constraint_matrix(dofmap):
    """Dense distribution matrix P: identity on free vertices, master
    weights on hanging rows."""
    nv = dofmap.n_vertices
    P = np.zeros((nv, nv))
    free = ~dofmap.is_slave
    P[free, free] = 1.0
    for i, s in enumerate(dofmap.slaves):
        sl = slice(dofmap.slave_ptr[i], dofmap.slave_ptr[i + 1])
        P[s, dofmap.slave_masters[sl]] = dofmap.slave_weights[sl]
    return P


def _guard(dofmap):
    if dofmap.n_vertices > MAX_DENSE_DOFS:
        raise ValueError(
            f"dense reference limited to {MAX_DENSE_DOFS} vertices, "
            f"got {dofmap.n_vertices}")


@dataclass
class DenseSystem:
    """Raw (unconstrained) dense matrices and load vectors plus the
    constraint matrix, for comparing against the matrix-free kernels."""

    P: np.ndarray
    C: np.ndarray          # consistent capacity
    D: np.ndarray          # conductivity-weighted stiffness at T_lin
    L: np.ndarray          # conductivity-derivative coupling at T_lin
    f_faces: np.ndarray
    f_source: np.ndarray
    is_slave: np.ndarray
    is_dirichlet: np.ndarray

    def rhs(self, T):
        """f_diff + f_re + f_vol folded onto the unknowns; f_diff = -D T
        with D assembled at the same T."""
        f = -self.D @ T + self.f_faces + self.f_source
        out = self.P.T @ f
        out[self.is_slave] = 0.0
        return out

    def lumped(self):
        """Condensed row sums of C; 1 on hanging slots."""
        out = self.P.T @ (self.C @ np.ones(len(self.C)))
        out[self.is_slave] = 1.0
        return out

    def apply_mass(self, v):
        out = self.P.T @ (self.C @ v)
        out[self.is_slave] = 0.0
        return out

    def apply_jacobian(self, v, dt):
        """Replicates the matrix-free operator's conventions: close the
        constraints, zero Dirichlet input, fold back, identity rows."""
        vd = self.P @ v
        vd[self.is_dirichlet] = 0.0
        raw = self.C @ vd / dt + self.D @ vd + self.L @ vd
        out = self.P.T @ raw
        out[self.is_dirichlet] = v[self.is_dirichlet]
        out[self.is_slave] = 0.0
        return out

    def jacobian_matrix(self, dt):
        """Condensed Jacobian as an explicit matrix with identity rows on
        hanging and Dirichlet vertices."""
        A = self.P.T @ (self.C / dt + self.D + self.L) @ self.P
        for i in np.flatnonzero(self.is_slave | self.is_dirichlet):
            A[i, :] = 0.0
            A[:, i] = 0.0
            A[i, i] = 1.0
        return A


def dense_assemble(forest, dofmap, params, T, r_c_qp, beam=None):
    """Assemble every dense reference object at the linearization state.

    T is a closed nodal field; r_c_qp the per-cell quadrature history in
    the canonical cell order.
    """
    _guard(dofmap)
    nv = dofmap.n_vertices
    mat = params.material
    rc = mat.rho * mat.c

    C = np.zeros((nv, nv))
    D = np.zeros((nv, nv))
    L = np.zeros((nv, nv))
    f_source = np.zeros(nv)

    for e, row in enumerate(dofmap.active_rows):
        h = float(forest.size_m(np.array([row]))[0])
        a = forest.anchor[row] * forest.h_fine
        det = (h / 2.0) ** 3
        gs = 2.0 / h
        gl = dofmap.cell_verts[e]
        for qi, qx in enumerate(_GP):
            for qj, qy in enumerate(_GP):
                for qk, qz in enumerate(_GP):
                    # temperature and gradient at the qp from nodal values
                    Tq = 0.0
                    gq = np.zeros(3)
                    for c in range(8):
                        Tq += _shape(c, qx, qy, qz) * T[gl[c]]
                        gq += _grad(c, qx, qy, qz) * gs * T[gl[c]]
                    _, kq, dkq = scalar_material_reference(
                        Tq, float(r_c_qp[e, qi, qj, qk]), mat)
                    pos = a + (np.array([qx, qy, qz]) + 1.0) / 2.0 * h
                    if beam is not None and beam.active and beam.power > 0.0:
                        qv = float(volumetric_source(pos, beam, params.laser))
                    else:
                        qv = 0.0
                    for ci in range(8):
                        phi_i = _shape(ci, qx, qy, qz)
                        gi = _grad(ci, qx, qy, qz) * gs
                        f_source[gl[ci]] += det * phi_i * qv
                        for cj in range(8):
                            phi_j = _shape(cj, qx, qy, qz)
                            gj = _grad(cj, qx, qy, qz) * gs
                            C[gl[ci], gl[cj]] += det * rc * phi_i * phi_j
                            D[gl[ci], gl[cj]] += det * kq * np.dot(gi, gj)
                            L[gl[ci], gl[cj]] += det * dkq * phi_j * np.dot(gi, gq)

    f_faces = np.zeros(nv)
    fs = interface_faces(forest)
    pos_of = {int(r): i for i, r in enumerate(dofmap.active_rows)}
    bp = params.boundary
    for i in range(len(fs)):
        e = pos_of[int(fs.cell_rows[i])]
        s = float(forest.size(fs.cell_rows[i]))
        fsz = float(fs.fsize[i])
        ox, oy = fs.offset[i] / s
        da = (fsz * forest.h_fine / 2.0) ** 2
        gl = dofmap.cell_verts[e]
        top = [[gl[1], gl[3]], [gl[5], gl[7]]]  # (ix, iy) corners at z top
        for qx in _GP:
            for qy in _GP:
                ux = ox + (qx + 1.0) / 2.0 * fsz / s
                uy = oy + (qy + 1.0) / 2.0 * fsz / s
                Tq = 0.0
                for ix in range(2):
                    for iy in range(2):
                        w = (ux if ix else 1.0 - ux) * (uy if iy else 1.0 - uy)
                        Tq += w * T[top[ix][iy]]
                q = float(radiation_flux(np.array(Tq), bp)
                          + evaporation_flux(np.array(Tq), bp, mat.c))
                for ix in range(2):
                    for iy in range(2):
                        w = (ux if ix else 1.0 - ux) * (uy if iy else 1.0 - uy)
                        f_faces[top[ix][iy]] -= da * w * q

    return DenseSystem(constraint_matrix(dofmap), C, D, L, f_faces, f_source,
                       dofmap.is_slave.copy(), dofmap.is_dirichlet.copy())


def connectivity_check(forest, rows=None):
    """Face-adjacency component count of a leaf subset (default: all
    active cells).

    Edge or corner contact does not connect.  Powder is deposited on the
    consolidated body, so an active region with more than one component
    indicates a geometry or meshing error; on a thresholded
    consolidation set, extra components flag lack of fusion.
    """
    rows = forest.active_cells() if rows is None else np.asarray(rows)
    if len(rows) == 0:
        return 0
    in_set = np.zeros(forest.n_cells, dtype=bool)
    in_set[rows] = True
    parent = {int(r): int(r) for r in rows}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    for r in rows:
        r = int(r)
        s = int(forest.size(r))
        a = forest.anchor[r]
        for ax in range(3):
            # positive neighbors: same size, parent size, or 4 children
            probe = a.copy()
            probe[ax] += s
            same = forest.lookup(int(forest.level[r]), probe[None, :])[0]
            if same >= 0:
                if in_set[same]:
                    union(r, int(same))
                continue
            if forest.level[r] > 0:
                ps = 2 * s
                pa = (probe // ps) * ps
                pa[ax] = probe[ax]
                par = forest.lookup(int(forest.level[r]) - 1, pa[None, :])[0]
                if par >= 0 and probe[ax] % ps == 0:
                    if in_set[par]:
                        union(r, int(par))
                    continue
            if forest.level[r] < forest.depth:
                hs = s // 2
                for u in range(2):
                    for v in range(2):
                        ca = probe.copy()
                        ca[(ax + 1) % 3] += u * hs
                        ca[(ax + 2) % 3] += v * hs
                        ch = forest.lookup(int(forest.level[r]) + 1, ca[None, :])[0]
                        if ch >= 0 and in_set[ch]:
                            union(r, int(ch))
    roots = {find(int(r)) for r in rows}
    return len(roots)


def oracle_fixture(power=100.0):
    """A compact single-layer state with hanging nodes, a live beam and
    every material regime present: the standing target for the dense
    cross-checks."""
    from .mesh import (NodalField, PartGeometry, advance_layer, apply_update,
                       build_coarse_grid, build_dofmap, initial_history)
    from .operators import ThermalOperator
    from .params import (BoundaryParams, HeatSourceParams, MaterialParams,
                         MeshParams, ProcessParams, SolverSettings)
    from .physics import BeamState

    mesh = MeshParams(h_coarse=0.16e-3, n_refine=2, h_powder=40e-6)
    geo = PartGeometry.chamber((0.64e-3, 0.64e-3), 0.16e-3, 0.16e-3, mesh)
    params = ProcessParams(
        MaterialParams(), BoundaryParams(),
        HeatSourceParams(radius=60e-6, h_powder=40e-6, power=power), mesh)
    forest = build_coarse_grid(geo, mesh)
    history = initial_history(forest)
    dofmap = build_dofmap(forest)
    T0 = np.full(dofmap.n_vertices, params.T_0)
    upd = advance_layer(forest, history)
    forest, fields, history = apply_update(
        forest, upd, [NodalField(T0, forest.epoch)], history)
    dofmap = build_dofmap(forest)
    op = ThermalOperator(forest, dofmap, params, SolverSettings(n_lanes=4))

    # hot spot spanning powder, mushy zone, melt and beyond boiling
    xyz = dofmap.vertices_m()
    r2 = (xyz[:, 0] - 0.32e-3) ** 2 + (xyz[:, 1] - 0.32e-3) ** 2
    depth = np.exp((xyz[:, 2] - 4e-5) / 1.2e-4)
    T = 303.0 + 3400.0 * np.exp(-r2 / (2 * (0.11e-3) ** 2)) * depth
    T[dofmap.is_dirichlet] = params.boundary.T_inf
    op.update_history(history, T)
    beam = BeamState(np.array([0.32e-3, 0.32e-3]), 4e-5, power, True)
    return forest, dofmap, op, params, T, history, beam


def oracle_report(dt=1e-4, seed=0):
    """Relative max errors of every matrix-free kernel against the dense
    assembly on the standing fixture."""
    forest, dofmap, op, params, T, history, beam = oracle_fixture()
    ds = dense_assemble(forest, dofmap, params, T, history.r_c, beam)
    rng = np.random.default_rng(seed)

    def rel(got, ref):
        scale = float(np.max(np.abs(ref)))
        return float(np.max(np.abs(got - ref))) / max(scale, 1e-300)

    out = {}
    out["rhs"] = rel(op.evaluate_rhs(T, history.r_c, beam), ds.rhs(T))
    out["lumped_capacity"] = rel(op.lumped_capacity(), ds.lumped())
    v = rng.standard_normal(dofmap.n_vertices)
    v[dofmap.is_slave] = 0.0
    out["mass_apply"] = rel(op.apply_mass(v), ds.apply_mass(v))
    out["jacobian_apply"] = rel(op.apply_jacobian(v, T, history.r_c, dt),
                                ds.apply_jacobian(v, dt))
    out["jacobian_diagonal"] = rel(op.jacobian_diagonal(T, history.r_c, dt),
                                   np.diag(ds.jacobian_matrix(dt)))
    return out
