"""Matrix-free finite element operators on the adaptive hex mesh.

Trilinear elements with 2x2x2 tensor Gauss quadrature; every kernel is a
short chain of sum-factorized einsum contractions over all active cells
at once.  Conditionals inside kernels are masked selections, so results
depend only on array contents, never on how the work was chunked.

Two accumulation modes mirror a threaded assembly design:

* deterministic: per-cell element vectors are written to disjoint slices
  and scattered once, in canonical cell order, by a single bincount; the
  result is bitwise identical for any worker count or lane width.
* colored: batches of cells are greedily colored so that no two batches
  of a color share a vertex, then each color is scattered directly; the
  result may differ from the deterministic one in the last bits only.
"""

from dataclasses import dataclass

import numpy as np

from .material import (
    conductivity,
    conductivity_derivative,
    update_consolidated,
)
from .physics import volumetric_source, radiation_flux, evaporation_flux
from .mesh import interface_faces

_SQ3 = np.sqrt(3.0)
GAUSS_1D = np.array([-1.0 / _SQ3, 1.0 / _SQ3])
# V1[i, q] = value of 1D hat i at gauss point q; D1 its reference slope
V1 = np.array([[(1.0 - x) / 2.0 for x in GAUSS_1D],
               [(1.0 + x) / 2.0 for x in GAUSS_1D]])
D1 = np.array([[-0.5, -0.5],
               [0.5, 0.5]])


def close_constraints(dofmap, values):
    """Overwrite hanging-vertex entries with their master interpolation."""
    return dofmap.distribute(values)


def _interp(A, B, C, t):
    """Tensor contraction (A x B x C) t for (n, 2, 2, 2) cell tensors."""
    s = np.einsum("ia,nijk->najk", A, t)
    s = np.einsum("jb,najk->nabk", B, s)
    return np.einsum("kc,nabk->nabc", C, s)


def _project(A, B, C, t):
    """Transpose of _interp: accumulate qp values back onto nodes."""
    s = np.einsum("ia,nabc->nibc", A, t)
    s = np.einsum("jb,nibc->nijc", B, s)
    return np.einsum("kc,nijc->nijk", C, s)


def _reference_tensors():
    """3D shape values Phi[c, q] and reference gradients G[d, c, q] in the
    flattened corner/qp numbering c = ix*4 + iy*2 + iz."""
    Phi = np.einsum("ia,jb,kc->ijkabc", V1, V1, V1).reshape(8, 8)
    G = np.stack([
        np.einsum("ia,jb,kc->ijkabc", D1, V1, V1).reshape(8, 8),
        np.einsum("ia,jb,kc->ijkabc", V1, D1, V1).reshape(8, 8),
        np.einsum("ia,jb,kc->ijkabc", V1, V1, D1).reshape(8, 8),
    ])
    return Phi, G


PHI_REF, GRAD_REF = _reference_tensors()


@dataclass
class _FaceData:
    """Precomputed facet quadrature for the radiating top surface."""

    cell_pos: np.ndarray   # (nf,) index into the active cell list
    verts: np.ndarray      # (nf, 2, 2) global ids of the top face corners
    Vx: np.ndarray         # (nf, 2, 2) 1D shape values on the facet, x
    Vy: np.ndarray
    area_qp: np.ndarray    # (nf,) physical area per quadrature point


class ThermalOperator:
    """All finite element kernels for one mesh epoch.

    Holds gather indices, per-cell geometry factors and facet quadrature
    for the current leaf set; rebuild after every mesh update.
    """

    def __init__(self, forest, dofmap, params, settings):
        if dofmap.h_fine != forest.h_fine:
            raise ValueError("dofmap does not belong to this forest")
        self.forest = forest
        self.dofmap = dofmap
        self.params = params
        self.settings = settings
        self.epoch = forest.epoch

        rows = dofmap.active_rows
        self.n_cells = len(rows)
        self.verts8 = dofmap.cell_verts.astype(np.int64)
        self.h_m = forest.size_m(rows)
        self.anchor_m = forest.anchor[rows] * forest.h_fine
        self.det_w = (self.h_m / 2.0) ** 3          # detJ, unit weights
        self.gscale = 2.0 / self.h_m                # reference -> physical grad
        self.qp_1d = (self.anchor_m[:, :, None]
                      + (GAUSS_1D[None, None, :] + 1.0) / 2.0
                      * self.h_m[:, None, None])    # (n, 3, 2) qp coordinates

        self._faces = self._build_faces()
        self._colors = None
        self._cinv = None
        self._fold = None

    # -- construction helpers ------------------------------------------------

    def _build_faces(self):
        fs = interface_faces(self.forest)
        pos = {int(r): i for i, r in enumerate(self.dofmap.active_rows)}
        cell_pos = np.array([pos[int(r)] for r in fs.cell_rows], dtype=np.int64)
        # top face corners in (ix, iy) layout: flat corner index ix*4+iy*2+1
        corner = np.array([[1, 3], [5, 7]])
        verts = (self.verts8[cell_pos][:, corner] if len(cell_pos)
                 else np.zeros((0, 2, 2), dtype=np.int64))
        size = self.forest.size(fs.cell_rows).astype(np.float64)
        r0 = fs.offset / size[:, None]              # in-face anchor, 0 or 1/2
        rr = fs.fsize / size                        # facet fraction, 1 or 1/2
        u = (r0[:, :, None]
             + (GAUSS_1D[None, None, :] + 1.0) / 2.0 * rr[:, None, None])
        Vx = np.stack([1.0 - u[:, 0], u[:, 0]], axis=1)   # (nf, 2, 2)
        Vy = np.stack([1.0 - u[:, 1], u[:, 1]], axis=1)
        fs_m = fs.fsize * self.forest.h_fine
        return _FaceData(cell_pos, verts, Vx, Vy, (fs_m / 2.0) ** 2)

    def _batch_colors(self):
        """Greedy conflict-free coloring of fixed-width cell batches."""
        if self._colors is not None:
            return self._colors
        L = self.settings.n_lanes
        nv = self.dofmap.n_vertices
        colors = []          # list of (claimed vertex mask, [batch slices])
        for start in range(0, self.n_cells, L):
            sl = slice(start, min(start + L, self.n_cells))
            mine = np.unique(self.verts8[sl])
            for claimed, members in colors:
                if not claimed[mine].any():
                    claimed[mine] = True
                    members.append(sl)
                    break
            else:
                claimed = np.zeros(nv, dtype=bool)
                claimed[mine] = True
                colors.append((claimed, [sl]))
        self._colors = [members for _, members in colors]
        return self._colors

    def _fold_tables(self):
        """Index tables that fold element matrices of constrained cells
        into the diagonal of the condensed system.

        For a cell touching hanging vertices the condensed diagonal picks
        up every pair (a, b) of corners whose constraint expansions share
        a master m, weighted by the product of the two weights.
        """
        if self._fold is not None:
            return self._fold
        dm = self.dofmap
        touched = np.flatnonzero(dm.is_slave[self.verts8].any(axis=1))
        expand = {}
        for i, s in enumerate(dm.slaves):
            sl = slice(dm.slave_ptr[i], dm.slave_ptr[i + 1])
            expand[int(s)] = (dm.slave_masters[sl], dm.slave_weights[sl])
        te, ta, tb, tm, tw = [], [], [], [], []
        for t, n in enumerate(touched):
            cols = []
            for a in range(8):
                g = int(self.verts8[n, a])
                cols.append(expand.get(g, (np.array([g]), np.array([1.0]))))
            for a in range(8):
                ma, wa = cols[a]
                for b in range(8):
                    mb, wb = cols[b]
                    common, ia, ib = np.intersect1d(ma, mb, return_indices=True)
                    for c, i, j in zip(common, ia, ib):
                        te.append(t)
                        ta.append(a)
                        tb.append(b)
                        tm.append(int(c))
                        tw.append(wa[i] * wb[j])
        self._fold = (touched,
                      np.array(te, dtype=np.int64), np.array(ta, dtype=np.int64),
                      np.array(tb, dtype=np.int64), np.array(tm, dtype=np.int64),
                      np.array(tw))
        return self._fold

    # -- basic field plumbing --------------------------------------------------

    def check_epoch(self, field):
        if getattr(field, "epoch", self.epoch) != self.epoch:
            raise ValueError("field epoch does not match operator epoch")

    def gather(self, values):
        """Nodal values per cell as (n, 2, 2, 2) corner tensors."""
        return values[self.verts8].reshape(self.n_cells, 2, 2, 2)

    def qp_temperatures(self, T):
        """Temperature at every quadrature point, (n, 2, 2, 2)."""
        return _interp(V1, V1, V1, self.gather(T))

    def qp_gradients(self, T):
        """Physical temperature gradient at every qp, (n, 3, 2, 2, 2)."""
        tn = self.gather(T)
        g = np.stack([_interp(D1, V1, V1, tn),
                      _interp(V1, D1, V1, tn),
                      _interp(V1, V1, D1, tn)], axis=1)
        return g * self.gscale[:, None, None, None, None]

    def update_history(self, history, T):
        """Advance the irreversible consolidation state from the current
        temperature field (in place)."""
        self.check_epoch(history)
        history.r_c[:] = update_consolidated(
            history.r_c, self.qp_temperatures(T), self.params.material)
        return history

    # -- scatter ----------------------------------------------------------------

    def scatter(self, elem, deterministic=None):
        """Accumulate per-cell element vectors (n, 8) into a global vector
        and fold hanging-vertex rows into their masters."""
        if deterministic is None:
            deterministic = self.settings.deterministic
        nv = self.dofmap.n_vertices
        if deterministic:
            out = np.bincount(self.verts8.ravel(), weights=elem.ravel(),
                              minlength=nv)
        else:
            out = np.zeros(nv)
            for members in self._batch_colors():
                for sl in members:
                    np.add.at(out, self.verts8[sl].ravel(), elem[sl].ravel())
        return self.dofmap.condense(out)

    # -- right hand side ----------------------------------------------------------

    def element_rhs(self, T, r_c, beam=None, diffusion=True, faces=True,
                    source=True, frozen_k=None):
        """Per-cell element vectors of the semi-discrete right hand side
        f(T) = f_diff + f_re + f_vol, shape (n, 8)."""
        elem = np.zeros((self.n_cells, 2, 2, 2))
        mat = self.params.material

        if diffusion:
            if frozen_k is None:
                tq = self.qp_temperatures(T)
                k = conductivity(tq, r_c, mat)
            else:
                k = np.full((self.n_cells, 2, 2, 2), float(frozen_k))
            tn = self.gather(T)
            # detJ times two physical gradient factors folds to h/2
            c = (self.h_m / 2.0)[:, None, None, None] * k
            elem -= _project(D1, V1, V1, c * _interp(D1, V1, V1, tn))
            elem -= _project(V1, D1, V1, c * _interp(V1, D1, V1, tn))
            elem -= _project(V1, V1, D1, c * _interp(V1, V1, D1, tn))

        if faces and len(self._faces.cell_pos):
            self._face_rhs(T, elem)

        if source and beam is not None and beam.active and beam.power > 0.0:
            self._source_rhs(beam, elem)

        return elem.reshape(self.n_cells, 8)

    def _face_rhs(self, T, elem):
        fd = self._faces
        bp = self.params.boundary
        tf = T[fd.verts]                                  # (nf, 2, 2)
        s = np.einsum("fia,fij->faj", fd.Vx, tf)
        tq = np.einsum("fjb,faj->fab", fd.Vy, s)
        q = radiation_flux(tq, bp) + evaporation_flux(tq, bp,
                                                      self.params.material.c)
        q *= -fd.area_qp[:, None, None]
        s = np.einsum("fia,fab->fib", fd.Vx, q)
        load = np.einsum("fjb,fib->fij", fd.Vy, s)        # (nf, 2, 2)
        # several quarter facets may load the same cell face
        flat = (fd.cell_pos[:, None] * 8
                + np.array([1, 3, 5, 7])[None, :])        # corners (ix,iy,1)
        np.add.at(elem.reshape(-1), flat.ravel(),
                  load.reshape(len(load), 4).ravel())

    def _source_rhs(self, beam, elem):
        hs = self.params.laser
        cut = hs.cutoff_radii * hs.radius
        # closest-point distance of the beam axis to each cell's xy box;
        # the skipped remainder integrates to under exp(-2 cutoff^2)
        dx = np.maximum.reduce([self.anchor_m[:, 0] - beam.position[0],
                                beam.position[0] - self.anchor_m[:, 0] - self.h_m,
                                np.zeros(self.n_cells)])
        dy = np.maximum.reduce([self.anchor_m[:, 1] - beam.position[1],
                                beam.position[1] - self.anchor_m[:, 1] - self.h_m,
                                np.zeros(self.n_cells)])
        zlo, zhi = beam.z_top - hs.h_powder, beam.z_top
        hit = ((dx * dx + dy * dy <= cut * cut)
               & (self.anchor_m[:, 2] <= zhi)
               & (self.anchor_m[:, 2] + self.h_m >= zlo))
        rows = np.flatnonzero(hit)
        if not rows.size:
            return
        qp = self.qp_1d[rows]                             # (m, 3, 2)
        pts = np.empty((len(rows), 2, 2, 2, 3))
        pts[..., 0] = qp[:, 0, :, None, None]
        pts[..., 1] = qp[:, 1, None, :, None]
        pts[..., 2] = qp[:, 2, None, None, :]
        qv = volumetric_source(pts, beam, hs) * self.det_w[rows, None, None, None]
        elem[rows] += _project(V1, V1, V1, qv)

    def evaluate_rhs(self, T, r_c, beam=None, **kw):
        """Global right hand side vector with hanging rows folded into
        their masters; Dirichlet rows are kept (callers pin or zero)."""
        return self.scatter(self.element_rhs(T, r_c, beam, **kw))

    # -- capacity --------------------------------------------------------------------

    def lumped_capacity(self):
        """Row sums of the consistent capacity matrix, condensed onto the
        unknowns; hanging slots get 1 so the inverse is always defined."""
        rc = self.params.material.rho * self.params.material.c
        ones = np.ones((self.n_cells, 2, 2, 2))
        qp = _interp(V1, V1, V1, ones) * (rc * self.det_w)[:, None, None, None]
        elem = _project(V1, V1, V1, qp).reshape(self.n_cells, 8)
        ctil = self.scatter(elem)
        ctil[self.dofmap.is_slave] = 1.0
        return ctil

    def capacity_inverse(self):
        if self._cinv is None:
            self._cinv = 1.0 / self.lumped_capacity()
        return self._cinv

    def apply_mass(self, v):
        """Consistent capacity product C v (condensed); v must already be
        closed over the constraints."""
        rc = self.params.material.rho * self.params.material.c
        qp = _interp(V1, V1, V1, self.gather(v))
        qp *= (rc * self.det_w)[:, None, None, None]
        elem = _project(V1, V1, V1, qp).reshape(self.n_cells, 8)
        return self.scatter(elem)

    # -- explicit step ---------------------------------------------------------------

    def explicit_fused_step(self, T, dt, r_c, beam=None, fused=True):
        """One forward Euler step with the lumped capacity.

        The fused form evaluates T + dt * (cinv * f) in a single pass over
        the update law; the unfused form materializes each intermediate.
        Both perform the identical sequence of roundings lane by lane.
        """
        f = self.evaluate_rhs(T, r_c, beam)
        cinv = self.capacity_inverse()
        if fused:
            out = T + dt * (cinv * f)
        else:
            rate = cinv * f
            incr = dt * rate
            out = T + incr
        self.dofmap.distribute(out)
        out[self.dofmap.is_dirichlet] = self.params.boundary.T_inf
        return out

    # -- Newton pieces -----------------------------------------------------------------

    def _tangent_fields(self, T_lin, r_c):
        tq = self.qp_temperatures(T_lin)
        mat = self.params.material
        return (conductivity(tq, r_c, mat),
                conductivity_derivative(tq, r_c, mat),
                self.qp_gradients(T_lin))

    def apply_jacobian(self, v, T_lin, r_c, dt, tangent=None):
        """Matrix-free product J v for J = C/dt + D(T_lin) + L(T_lin).

        D is the tangent diffusion with the conductivity frozen at the
        linearization temperature; L carries the conductivity derivative
        against the linearization gradient.  Hanging entries of v are
        closed before, folded after; Dirichlet rows act as identity.
        """
        k, dk, g = tangent if tangent is not None else \
            self._tangent_fields(T_lin, r_c)
        vd = v.copy()
        self.dofmap.distribute(vd)
        vd[self.dofmap.is_dirichlet] = 0.0
        vn = self.gather(vd)

        c = (self.h_m / 2.0)[:, None, None, None] * k
        elem = _project(D1, V1, V1, c * _interp(D1, V1, V1, vn))
        elem += _project(V1, D1, V1, c * _interp(V1, D1, V1, vn))
        elem += _project(V1, V1, D1, c * _interp(V1, V1, D1, vn))

        w = (self.det_w * self.gscale)[:, None, None, None] \
            * dk * _interp(V1, V1, V1, vn)
        elem += _project(D1, V1, V1, w * g[:, 0])
        elem += _project(V1, D1, V1, w * g[:, 1])
        elem += _project(V1, V1, D1, w * g[:, 2])

        out = self.scatter(elem.reshape(self.n_cells, 8))
        out += self.apply_mass(vd) / dt
        out[self.dofmap.is_dirichlet] = v[self.dofmap.is_dirichlet]
        out[self.dofmap.is_slave] = 0.0
        return out

    def _element_matrices(self, rows, k, dk, g, dt):
        """Dense 8x8 Jacobian element matrices for the given cells."""
        rc = self.params.material.rho * self.params.material.c
        kq = k.reshape(self.n_cells, 8)[rows]
        dkq = dk.reshape(self.n_cells, 8)[rows]
        gq = g.reshape(self.n_cells, 3, 8)[rows]
        Ae = (rc / dt) * self.det_w[rows, None, None] \
            * (PHI_REF @ PHI_REF.T)[None]
        Ae += (self.h_m[rows] / 2.0)[:, None, None] * np.einsum(
            "nq,dcq,deq->nce", kq, GRAD_REF, GRAD_REF)
        Ae += (self.det_w[rows] * self.gscale[rows])[:, None, None] * np.einsum(
            "nq,eq,dcq,ndq->nce", dkq, PHI_REF, GRAD_REF, gq)
        return Ae

    def jacobian_diagonal(self, T_lin, r_c, dt, tangent=None):
        """Exact diagonal of the condensed Jacobian, for preconditioning.

        Unconstrained cells contribute their plain element diagonal;
        cells touching hanging vertices go through the constraint fold.
        """
        k, dk, g = tangent if tangent is not None else \
            self._tangent_fields(T_lin, r_c)
        touched, te, ta, tb, tm, tw = self._fold_tables()
        plain = np.ones(self.n_cells, dtype=bool)
        plain[touched] = False

        rc = self.params.material.rho * self.params.material.c
        kq = k.reshape(self.n_cells, 8)
        dkq = dk.reshape(self.n_cells, 8)
        gq = g.reshape(self.n_cells, 3, 8)
        cdiag = (rc / dt) * np.outer(self.det_w,
                                     np.einsum("cq,cq->c", PHI_REF, PHI_REF))
        ddiag = (self.h_m / 2.0)[:, None] * np.einsum(
            "nq,dcq,dcq->nc", kq, GRAD_REF, GRAD_REF)
        ldiag = (self.det_w * self.gscale)[:, None] * np.einsum(
            "nq,cq,dcq,ndq->nc", dkq, PHI_REF, GRAD_REF, gq)
        ediag = cdiag + ddiag + ldiag

        diag = np.bincount(self.verts8[plain].ravel(),
                           weights=ediag[plain].ravel(),
                           minlength=self.dofmap.n_vertices)
        if touched.size:
            Ae = self._element_matrices(touched, k, dk, g, dt)
            np.add.at(diag, tm, tw * Ae[te, ta, tb])

        diag[self.dofmap.is_slave] = 1.0
        diag[self.dofmap.is_dirichlet] = 1.0
        return diag
