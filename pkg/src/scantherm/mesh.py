"""Growing adaptive voxel forest for layerwise builds.

Cells live on an integer lattice at the finest refinement level; a cell
at level ell has edge length ``2**(depth - ell)`` lattice units, and all
geometry is validated to be exactly representable on the coarse grid so
tiling arithmetic is integer-exact.  z = 0 is the top of the base plate;
the plate occupies negative z, layer k spans ``[k, k+1] * cells_per_layer``
lattice units.

The forest is stored struct-of-arrays (level, anchor, active, ...) in a
canonical sorted order, which both makes rebuilds cheap with numpy and
pins a deterministic cell ordering for all downstream kernels.
"""

from dataclasses import dataclass, field

import numpy as np

from .params import ConfigError

# packing of (x, y, z) lattice coordinates into one int64 key
_BITS = 21
_OFF = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1

# local corner order: flat index c = ix*4 + iy*2 + iz
CORNER_OFFSETS = np.array(
    [(ix, iy, iz) for ix in (0, 1) for iy in (0, 1) for iz in (0, 1)],
    dtype=np.int64,
)

# 26 neighbor directions for balance checks
_DIRS = np.array(
    [(dx, dy, dz)
     for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


def pack_coords(coords):
    """(n, 3) lattice coordinates -> (n,) int64 keys (order-preserving per axis)."""
    c = np.asarray(coords, dtype=np.int64) + _OFF
    if c.size and (c.min() < 0 or c.max() > _MASK):
        raise ConfigError("lattice coordinate out of packable range")
    return (c[..., 0] << (2 * _BITS)) | (c[..., 1] << _BITS) | c[..., 2]


def unpack_coords(keys):
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = (keys >> (2 * _BITS)) & _MASK
    out[..., 1] = (keys >> _BITS) & _MASK
    out[..., 2] = keys & _MASK
    return out - _OFF


def _to_lattice(value_m, unit_m, what):
    """Convert meters to integer lattice units, demanding exactness."""
    k = round(value_m / unit_m)
    if abs(k * unit_m - value_m) > 1e-9 * max(unit_m, abs(value_m)):
        raise ConfigError(f"{what} = {value_m} is not a multiple of {unit_m}")
    return int(k)


@dataclass
class PartGeometry:
    """Build volume as integer boxes: plate below z=0, one footprint per layer.

    mode 'chamber' keeps the full chamber cross-section in every layer
    (the part is then implicit in the consolidation history); mode
    'fitted' voxelizes only the part itself.
    """

    mode: str
    plate_boxes: np.ndarray          # (m, 6) [x0 y0 z0 x1 y1 z1], z in [-t, 0]
    footprints: list                 # per layer: (k, 4) [x0 y0 x1 y1]
    n_layers: int

    @staticmethod
    def chamber(size_xy, height, plate_thickness, mesh):
        """Chamber of given footprint (m) and build height (m) on a plate."""
        h = mesh.h_fine
        cpl = mesh.cells_per_layer
        nx = _to_lattice(size_xy[0], mesh.h_coarse, "chamber x extent")
        ny = _to_lattice(size_xy[1], mesh.h_coarse, "chamber y extent")
        nz = _to_lattice(height, mesh.h_coarse, "chamber height")
        tp = _to_lattice(plate_thickness, mesh.h_coarse, "plate thickness")
        s0 = _to_lattice(mesh.h_coarse, h, "h_coarse")
        fp = np.array([[0, 0, nx * s0, ny * s0]], dtype=np.int64)
        n_layers = nz * s0 // cpl
        plate = np.zeros((1, 6), dtype=np.int64)
        if tp > 0:
            plate = np.array([[0, 0, -tp * s0, nx * s0, ny * s0, 0]], dtype=np.int64)
        else:
            plate = np.zeros((0, 6), dtype=np.int64)
        return PartGeometry("chamber", plate, [fp] * n_layers, n_layers)

    @staticmethod
    def fitted(part_boxes, plate_box, mesh):
        """Part as a union of axis-aligned boxes (m), z from the plate top.

        Every coordinate must be a multiple of h_coarse; the plate box
        is given as (x0, y0, x1, y1, thickness).
        """
        h = mesh.h_fine
        cpl = mesh.cells_per_layer
        s0m = mesh.h_coarse
        boxes = []
        zmax = 0
        for b in part_boxes:
            ib = [_to_lattice(v, s0m, "part box coordinate") for v in b]
            if ib[3] <= ib[0] or ib[4] <= ib[1] or ib[5] <= ib[2]:
                raise ConfigError(f"degenerate part box {b}")
            boxes.append(ib)
            zmax = max(zmax, ib[5])
        s0 = _to_lattice(mesh.h_coarse, h, "h_coarse")
        n_layers = zmax * s0 // cpl
        footprints = []
        for k in range(n_layers):
            z0, z1 = k * cpl, (k + 1) * cpl
            rects = [(b[0] * s0, b[1] * s0, b[3] * s0, b[4] * s0)
                     for b in boxes if b[2] * s0 <= z0 and z1 <= b[5] * s0]
            if not rects:
                raise ConfigError(f"layer {k} has an empty cross-section")
            footprints.append(np.array(rects, dtype=np.int64))
        x0, y0, x1, y1, t = plate_box
        tp = _to_lattice(t, s0m, "plate thickness")
        plate = np.array([[_to_lattice(x0, s0m, "plate x0") * s0,
                           _to_lattice(y0, s0m, "plate y0") * s0,
                           -tp * s0,
                           _to_lattice(x1, s0m, "plate x1") * s0,
                           _to_lattice(y1, s0m, "plate y1") * s0,
                           0]], dtype=np.int64)
        if tp == 0:
            plate = np.zeros((0, 6), dtype=np.int64)
        return PartGeometry("fitted", plate, footprints, n_layers)

    def z_min(self) -> int:
        return int(self.plate_boxes[:, 2].min()) if len(self.plate_boxes) else 0


@dataclass
class Forest:
    """Leaf table of the adaptive voxel mesh plus geometry bookkeeping."""

    geometry: PartGeometry
    mesh_params: object
    depth: int
    cpl: int                 # finest cells per powder layer
    level: np.ndarray        # (n,) int8
    anchor: np.ndarray       # (n, 3) int64, finest lattice units
    active: np.ndarray       # (n,) bool
    init_consol: np.ndarray  # (n,) bool
    current_layer: int = -1
    epoch: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    # -- basic queries ---------------------------------------------------

    @property
    def n_cells(self):
        return len(self.level)

    @property
    def h_fine(self):
        return self.mesh_params.h_fine

    def size(self, idx=slice(None)):
        """Cell edge length in lattice units."""
        return (np.int64(1) << (self.depth - self.level[idx].astype(np.int64)))

    def size_m(self, idx=slice(None)):
        return self.size(idx) * self.h_fine

    def layer_index(self, idx=slice(None)):
        """Layer containing the cell top face; -1 for plate cells."""
        top = self.anchor[idx, 2] + self.size(idx)
        return np.where(top <= 0, -1, (top - 1) // self.cpl)

    def active_cells(self):
        return np.flatnonzero(self.active)

    def active_volume_m3(self):
        s = self.size_m(self.active_cells())
        return float(np.sum(s * s * s))

    def _level_index(self):
        if self._index.get("epoch") != self.epoch:
            by_level = {}
            for ell in np.unique(self.level):
                rows = np.flatnonzero(self.level == ell)
                keys = pack_coords(self.anchor[rows])
                order = np.argsort(keys, kind="stable")
                by_level[int(ell)] = (keys[order], rows[order])
            self._index = {"epoch": self.epoch, "levels": by_level}
        return self._index["levels"]

    def lookup(self, level, anchors):
        """Row indices of leaves at (level, anchor); -1 where absent."""
        anchors = np.atleast_2d(anchors)
        out = np.full(len(anchors), -1, dtype=np.int64)
        entry = self._level_index().get(int(level))
        if entry is None:
            return out
        keys, rows = entry
        want = pack_coords(anchors)
        pos = np.searchsorted(keys, want)
        ok = pos < len(keys)
        ok[ok] &= keys[pos[ok]] == want[ok]
        out[ok] = rows[pos[ok]]
        return out

    def find_leaf(self, fine_cells):
        """Leaf row containing each finest-lattice cell index triple; -1 outside."""
        fine_cells = np.atleast_2d(np.asarray(fine_cells, dtype=np.int64))
        out = np.full(len(fine_cells), -1, dtype=np.int64)
        for ell in sorted(self._level_index()):
            s = np.int64(1) << (self.depth - ell)
            cand = (fine_cells // s) * s
            hit = self.lookup(ell, cand)
            take = (out == -1) & (hit >= 0)
            out[take] = hit[take]
        return out

    def neighbor_levels(self):
        """For every leaf, the max level among the 26-neighborhood leaves.

        Used by the balance check: sampling one finest cell just outside
        each face/edge/corner always lands inside the neighbor leaf on
        that side, whatever its level.
        """
        n = self.n_cells
        size = self.size()
        result = np.full(n, -1, dtype=np.int64)
        for d in _DIRS:
            probe = np.empty((n, 3), dtype=np.int64)
            for ax in range(3):
                if d[ax] < 0:
                    probe[:, ax] = self.anchor[:, ax] - 1
                elif d[ax] > 0:
                    probe[:, ax] = self.anchor[:, ax] + size
                else:
                    probe[:, ax] = self.anchor[:, ax] + (size >> 1)
            hit = self.find_leaf(probe)
            lev = np.where(hit >= 0, self.level[np.maximum(hit, 0)], -1)
            result = np.maximum(result, lev)
        return result

    def check_balance(self):
        """True iff every adjacent leaf pair differs by at most one level."""
        neigh = self.neighbor_levels()
        return bool(np.all(neigh - self.level.astype(np.int64) <= 1))

    def check_tiling(self):
        """Leaf volume equals the geometry volume (integer arithmetic)."""
        s = self.size()
        vol = int(np.sum(s.astype(object) ** 3))
        g = self.geometry
        want = 0
        for b in g.plate_boxes:
            want += int((b[3] - b[0]) * (b[4] - b[1]) * (b[5] - b[2]))
        for fp in g.footprints:
            area = int(np.sum((fp[:, 2] - fp[:, 0]) * (fp[:, 3] - fp[:, 1])))
            want += area * self.cpl
        return vol == want


def _canonical_order(level, anchor):
    keys = pack_coords(anchor)
    return np.lexsort((level, keys))


def _tile_boxes(boxes, s0):
    """Level-0 anchors tiling the given (m, 6) integer boxes."""
    anchors = []
    for b in boxes:
        xs = np.arange(b[0], b[3], s0, dtype=np.int64)
        ys = np.arange(b[1], b[4], s0, dtype=np.int64)
        zs = np.arange(b[2], b[5], s0, dtype=np.int64)
        g = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        anchors.append(g.reshape(-1, 3))
    if not anchors:
        return np.zeros((0, 3), dtype=np.int64)
    allc = np.concatenate(anchors)
    return unpack_coords(np.unique(pack_coords(allc)))


def build_coarse_grid(geometry: PartGeometry, mesh) -> Forest:
    """Level-0 forest covering the geometry; plate active and consolidated,
    everything above layer 0 inactive void."""
    mesh.validate()
    depth = mesh.total_depth
    cpl = mesh.cells_per_layer
    s0 = 1 << depth

    plate = _tile_boxes(geometry.plate_boxes, s0)

    # the build volume footprint is constant within each coarse z-slab
    # because all part-box coordinates are multiples of h_coarse
    build = []
    n_slabs = geometry.n_layers * cpl // s0
    if geometry.n_layers * cpl % s0:
        raise ConfigError("part height is not a multiple of h_coarse")
    for j in range(n_slabs):
        k = j * s0 // cpl
        fp = geometry.footprints[k]
        for kk in range(k, (j + 1) * s0 // cpl):
            if not np.array_equal(geometry.footprints[kk], fp):
                raise ConfigError(
                    "cross-section changes inside a coarse slab; align part "
                    "box heights to h_coarse")
        boxes = np.column_stack([fp[:, 0], fp[:, 1],
                                 np.full(len(fp), j * s0),
                                 fp[:, 2], fp[:, 3],
                                 np.full(len(fp), (j + 1) * s0)])
        build.append(_tile_boxes(boxes, s0))
    build = np.concatenate(build) if build else np.zeros((0, 3), dtype=np.int64)

    anchor = np.concatenate([plate, build])
    n = len(anchor)
    level = np.zeros(n, dtype=np.int8)
    active = np.zeros(n, dtype=bool)
    active[:len(plate)] = True
    init_consol = active.copy()

    order = _canonical_order(level, anchor)
    forest = Forest(geometry, mesh, depth, cpl,
                    level[order], anchor[order], active[order],
                    init_consol[order], current_layer=-1, epoch=0)
    if not forest.check_tiling():
        raise ConfigError("coarse grid does not tile the geometry")
    return forest


# -- layer advancement ----------------------------------------------------


@dataclass
class MeshUpdatePlan:
    """Balance-corrected target leaf set for activating the next layer,
    with lineage against the originating forest for field transfer."""

    base_epoch: int
    new_layer: int
    level: np.ndarray
    anchor: np.ndarray
    active: np.ndarray
    init_consol: np.ndarray
    same_src: np.ndarray       # old row if the leaf already existed, else -1
    ancestor_src: np.ndarray   # old row of a strict ancestor, else -1
    coarse_groups: list        # (new_row, old child rows) for net coarsenings
    coarsened_min_rc: list     # min r_c audited per coarsened active group


class _Work:
    """Mutable leaf table used during planning."""

    def __init__(self, forest):
        self.depth = forest.depth
        self.level = forest.level.astype(np.int64).copy()
        self.anchor = forest.anchor.copy()
        self.active = forest.active.copy()
        self.init_consol = forest.init_consol.copy()

    def size(self):
        return np.int64(1) << (self.depth - self.level)

    def split(self, rows):
        """Replace the given leaves by their 8 children."""
        rows = np.asarray(rows)
        if rows.size == 0:
            return
        keep = np.ones(len(self.level), dtype=bool)
        keep[rows] = False
        half = self.size()[rows] >> 1
        child_anchor = (self.anchor[rows, None, :]
                        + CORNER_OFFSETS[None, :, :] * half[:, None, None])
        child_anchor = child_anchor.reshape(-1, 3)
        child_level = np.repeat(self.level[rows] + 1, 8)
        child_active = np.repeat(self.active[rows], 8)
        child_consol = np.repeat(self.init_consol[rows], 8)
        self.level = np.concatenate([self.level[keep], child_level])
        self.anchor = np.concatenate([self.anchor[keep], child_anchor])
        self.active = np.concatenate([self.active[keep], child_active])
        self.init_consol = np.concatenate([self.init_consol[keep], child_consol])

    def merge(self, parent_level, parent_anchor, child_rows,
              active, consol):
        keep = np.ones(len(self.level), dtype=bool)
        keep[child_rows] = False
        self.level = np.concatenate([self.level[keep], parent_level])
        self.anchor = np.concatenate([self.anchor[keep], parent_anchor])
        self.active = np.concatenate([self.active[keep], active])
        self.init_consol = np.concatenate([self.init_consol[keep], consol])

    def find_leaf_levels(self, probes):
        """Level of the leaf containing each finest probe cell; -1 outside."""
        out = np.full(len(probes), -1, dtype=np.int64)
        for ell in np.unique(self.level):
            s = np.int64(1) << (self.depth - ell)
            have = np.sort(pack_coords(self.anchor[self.level == ell]))
            cand = pack_coords((probes // s) * s)
            pos = np.searchsorted(have, cand)
            ok = pos < len(have)
            ok[ok] &= have[pos[ok]] == cand[ok]
            out[ok & (out == -1)] = ell
        return out

    def sibling_octets(self, rows):
        """Group the given leaf rows into complete sibling octets.

        Returns (parent_anchor, groups) where groups is (m, 8) rows.
        """
        rows = np.asarray(rows)
        if rows.size == 0:
            return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 8), dtype=np.int64)
        lev = self.level[rows]
        out_pa, out_groups = [], []
        for ell in np.unique(lev):
            sub = rows[lev == ell]
            ps = np.int64(2) << (self.depth - ell)  # parent size
            pa = (self.anchor[sub] // ps) * ps
            key = pack_coords(pa)
            order = np.argsort(key, kind="stable")
            key = key[order]
            sub = sub[order]
            uniq, start, count = np.unique(key, return_index=True,
                                           return_counts=True)
            full = count == 8
            for u, st in zip(np.flatnonzero(full), start[full]):
                out_groups.append(sub[st:st + 8])
            out_pa.append(unpack_coords(uniq[full]))
        if not out_groups:
            return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 8), dtype=np.int64)
        return np.concatenate(out_pa), np.stack(out_groups)


def advance_layer(forest: Forest, history) -> MeshUpdatePlan:
    """Plan the mesh update that activates layer current_layer + 1.

    Rules: refine everything intersecting the new layer to the finest
    level and activate it as powder; keep cells within d_HAZ = 4 layer
    heights below the new layer bottom refined; coarsen complete sibling
    octets farther away only when the minimum r_c over their quadrature
    points is at least 0.9; coarsen void octets unconditionally; finish
    with a 2:1 balance closure (faces, edges and vertices).
    """
    if history is not None and history.epoch != forest.epoch:
        raise ValueError("history epoch does not match forest epoch")
    new_layer = forest.current_layer + 1
    if new_layer >= forest.geometry.n_layers:
        raise ValueError("no further layer in the build")
    cpl = forest.cpl
    z0, z1 = new_layer * cpl, (new_layer + 1) * cpl
    d_haz = 4 * cpl

    w = _Work(forest)

    # 1. refine the new layer to the finest level
    while True:
        s = w.size()
        hit = ((w.level < w.depth)
               & (w.anchor[:, 2] < z1) & (w.anchor[:, 2] + s > z0))
        rows = np.flatnonzero(hit)
        if rows.size == 0:
            break
        w.split(rows)

    # 2. activate the new layer as powder
    s = w.size()
    in_layer = (w.anchor[:, 2] >= z0) & (w.anchor[:, 2] + s <= z1)
    assert np.all(w.level[in_layer] == w.depth)
    assert not np.any(w.active[in_layer])
    w.active[in_layer] = True

    # 3. coarsen eligible active octets (single level per update); active
    # leaves are untouched by steps 1-2, so they still are old-forest rows
    rc_min_old = None
    if history is not None:
        rc_min_old = np.full(forest.n_cells, np.inf)
        act_rows = forest.active_cells()
        rc_min_old[act_rows] = history.r_c.reshape(len(act_rows), -1).min(axis=1)
    s = w.size()
    top = w.anchor[:, 2] + s
    eligible = w.active & (w.level >= 1) & (top < z0 - d_haz)
    if rc_min_old is not None and np.any(eligible):
        rows = np.flatnonzero(eligible)
        old_rows = np.full(rows.shape, -1, dtype=np.int64)
        for ell in np.unique(w.level[rows]):
            m = w.level[rows] == ell
            old_rows[m] = forest.lookup(int(ell), w.anchor[rows[m]])
        assert np.all(old_rows >= 0)
        eligible[rows] &= rc_min_old[old_rows] >= 0.9
    pa, groups = w.sibling_octets(np.flatnonzero(eligible))
    if len(groups):
        plevel = w.level[groups[:, 0]] - 1
        w.merge(plevel, pa, groups.ravel(),
                np.ones(len(groups), dtype=bool),
                w.init_consol[groups[:, 0]].copy())

    # 4. coarsen void octets as far as they go; balance restores grading
    while True:
        rows = np.flatnonzero(~w.active)
        pa, groups = w.sibling_octets(rows)
        if not len(groups):
            break
        plevel = w.level[groups[:, 0]] - 1
        w.merge(plevel, pa, groups.ravel(),
                np.zeros(len(groups), dtype=bool),
                np.zeros(len(groups), dtype=bool))

    # 5. 2:1 balance closure by refinement ripple
    while True:
        s = w.size()
        worst = np.full(len(w.level), -1, dtype=np.int64)
        for d in _DIRS:
            probe = np.empty((len(w.level), 3), dtype=np.int64)
            for ax in range(3):
                if d[ax] < 0:
                    probe[:, ax] = w.anchor[:, ax] - 1
                elif d[ax] > 0:
                    probe[:, ax] = w.anchor[:, ax] + s
                else:
                    probe[:, ax] = w.anchor[:, ax] + (s >> 1)
            worst = np.maximum(worst, w.find_leaf_levels(probe))
        rows = np.flatnonzero(worst - w.level >= 2)
        if rows.size == 0:
            break
        w.split(rows)

    # canonical order and lineage against the old forest
    order = _canonical_order(w.level.astype(np.int8), w.anchor)
    level = w.level[order].astype(np.int8)
    anchor = w.anchor[order]
    active = w.active[order]
    init_consol = w.init_consol[order]

    same_src, ancestor_src, coarse_groups = _lineage(forest, level, anchor)

    coarsened_min_rc = []
    if rc_min_old is not None:
        for new_row, children in coarse_groups:
            if active[new_row]:
                coarsened_min_rc.append(float(rc_min_old[children].min()))

    return MeshUpdatePlan(forest.epoch, new_layer, level, anchor, active,
                          init_consol, same_src, ancestor_src, coarse_groups,
                          coarsened_min_rc)


def _lineage(forest, level, anchor):
    """same/ancestor/descendant relations of the new leaf set vs the old."""
    n_new = len(level)
    same_src = np.full(n_new, -1, dtype=np.int64)
    ancestor_src = np.full(n_new, -1, dtype=np.int64)

    # identical leaves
    for ell in np.unique(level):
        rows = np.flatnonzero(level == ell)
        hit = forest.lookup(int(ell), anchor[rows])
        same_src[rows] = hit

    # strict ancestors (new leaf finer than an old leaf)
    todo = np.flatnonzero(same_src == -1)
    for ell_old in sorted(forest._level_index()):
        if todo.size == 0:
            break
        finer = todo[level[todo] > ell_old]
        if finer.size == 0:
            continue
        s = np.int64(1) << (forest.depth - ell_old)
        cand = (anchor[finer] // s) * s
        hit = forest.lookup(ell_old, cand)
        got = hit >= 0
        ancestor_src[finer[got]] = hit[got]
        todo = np.flatnonzero((same_src == -1) & (ancestor_src == -1))

    # descendants (new leaf coarser: gather old rows inside it)
    coarse_groups = []
    rows = np.flatnonzero((same_src == -1) & (ancestor_src == -1))
    if rows.size:
        by_new = {int(r): [] for r in rows}
        for ell_new in np.unique(level[rows]):
            sub = rows[level[rows] == ell_new]
            s = np.int64(1) << (forest.depth - ell_new)
            keys = pack_coords(anchor[sub])
            order = np.argsort(keys, kind="stable")
            sub_keys, sub_rows = keys[order], sub[order]
            old_cand = pack_coords((forest.anchor // s) * s)
            pos = np.searchsorted(sub_keys, old_cand)
            ok = pos < len(sub_keys)
            ok[ok] &= sub_keys[pos[ok]] == old_cand[ok]
            ok &= forest.level > ell_new
            for old_row in np.flatnonzero(ok):
                by_new[int(sub_rows[pos[old_row]])].append(old_row)
        for r in sorted(by_new):
            kids = np.array(sorted(by_new[r]), dtype=np.int64)
            assert kids.size >= 8
            coarse_groups.append((int(r), kids))

    return same_src, ancestor_src, coarse_groups


# -- degrees of freedom, constraints --------------------------------------


@dataclass
class NodalField:
    """Global vector of nodal values indexed like DofMap.vertices."""

    values: np.ndarray
    epoch: int

    def copy(self):
        return NodalField(self.values.copy(), self.epoch)


@dataclass
class DofMap:
    """Vertex numbering of the active region with hanging-node constraints.

    Vertices are sorted by packed lattice key, so the numbering is a pure
    function of the leaf set.  Slaves (hanging vertices) are not unknowns;
    their values are always the trilinear combination of their masters.
    Dirichlet vertices are unknowns with prescribed value.
    """

    vertices: np.ndarray       # (nv, 3) lattice coordinates
    cell_verts: np.ndarray     # (n_active, 8) vertex ids, corner order ix*4+iy*2+iz
    active_rows: np.ndarray    # forest rows of the active cells, same order
    is_slave: np.ndarray
    is_dirichlet: np.ndarray
    slaves: np.ndarray         # (ns,) slave vertex ids, ascending
    slave_ptr: np.ndarray      # (ns+1,) CSR into masters/weights
    slave_masters: np.ndarray
    slave_weights: np.ndarray
    h_fine: float

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_dofs(self):
        """Unknown count: vertices that are not constraint slaves."""
        return self.n_vertices - len(self.slaves)

    def vertices_m(self):
        return self.vertices * self.h_fine

    def distribute(self, values):
        """Overwrite slave entries with the interpolation of their masters.

        Constraint closure guarantees no master is itself a slave, so this
        is a single segmented reduction.
        """
        if len(self.slaves):
            prod = self.slave_weights * values[self.slave_masters]
            values[self.slaves] = np.add.reduceat(prod, self.slave_ptr[:-1])
        return values

    def condense(self, values):
        """Fold slave entries into their masters (transpose of distribute)
        and zero the slave slots."""
        if len(self.slaves):
            rep = np.repeat(values[self.slaves], np.diff(self.slave_ptr))
            np.add.at(values, self.slave_masters, self.slave_weights * rep)
            values[self.slaves] = 0.0
        return values


def _containing_active_cell(forest, verts, levels=None):
    """For each lattice vertex, an active leaf whose closed box contains it
    but does NOT have it as a corner.  Returns (forest row, rel coords) with
    row = -1 where no such leaf exists.  Scans levels coarse to fine; only
    one level can qualify (see the balance argument in build_dofmap)."""
    n = len(verts)
    row = np.full(n, -1, dtype=np.int64)
    rel = np.zeros((n, 3), dtype=np.int64)
    level_iter = sorted(forest._level_index()) if levels is None else levels
    for ell in level_iter:
        todo = np.flatnonzero(row == -1)
        if todo.size == 0:
            break
        s = np.int64(1) << (forest.depth - ell)
        v = verts[todo]
        hi = (v // s) * s
        lo = np.where(v % s == 0, hi - s, hi)
        for bits in range(8):
            pick = np.array([(bits >> 2) & 1, (bits >> 1) & 1, bits & 1])
            a = np.where(pick[None, :] == 1, hi, lo)
            hit = forest.lookup(ell, a)
            ok = (hit >= 0)
            ok[ok] &= forest.active[hit[ok]]
            if not np.any(ok):
                continue
            r = v - a
            corner = np.all((r == 0) | (r == s), axis=1)
            take = ok & ~corner & (row[todo] == -1)
            row[todo[take]] = hit[take]
            rel[todo[take]] = r[take]
    return row, rel


def build_dofmap(forest: Forest) -> DofMap:
    """Vertex numbering plus hanging-node constraints for the active region."""
    rows = forest.active_cells()
    size = forest.size(rows)
    corners = (forest.anchor[rows, None, :]
               + CORNER_OFFSETS[None, :, :] * size[:, None, None])
    keys = pack_coords(corners.reshape(-1, 3))
    uniq, inv = np.unique(keys, return_inverse=True)
    cell_verts = inv.reshape(-1, 8).astype(np.int32)
    verts = unpack_coords(uniq)
    nv = len(verts)

    # a hanging vertex is a corner of fewer than 8 cells, so the incidence
    # count is a cheap prefilter; the full test looks for an active leaf
    # containing the vertex somewhere other than a corner.  Around any
    # vertex the 2:1 balance permits only two adjacent levels, hence a
    # single constraint level per vertex.
    counts = np.bincount(inv, minlength=nv)
    cand = np.flatnonzero(counts < 8)
    crow, crel = _containing_active_cell(forest, verts[cand])
    hang = crow >= 0

    raw = {}
    active_pos = {int(r): i for i, r in enumerate(rows)}
    for j in np.flatnonzero(hang):
        v = int(cand[j])
        c = int(crow[j])
        s = int(forest.size(c))
        r = crel[j] / s  # components in {0, 1/2, 1}, exact in binary
        masters = []
        for ci, off in enumerate(CORNER_OFFSETS):
            wgt = 1.0
            for d in range(3):
                wgt *= r[d] if off[d] else (1.0 - r[d])
            if wgt > 0.0:
                masters.append((int(cell_verts[active_pos[c], ci]), wgt))
        raw[v] = masters

    # chains: a master may itself hang on a yet coarser cell
    changed = True
    while changed:
        changed = False
        for v, masters in list(raw.items()):
            if any(m in raw for m, _ in masters):
                merged = {}
                for m, wm in masters:
                    if m in raw:
                        for mm, wmm in raw[m]:
                            merged[mm] = merged.get(mm, 0.0) + wm * wmm
                    else:
                        merged[m] = merged.get(m, 0.0) + wm
                raw[v] = sorted(merged.items())
                changed = True

    slaves = np.array(sorted(raw), dtype=np.int64)
    ptr = [0]
    masters_flat, weights_flat = [], []
    for v in slaves:
        for m, wgt in sorted(raw[int(v)]):
            masters_flat.append(m)
            weights_flat.append(wgt)
        ptr.append(len(masters_flat))
    is_slave = np.zeros(nv, dtype=bool)
    is_slave[slaves] = True

    is_dirichlet = np.zeros(nv, dtype=bool)
    if forest.mesh_params.dirichlet_bottom:
        z_min = forest.geometry.z_min()
        is_dirichlet = (verts[:, 2] == z_min) & ~is_slave

    return DofMap(verts, cell_verts, rows, is_slave, is_dirichlet,
                  slaves, np.array(ptr, dtype=np.int64),
                  np.array(masters_flat, dtype=np.int64),
                  np.array(weights_flat), forest.h_fine)


# -- applying a mesh update ------------------------------------------------


def initial_history(forest: Forest):
    """Fresh per-quadrature-point consolidation state: 1 on initially
    consolidated cells (base plate), 0 on powder."""
    from .material import HistoryField
    rows = forest.active_cells()
    r_c = np.zeros((len(rows), 2, 2, 2))
    r_c[forest.init_consol[rows]] = 1.0
    return HistoryField(r_c, forest.epoch)


@dataclass
class TransferReport:
    """How each new vertex got its value: 0 copied, 1 interpolated from an
    old coarse cell, 2 fresh (initialized to T_0)."""

    vertex_source: np.ndarray


def apply_update(forest: Forest, plan: MeshUpdatePlan, fields, history,
                 T_0=303.0, old_dofmap=None, new_dofmap=None):
    """Build the successor forest of a plan and transfer data onto it.

    Nodal fields: exact copy at surviving vertices, trilinear
    interpolation from the old containing cell at refined vertices, T_0
    at newly activated vertices.  History: octant copy downward,
    volume-weighted octant mean upward.  The transfer report is stashed
    on the plan for auditing.
    """
    if plan.base_epoch != forest.epoch:
        raise ValueError("plan is stale: mesh changed since it was computed")
    from .material import HistoryField

    new_forest = Forest(forest.geometry, forest.mesh_params, forest.depth,
                        forest.cpl, plan.level, plan.anchor, plan.active,
                        plan.init_consol, current_layer=plan.new_layer,
                        epoch=forest.epoch + 1)
    assert new_forest.check_tiling()

    if old_dofmap is None:
        old_dofmap = build_dofmap(forest)
    if new_dofmap is None:
        new_dofmap = build_dofmap(new_forest)

    old_keys = pack_coords(old_dofmap.vertices)  # sorted by construction
    new_keys = pack_coords(new_dofmap.vertices)
    pos = np.searchsorted(old_keys, new_keys)
    pos_ok = pos < len(old_keys)
    copied = pos_ok.copy()
    copied[pos_ok] = old_keys[pos[pos_ok]] == new_keys[pos_ok]

    todo = np.flatnonzero(~copied)
    irow, irel = _containing_active_cell(forest, new_dofmap.vertices[todo])
    # also accept corner containment here: a new vertex matching an old
    # cell corner was already caught by the exact key copy above, so any
    # hit is interpolation territory
    interp = irow >= 0

    source = np.full(new_dofmap.n_vertices, 2, dtype=np.int8)
    source[copied] = 0
    source[todo[interp]] = 1
    plan.transfer_report = TransferReport(source)

    old_active_pos = {int(r): i for i, r in enumerate(old_dofmap.active_rows)}

    new_fields = []
    for f in fields:
        vals = np.full(new_dofmap.n_vertices, T_0, dtype=np.float64)
        vals[copied] = f.values[pos[copied]]
        for j in np.flatnonzero(interp):
            c = int(irow[j])
            s = int(forest.size(c))
            r = irel[j] / s
            corner_vals = f.values[old_dofmap.cell_verts[old_active_pos[c]]]
            acc = 0.0
            for ci, off in enumerate(CORNER_OFFSETS):
                wgt = 1.0
                for d in range(3):
                    wgt *= r[d] if off[d] else (1.0 - r[d])
                acc += wgt * corner_vals[ci]
            vals[todo[j]] = acc
        new_dofmap.distribute(vals)
        new_fields.append(NodalField(vals, new_forest.epoch))

    # history transfer onto the new active cells
    new_rows = new_forest.active_cells()
    new_pos = {int(r): i for i, r in enumerate(new_rows)}
    r_c = np.zeros((len(new_rows), 2, 2, 2))
    coarse_parents = {r: kids for r, kids in plan.coarse_groups}
    for i, r in enumerate(new_rows):
        r = int(r)
        src = int(plan.same_src[r])
        if src >= 0:
            if forest.active[src]:
                r_c[i] = history.r_c[old_active_pos[src]]
            # else: newly activated powder, stays 0
            continue
        anc = int(plan.ancestor_src[r])
        if anc >= 0:
            if forest.active[anc]:
                s_anc = int(forest.size(anc))
                s_new = int(new_forest.size(r))
                mid = plan.anchor[r] + s_new // 2
                oct_ = (mid - forest.anchor[anc]) * 2 // s_anc  # 0 or 1 each
                r_c[i] = history.r_c[old_active_pos[anc]][tuple(oct_)]
            continue
        kids = coarse_parents[r]
        assert len(kids) == 8 and np.all(forest.active[kids]), \
            "active coarsening must merge exactly one level"
        s_par = int(new_forest.size(r))
        for kid in kids:
            off = (forest.anchor[kid] - plan.anchor[r]) * 2 // s_par
            r_c[i][tuple(off)] = history.r_c[old_active_pos[int(kid)]].mean()

    new_history = HistoryField(r_c, new_forest.epoch)
    return new_forest, new_fields, new_history


def locate_active(forest: Forest, points_m):
    """Containing active leaf row and relative coordinates for arbitrary
    points (m); rows are -1 outside the active region.  On cell boundaries
    any incident active cell is acceptable (fields are continuous)."""
    pts = np.atleast_2d(np.asarray(points_m, dtype=np.float64)) / forest.h_fine
    n = len(pts)
    row = np.full(n, -1, dtype=np.int64)
    rel = np.zeros((n, 3))
    base = np.floor(pts).astype(np.int64)
    on_grid = pts == base
    for bits in range(8):
        pick = np.array([(bits >> 2) & 1, (bits >> 1) & 1, bits & 1])
        cand = base - np.where(on_grid & (pick[None, :] == 1), 1, 0)
        hit = forest.find_leaf(cand)
        ok = hit >= 0
        ok[ok] &= forest.active[hit[ok]]
        take = ok & (row == -1)
        # the candidate fine cell must actually lie in the found leaf
        row[take] = hit[take]
    got = row >= 0
    size = forest.size(np.maximum(row, 0)).astype(np.float64)
    rel[got] = (pts[got] - forest.anchor[row[got]]) / size[got, None]
    return row, np.clip(rel, 0.0, 1.0)


def sample_field(forest: Forest, dofmap: DofMap, values, points_m):
    """Trilinear sample of a nodal field at arbitrary points (m)."""
    row, rel = locate_active(forest, points_m)
    out = np.full(len(row), np.nan)
    active_pos = {int(r): i for i, r in enumerate(dofmap.active_rows)}
    for j in np.flatnonzero(row >= 0):
        corner_vals = values[dofmap.cell_verts[active_pos[int(row[j])]]]
        acc = 0.0
        for ci, off in enumerate(CORNER_OFFSETS):
            wgt = 1.0
            for d in range(3):
                wgt *= rel[j, d] if off[d] else (1.0 - rel[j, d])
            acc += wgt * corner_vals[ci]
        out[j] = acc
    return out


# -- batches and boundary faces --------------------------------------------


@dataclass
class CellBatch:
    """Fixed-width group of active cells for lane-wise kernel evaluation."""

    cell_rows: np.ndarray        # (n_lanes,) forest rows, -1 on dead lanes
    active_lane_mask: np.ndarray
    h_m: np.ndarray              # per-lane edge length (m)
    anchor: np.ndarray           # (n_lanes, 3)


def build_batches(forest: Forest, n_lanes: int):
    """Partition the active cells into fixed-width batches, trailing lanes
    masked off; canonical cell order."""
    if n_lanes not in (1, 2, 4, 8):
        raise ValueError("n_lanes must be one of 1, 2, 4, 8")
    rows = forest.active_cells()
    batches = []
    for start in range(0, len(rows), n_lanes):
        chunk = rows[start:start + n_lanes]
        k = len(chunk)
        cell_rows = np.full(n_lanes, -1, dtype=np.int64)
        cell_rows[:k] = chunk
        mask = np.zeros(n_lanes, dtype=bool)
        mask[:k] = True
        h = np.zeros(n_lanes)
        h[:k] = forest.size_m(chunk)
        anc = np.zeros((n_lanes, 3), dtype=np.int64)
        anc[:k] = forest.anchor[chunk]
        batches.append(CellBatch(cell_rows, mask, h, anc))
    return batches


@dataclass
class FaceSet:
    """Radiating/evaporating boundary facets of the active region.

    All facets are +z oriented: void cells only ever sit above the active
    region, and exterior top faces belong to the evolving top surface.
    A facet may be a quarter of its cell's face where the neighborhood
    is finer.  offset is the facet's in-face anchor relative to the cell
    anchor; fsize its edge length (both in fine lattice units).
    """

    cell_rows: np.ndarray
    offset: np.ndarray   # (nf, 2)
    fsize: np.ndarray

    def __len__(self):
        return len(self.cell_rows)


def interface_faces(forest: Forest) -> FaceSet:
    """Enumerate the boundary facets carrying radiation and evaporation.

    For each active cell's top face the covering neighbor is found at the
    same level, one coarser, or one finer (guaranteed by 2:1 balance);
    active coverage drops the facet, void or no coverage emits it.
    """
    rows = forest.active_cells()
    out_rows, out_off, out_size = [], [], []
    levels = forest.level[rows]
    for ell in np.unique(levels):
        sub = rows[levels == ell]
        s = np.int64(1) << (forest.depth - int(ell))
        ax, ay = forest.anchor[sub, 0], forest.anchor[sub, 1]
        top = forest.anchor[sub, 2] + s

        same = forest.lookup(int(ell), np.column_stack([ax, ay, top]))
        covered = np.zeros(len(sub), dtype=np.int8)  # 0 open, 1 active, 2 void
        got = same >= 0
        covered[got] = np.where(forest.active[same[got]], 1, 2)

        if ell > 0:
            ps = 2 * s
            pa = np.column_stack([(ax // ps) * ps, (ay // ps) * ps, top])
            par = forest.lookup(int(ell) - 1, pa)
            par[top % ps != 0] = -1
            got = (par >= 0) & (covered == 0)
            covered[got] = np.where(forest.active[par[got]], 1, 2)

        emit_full = covered == 2
        open_ = covered == 0
        if int(ell) < forest.depth:
            hs = s >> 1
            quarter_open = np.flatnonzero(open_)
            # decide each quarter independently against the finer level
            any_child = np.zeros(len(sub), dtype=bool)
            qstatus = np.zeros((len(sub), 2, 2), dtype=np.int8)
            for i in range(2):
                for j in range(2):
                    qa = np.column_stack([ax + i * hs, ay + j * hs, top])
                    ch = forest.lookup(int(ell) + 1, qa[quarter_open])
                    st = np.zeros(len(quarter_open), dtype=np.int8)
                    got = ch >= 0
                    st[got] = np.where(forest.active[ch[got]], 1, 2)
                    qstatus[quarter_open, i, j] = st
                    any_child[quarter_open] |= got
            # quarters where a finer leaf exists: emit non-active quarters;
            # where no finer leaf exists anywhere: whole face is exterior
            for k in np.flatnonzero(open_):
                if any_child[k]:
                    for i in range(2):
                        for j in range(2):
                            if qstatus[k, i, j] != 1:
                                out_rows.append(sub[k])
                                out_off.append((i * hs, j * hs))
                                out_size.append(hs)
                else:
                    emit_full[k] = True
        else:
            emit_full |= open_

        for k in np.flatnonzero(emit_full):
            out_rows.append(sub[k])
            out_off.append((0, 0))
            out_size.append(s)

    if not out_rows:
        return FaceSet(np.zeros(0, dtype=np.int64),
                       np.zeros((0, 2), dtype=np.int64),
                       np.zeros(0, dtype=np.int64))
    cell_rows = np.array(out_rows, dtype=np.int64)
    offset = np.array(out_off, dtype=np.int64)
    fsize = np.array(out_size, dtype=np.int64)
    order = np.lexsort((offset[:, 1], offset[:, 0], cell_rows))
    return FaceSet(cell_rows[order], offset[order], fsize[order])
