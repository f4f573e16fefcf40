"""Build orchestration: layer loop, hatching, checkpoints, metrics.

A build is a sequence of layers; each layer advances the mesh (deposit
powder, refine around the melt zone, coarsen behind it), transfers the
fields, scans, and cools down.  All mutable state lives in a
SimulationState so a build can stop and resume at any layer boundary.
"""

import json
import math
import time as _time
from dataclasses import dataclass

import numpy as np

from .mesh import (
    Forest,
    NodalField,
    advance_layer,
    apply_update,
    build_coarse_grid,
    build_dofmap,
    initial_history,
    sample_field,
)
from .material import HistoryField
from .operators import ThermalOperator
from .physics import LayerPath, ScanPath, Segment
from .timestepping import (
    InstabilityError,
    SimulationState,
    compute_step_criteria,
    run_cooldown_phase,
    run_scan_phase,
)

__all__ = [
    "BuildPlan",
    "BuildResult",
    "LayerResult",
    "PartShape",
    "generate_hatch",
    "hatch_path",
    "initialize_state",
    "run_build",
    "save_checkpoint",
    "load_checkpoint",
    "extract_part_shape",
    "probe_temperature",
    "single_track_plan",
    "write_metrics",
]


@dataclass
class BuildPlan:
    """Immutable description of a build job."""

    params: object          # ProcessParams
    geometry: object        # PartGeometry
    path: ScanPath
    settings: object        # SolverSettings
    dt_ref: float = 0.0     # explicit step override; 0 = derive from criteria
    geometry_spec: object = None   # pre-voxelization description, for configs
    t_cool: float = 0.0     # default dwell for generated paths
    d_h: float = 0.0        # default hatch spacing for generated paths

    def validate(self):
        self.params.validate()
        self.path.validate()
        h = self.params.mesh.h_powder
        for lp in self.path.layers:
            if lp.layer_index >= self.geometry.n_layers:
                raise ValueError(
                    f"scan path references layer {lp.layer_index} but the "
                    f"geometry has {self.geometry.n_layers} layers")
            want = (lp.layer_index + 1) * h
            if abs(lp.z - want) > 1e-12:
                raise ValueError(
                    f"layer {lp.layer_index} height {lp.z} does not match "
                    f"the powder stack ({want})")
        return self


def generate_hatch(boxes, spacing, v, power, direction_deg=0.0):
    """Serpentine hatch tracks covering the given (x0, y0, x1, y1) boxes.

    Each box gets n = max(1, floor(width / spacing)) tracks, centered so
    the margin is split evenly; the scan sense alternates continuously
    across track and box boundaries.  direction_deg 0 scans along x,
    90 along y.
    """
    if direction_deg not in (0.0, 90.0, 0, 90):
        raise ValueError("hatch direction must be 0 or 90 degrees")
    along_x = direction_deg in (0.0, 0)
    segs = []
    sense = 1
    for (x0, y0, x1, y1) in boxes:
        width = (y1 - y0) if along_x else (x1 - x0)
        n = max(1, int(math.floor(width / spacing + 1e-9)))
        off = (width - (n - 1) * spacing) / 2.0
        for i in range(n):
            c = off + i * spacing
            if along_x:
                a, b = (x0, x1) if sense > 0 else (x1, x0)
                segs.append(Segment(a, y0 + c, b, y0 + c, v, power))
            else:
                a, b = (y0, y1) if sense > 0 else (y1, y0)
                segs.append(Segment(x0 + c, a, x0 + c, b, v, power))
            sense = -sense
    return segs


def hatch_path(geometry, mesh, d_h, v, power, cool_time,
               rotation=(0.0,), layers=None):
    """ScanPath hatching every layer's cross-section of a geometry.

    rotation cycles over the given per-layer directions (degrees, 0 or
    90).  Tracks are clipped per footprint box, so unions with voids
    (bridges, overhangs) never get a track across the gap.
    """
    h = mesh.h_fine
    out = []
    for k in (range(geometry.n_layers) if layers is None else layers):
        boxes = geometry.footprints[k] * h
        direction = rotation[k % len(rotation)]
        segs = generate_hatch(boxes, d_h, v, power, direction)
        z = (k + 1) * mesh.h_powder
        out.append(LayerPath(k, z, segs, cool_time))
    return ScanPath(out)


@dataclass
class LayerResult:
    """Per-layer accounting collected by run_build."""

    layer_index: int
    n_cells: int
    n_dofs: int
    dt_used: float
    dt_stability: float
    dt_accuracy: float
    scan_steps: int
    cooldown_steps: int
    newton_iters: int
    krylov_iters: int
    t_max_seen: float
    wall_scan: float
    wall_cooldown: float
    wall_amr: float


@dataclass
class BuildResult:
    """What a completed build hands back."""

    state: SimulationState
    layers: list            # LayerResult per scanned layer
    part: "PartShape"


def _rebuild_operator(state, params, settings):
    state.dofmap = build_dofmap(state.forest)
    state.op = ThermalOperator(state.forest, state.dofmap, params, settings)


def initialize_state(plan: BuildPlan) -> SimulationState:
    """Fresh state before any layer: base plate at ambient temperature."""
    forest = build_coarse_grid(plan.geometry, plan.params.mesh)
    history = initial_history(forest)
    dofmap = build_dofmap(forest)
    op = ThermalOperator(forest, dofmap, plan.params, plan.settings)
    T = np.full(dofmap.n_vertices, plan.params.T_0)
    return SimulationState(forest, dofmap, op, T, history)


def _advance_mesh(state, plan, target_layer):
    """Advance the mesh one deposition step and transfer the state."""
    t0 = _time.perf_counter()
    upd = advance_layer(state.forest, state.history)
    if upd.new_layer != target_layer:
        raise RuntimeError(
            f"mesh is at layer {state.forest.current_layer}, cannot jump "
            f"to {target_layer}")
    forest, fields, history = apply_update(
        state.forest, upd, [NodalField(state.T, state.forest.epoch)],
        state.history, T_0=plan.params.T_0)
    state.forest = forest
    state.T = fields[0].values
    state.history = history
    _rebuild_operator(state, plan.params, plan.settings)
    wall = _time.perf_counter() - t0
    state.charge("amr_transfer", wall)
    return upd, wall


def run_build(plan: BuildPlan, output_dir=None, snapshot_every=None,
              resume=None, progress=None) -> BuildResult:
    """Run a build plan to completion.

    snapshot_every: an int writes a field snapshot every that many scan
    steps; the string "layer" writes one per layer.  With an output
    directory a restartable checkpoint is written at every layer
    boundary; resume accepts such a checkpoint and skips the layers
    already done.
    """
    plan.validate()
    if resume is not None:
        state, done_through = load_checkpoint(plan, resume)
    else:
        state = initialize_state(plan)
        done_through = -1

    results = []
    out = _OutputSink(plan, output_dir, snapshot_every)
    for lp in plan.path.layers:
        if lp.layer_index <= done_through:
            continue
        # deposit powder layers up to and including the scanned one;
        # unscanned layers in between get no beam time
        wall_amr = 0.0
        while state.forest.current_layer < lp.layer_index:
            _, w = _advance_mesh(state, plan, state.forest.current_layer + 1)
            wall_amr += w
        crit = compute_step_criteria(state.op, plan.settings)
        dt = plan.dt_ref if plan.dt_ref > 0.0 else crit.dt_used
        out.bind(state, lp)
        try:
            scan = run_scan_phase(state, lp, dt, on_step=out.on_scan_step)
            cool = run_cooldown_phase(state, lp, dt, plan.settings)
        except InstabilityError as err:
            err.layer = lp.layer_index
            raise
        results.append(LayerResult(
            layer_index=lp.layer_index,
            n_cells=int(state.forest.active.sum()),
            n_dofs=state.dofmap.n_dofs,
            dt_used=dt,
            dt_stability=crit.dt_stability,
            dt_accuracy=crit.dt_accuracy,
            scan_steps=scan.n_steps,
            cooldown_steps=cool.n_steps,
            newton_iters=cool.newton_iters,
            krylov_iters=cool.krylov_iters,
            t_max_seen=scan.t_max_seen,
            wall_scan=scan.wall_time,
            wall_cooldown=cool.wall_time,
            wall_amr=wall_amr,
        ))
        out.end_layer(state, lp)
        if progress is not None:
            progress(results[-1])
    part = extract_part_shape(state.history, state.forest)
    return BuildResult(state, results, part)


class _OutputSink:
    """Snapshot and checkpoint writer; inert without an output dir."""

    def __init__(self, plan, output_dir, snapshot_every):
        self.plan = plan
        self.dir = output_dir
        self.every = snapshot_every
        self.state = None
        self.lp = None
        self.counter = 0
        if output_dir is not None:
            import os
            os.makedirs(output_dir, exist_ok=True)

    def bind(self, state, lp):
        self.state = state
        self.lp = lp

    def _write_vtu(self, state, tag):
        from .io.vtu import write_vtu
        import os
        t0 = _time.perf_counter()
        path = os.path.join(self.dir, f"state_{tag}.vtu")
        write_vtu(path, state.forest, state.dofmap, state.T, state.history,
                  state.op.params.material, time=state.time)
        state.charge("output", _time.perf_counter() - t0)

    def on_scan_step(self, state, step, tau):
        if self.dir is None or not isinstance(self.every, int):
            return
        if self.every > 0 and step % self.every == 0:
            self._write_vtu(state, f"L{self.lp.layer_index:03d}_s{step:06d}")

    def end_layer(self, state, lp):
        if self.dir is None:
            return
        if self.every == "layer" or isinstance(self.every, int):
            self._write_vtu(state, f"L{lp.layer_index:03d}_end")
        import os
        t0 = _time.perf_counter()
        save_checkpoint(state, lp.layer_index,
                        os.path.join(self.dir, "checkpoint.npz"))
        state.charge("output", _time.perf_counter() - t0)


def save_checkpoint(state: SimulationState, done_through, path):
    """Write a layer-boundary checkpoint: mesh leaves, fields, history."""
    np.savez_compressed(
        path,
        done_through=done_through,
        time=state.time,
        epoch=state.forest.epoch,
        current_layer=state.forest.current_layer,
        level=state.forest.level,
        anchor=state.forest.anchor,
        active=state.forest.active,
        init_consol=state.forest.init_consol,
        T=state.T,
        r_c=state.history.r_c,
    )


def load_checkpoint(plan: BuildPlan, path):
    """Rebuild a SimulationState from a checkpoint written for this plan."""
    z = np.load(path)
    mesh = plan.params.mesh
    forest = Forest(plan.geometry, mesh, mesh.total_depth, mesh.cells_per_layer,
                    z["level"], z["anchor"], z["active"], z["init_consol"],
                    current_layer=int(z["current_layer"]),
                    epoch=int(z["epoch"]))
    if not forest.check_tiling():
        raise ValueError("checkpoint mesh does not tile this plan's geometry")
    history = HistoryField(z["r_c"], forest.epoch)
    dofmap = build_dofmap(forest)
    op = ThermalOperator(forest, dofmap, plan.params, plan.settings)
    T = z["T"]
    if len(T) != dofmap.n_vertices:
        raise ValueError("checkpoint field length does not match the mesh")
    state = SimulationState(forest, dofmap, op, T, history,
                            time=float(z["time"]))
    return state, int(z["done_through"])


@dataclass
class PartShape:
    """Consolidated-material cells selected from the history field."""

    rows: np.ndarray        # leaf indices into the forest
    anchor_m: np.ndarray    # (n, 3) box corners
    size_m: np.ndarray      # (n,) edge lengths
    volume_m3: float
    n_components: int       # face-connected pieces; >1 flags lack of fusion


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, i):
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[ri] = rj


def _face_components(forest, rows):
    """Count face-connected components of a leaf subset.

    Probes four quarter points just across each +axis face; with the 2:1
    balance those land in every same-size, coarser, or one-level-finer
    neighbor, so each touching pair is seen from its minus side.
    """
    if len(rows) == 0:
        return 0
    comp = np.full(forest.n_cells, -1)
    comp[rows] = np.arange(len(rows))
    uf = _UnionFind(len(rows))
    size = forest.size(rows)
    for ax in range(3):
        a1, a2 = [d for d in range(3) if d != ax]
        for u in (1, 3):
            for w in (1, 3):
                probe = forest.anchor[rows].copy()
                probe[:, ax] += size
                probe[:, a1] += u * size // 4
                probe[:, a2] += w * size // 4
                hit = forest.find_leaf(probe)
                other = comp[np.maximum(hit, 0)]
                for i in np.flatnonzero((hit >= 0) & (other >= 0)):
                    uf.union(int(i), int(other[i]))
    roots = {uf.find(i) for i in range(len(rows))}
    return len(roots)


def extract_part_shape(history, forest, threshold=0.5, include_plate=False):
    """Axis-aligned boxes of consolidated material.

    A cell counts as part when its volume-averaged r_c reaches the
    threshold; the base plate is excluded unless requested.  The
    component count is a lack-of-fusion indicator: an enclosed
    sub-threshold pocket splits the part.
    """
    act = forest.active_cells()
    rc_mean = history.r_c.reshape(len(act), -1).mean(axis=1)
    keep = rc_mean >= threshold
    if not include_plate:
        keep &= ~forest.init_consol[act]
    rows = act[keep]
    size_m = forest.size_m(rows)
    return PartShape(
        rows=rows,
        anchor_m=forest.anchor[rows] * forest.h_fine,
        size_m=size_m,
        volume_m3=float(np.sum(size_m ** 3)),
        n_components=_face_components(forest, rows),
    )


def probe_temperature(state, points_m):
    """Trilinear sample of the current temperature at given points."""
    return sample_field(state.forest, state.dofmap, state.T, points_m)


def single_track_plan(mat=None, bnd=None, refine=0, n_layers=2,
                      cool_time=0.06, power=100.0, velocity=0.96,
                      radius=60e-6, settings=None):
    """A compact verification scenario: two 40 um layers on a 0.2 mm
    plate, one straight track per layer along the long edge, fixed
    cool-down.  refine subdivides each powder layer into 2^refine cells
    per direction with the explicit step scaled by 4 per level and the
    explicit cool-down duration held fixed.
    """
    from .params import (
        MaterialParams, BoundaryParams, HeatSourceParams, MeshParams,
        ProcessParams, SolverSettings)
    from .physics import Segment, LayerPath
    from .mesh import PartGeometry

    mat = mat or MaterialParams()
    bnd = bnd or BoundaryParams()
    hs = HeatSourceParams(radius=radius, h_powder=40e-6, power=power,
                          scan_velocity=velocity)
    mesh = MeshParams(h_coarse=40e-6, n_refine=0, h_powder=40e-6,
                      cells_per_layer=2 ** refine)
    geo = PartGeometry.chamber((1.0e-3, 0.2e-3), n_layers * 40e-6, 0.2e-3,
                               mesh)
    params = ProcessParams(mat, bnd, hs, mesh)

    dt_ref = 2.0e-5
    if settings is None:
        settings = SolverSettings()
    settings.explicit_cooldown_steps = 1000 * 4 ** refine
    layers = []
    for k in range(n_layers):
        seg = Segment(0.0, 0.0, 1.0e-3, 0.0, velocity, power)
        layers.append(LayerPath(k, z=(k + 1) * 40e-6, segments=[seg],
                                cool_time=cool_time))
    return BuildPlan(params, geo, ScanPath(layers), settings,
                     dt_ref=dt_ref / 4 ** refine)


def write_metrics(path, results, state, settings):
    """Dump the per-layer results and phase timings as json."""
    tot = state.phase_seconds
    payload = {
        "layers": [vars(r) for r in results],
        "phase_seconds": tot,
        "threads": settings.threads,
        "deterministic": settings.deterministic,
        "time_simulated": state.time,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
