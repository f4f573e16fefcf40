"""Run metrics: per-layer throughput and per-phase wall-time breakdown.

Throughput counts degrees of freedom pushed through the explicit kernel
per second and core; parallel efficiency compares two timed runs as
eta = T_ref * N_ref / (T_scaled * N_scaled).
"""

import io
from dataclasses import dataclass, field

__all__ = ["RunMetrics", "build_metrics", "report_metrics",
           "parallel_efficiency"]

_PHASES = ("scan", "cooldown", "amr_transfer", "output")


@dataclass
class LayerRow:
    layer: int
    n_cells: int
    n_dofs: int
    n_steps: int
    mean_step_s: float
    throughput: float      # DoFs / s / core
    t_max: float


@dataclass
class RunMetrics:
    layers: list = field(default_factory=list)   # LayerRow
    phase_fractions: dict = field(default_factory=dict)
    phase_seconds: dict = field(default_factory=dict)
    workers: int = 1
    total_wall: float = 0.0

    def validate(self):
        s = sum(self.phase_fractions.values())
        # remainder is untracked overhead, so the fractions stay below 1
        if s > 1.0 + 1e-9:
            raise ValueError(f"phase fractions sum to {s} > 1")
        return self


def build_metrics(results, state, settings, total_wall=None) -> RunMetrics:
    """Condense driver LayerResults and phase timers into RunMetrics."""
    rows = []
    for r in results:
        steps = r.scan_steps
        mean = r.wall_scan / steps if steps else 0.0
        thru = (r.n_dofs / (mean * settings.threads)) if mean > 0.0 else 0.0
        rows.append(LayerRow(r.layer_index, r.n_cells, r.n_dofs, steps,
                             mean, thru, r.t_max_seen))
    tracked = {p: state.phase_seconds.get(p, 0.0) for p in _PHASES}
    total = sum(tracked.values())
    if total_wall is not None:
        total = max(total, total_wall)
    fr = {p: (v / total if total > 0 else 0.0) for p, v in tracked.items()}
    return RunMetrics(rows, fr, tracked, settings.threads, total).validate()


def parallel_efficiency(t_ref, n_ref, t_scaled, n_scaled) -> float:
    """eta of a scaled run against a reference run."""
    if min(t_ref, n_ref, t_scaled, n_scaled) <= 0:
        raise ValueError("times and worker counts must be positive")
    return (t_ref * n_ref) / (t_scaled * n_scaled)


def report_metrics(metrics: RunMetrics, baseline: RunMetrics = None) -> str:
    """CSV rows per layer, then a phase-breakdown block.

    With a baseline run the per-layer eta column compares scan-phase
    times by the efficiency formula.
    """
    if baseline is not None and len(baseline.layers) != len(metrics.layers):
        raise ValueError("baseline layer count does not match")
    out = io.StringIO()
    cols = "layer,n_cells,n_dofs,n_steps,mean_step_s,throughput_dofs_per_s_core,t_max_K"
    if baseline is not None:
        cols += ",eta"
    print(cols, file=out)
    for i, r in enumerate(metrics.layers):
        row = (f"{r.layer},{r.n_cells},{r.n_dofs},{r.n_steps},"
               f"{r.mean_step_s:.6e},{r.throughput:.6e},{r.t_max:.3f}")
        if baseline is not None:
            b = baseline.layers[i]
            eta = parallel_efficiency(
                b.mean_step_s * b.n_steps, baseline.workers,
                r.mean_step_s * r.n_steps, metrics.workers)
            row += f",{eta:.4f}"
        print(row, file=out)
    print("", file=out)
    print("phase,seconds,fraction", file=out)
    for p in _PHASES:
        print(f"{p},{metrics.phase_seconds.get(p, 0.0):.6e},"
              f"{metrics.phase_fractions.get(p, 0.0):.4f}", file=out)
    print(f"workers,{metrics.workers},", file=out)
    print(f"total_wall,{metrics.total_wall:.6e},", file=out)
    return out.getvalue()
