"""Command line front end.

Subcommands:
    run <config> <scanpath>   full build
    check-dt <config>         print the step-size criteria
    bench <config>            single-layer explicit-kernel throughput
    convergence               two-layer single-track step study
    oracle                    dense vs. matrix-free kernel cross-check
"""

import argparse
import os
import sys
import time as _time

import numpy as np


def _add_common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker lanes recorded in metrics and handed to the "
                        "BLAS thread pool when available")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="bitwise-reproducible scatter order")
    p.add_argument("--output-dir", default=None)


def _build_parser():
    ap = argparse.ArgumentParser(prog="scantherm",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run a build plan")
    p.add_argument("config")
    p.add_argument("scanpath")
    p.add_argument("--snapshot-every", default=None,
                   help="'layer' or a scan-step count")
    p.add_argument("--resume", default=None,
                   help="checkpoint.npz from a previous run's output dir")
    _add_common(p)

    p = sub.add_parser("check-dt", help="print step-size criteria")
    p.add_argument("config")
    _add_common(p)

    p = sub.add_parser("bench", help="explicit kernel throughput")
    p.add_argument("config")
    p.add_argument("--steps", type=int, default=50)
    _add_common(p)

    p = sub.add_parser("convergence",
                       help="single-track temporal convergence study")
    p.add_argument("--levels", type=int, default=3,
                   help="number of step halvings to compare")
    p.add_argument("--refine", type=int, default=0,
                   help="mesh refinement of the scenario (cells per layer "
                        "= 2^refine)")
    _add_common(p)

    p = sub.add_parser("oracle",
                       help="matrix-free kernels vs. dense assembly")
    p.add_argument("--tol", type=float, default=1e-10)
    _add_common(p)
    return ap


def _apply_common(args, settings):
    if args.threads is not None:
        settings.threads = args.threads
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            pass
    if args.deterministic is not None:
        settings.deterministic = args.deterministic


def _load_plan(args, need_path=False):
    from .io.config import parse_config
    from .io.scanpath import parse_scanpath

    with open(args.config) as fh:
        plan, _, _, settings = parse_config(fh.read())
    _apply_common(args, settings)
    if need_path:
        with open(args.scanpath) as fh:
            plan.path = parse_scanpath(fh.read())
    return plan


def _cmd_run(args):
    from .driver import run_build, write_metrics
    from .io.metrics import build_metrics, report_metrics
    from .io.vtu import write_vtu

    plan = _load_plan(args, need_path=True)
    every = args.snapshot_every
    if every is not None and every != "layer":
        every = int(every)

    def progress(r):
        print(f"layer {r.layer_index:4d}  cells {r.n_cells:7d}  "
              f"dofs {r.n_dofs:7d}  dt {r.dt_used:.3e}  "
              f"steps {r.scan_steps}+{r.cooldown_steps}  "
              f"Tmax {r.t_max_seen:7.1f} K", flush=True)

    t0 = _time.perf_counter()
    res = run_build(plan, output_dir=args.output_dir, snapshot_every=every,
                    resume=args.resume, progress=progress)
    wall = _time.perf_counter() - t0
    metrics = build_metrics(res.layers, res.state, plan.settings, wall)
    text = report_metrics(metrics)
    print()
    print(text, end="")
    print(f"part: {len(res.part.rows)} cells, "
          f"{res.part.volume_m3 * 1e9:.4f} mm^3, "
          f"{res.part.n_components} component(s)")
    if args.output_dir:
        with open(os.path.join(args.output_dir, "metrics.csv"), "w") as fh:
            fh.write(text)
        write_metrics(os.path.join(args.output_dir, "metrics.json"),
                      res.layers, res.state, plan.settings)
        st = res.state
        write_vtu(os.path.join(args.output_dir, "final.vtu"), st.forest,
                  st.dofmap, st.T, st.history, plan.params.material,
                  time=st.time)
    return 0


def _first_layer_state(plan):
    from .driver import initialize_state, _advance_mesh

    state = initialize_state(plan)
    _advance_mesh(state, plan, 0)
    return state


def _cmd_check_dt(args):
    from .timestepping import compute_step_criteria

    plan = _load_plan(args)
    state = _first_layer_state(plan)
    crit = compute_step_criteria(state.op, plan.settings)
    print(f"n_cells      {int(state.forest.active.sum())}")
    print(f"n_dofs       {state.dofmap.n_dofs}")
    print(f"dt_stability {crit.dt_stability:.6e} s")
    print(f"dt_accuracy  {crit.dt_accuracy:.6e} s")
    print(f"safety       {crit.safety}")
    print(f"dt_used      {crit.dt_used:.6e} s")
    return 0


def _cmd_bench(args):
    from .physics import BeamState
    from .timestepping import compute_step_criteria

    plan = _load_plan(args)
    state = _first_layer_state(plan)
    crit = compute_step_criteria(state.op, plan.settings)
    geom = plan.geometry
    fp = geom.footprints[0].astype(float) * plan.params.mesh.h_fine
    center = np.array([fp[0, [0, 2]].mean(), fp[0, [1, 3]].mean()])
    beam = BeamState(center, plan.params.mesh.h_powder,
                     plan.params.laser.power, True)
    T = state.T.copy()
    state.op.explicit_fused_step(T, crit.dt_used, state.history.r_c, beam)
    t0 = _time.perf_counter()
    for _ in range(args.steps):
        T = state.op.explicit_fused_step(T, crit.dt_used,
                                         state.history.r_c, beam)
    per_step = (_time.perf_counter() - t0) / args.steps
    n = state.dofmap.n_dofs
    thr = n / (per_step * plan.settings.threads)
    print(f"n_dofs          {n}")
    print(f"steps timed     {args.steps}")
    print(f"mean step time  {per_step:.6e} s")
    print(f"throughput      {thr:.4e} DoF/s/core "
          f"({plan.settings.threads} worker(s))")
    return 0


def _cmd_convergence(args):
    from .driver import single_track_plan, initialize_state, _advance_mesh
    from .mesh import sample_field
    from .timestepping import run_scan_phase, run_cooldown_phase

    probe = np.array([[0.5e-3, 0.0, 0.04e-3]])  # mid-track, top of layer 0
    dt0 = None
    traces = []
    for j in range(args.levels):
        plan = single_track_plan(refine=args.refine)
        plan.dt_ref /= 2 ** j
        plan.settings.dt_implicit /= 2 ** j
        plan.settings.explicit_cooldown_steps *= 2 ** j
        if args.threads is not None or args.deterministic is not None:
            _apply_common(args, plan.settings)
        if dt0 is None:
            dt0 = plan.dt_ref * 2 ** j  # base level step
        state = initialize_state(plan)
        rows = []

        def record(state, step, tau, t0=0.0):
            rows.append((t0 + tau,
                         float(sample_field(state.forest, state.dofmap,
                                            state.T, probe)[0])))

        t_start = 0.0
        for lp in plan.path.layers:
            while state.forest.current_layer < lp.layer_index:
                _advance_mesh(state, plan, state.forest.current_layer + 1)
            base = state.time
            run_scan_phase(state, lp, plan.dt_ref,
                           on_step=lambda s, k, tau: record(s, k, tau, base))
            base2 = state.time
            run_cooldown_phase(state, lp, plan.dt_ref, plan.settings,
                               on_step=lambda s, k, tau: record(s, k, tau, base2))
            t_start += lp.duration()
        traces.append((plan.dt_ref, rows))
        print(f"level {j}: dt {plan.dt_ref:.3e} s, {len(rows)} samples, "
              f"T_probe final {rows[-1][1]:.3f} K", flush=True)
        if args.output_dir:
            os.makedirs(args.output_dir, exist_ok=True)
            fn = os.path.join(args.output_dir, f"trace_level{j}.csv")
            with open(fn, "w") as fh:
                fh.write("time_s,T_probe_K\n")
                for t, v in rows:
                    fh.write(f"{t:.9e},{v:.9e}\n")

    print()
    print("pair,dt_fine_s,max_abs_diff_K,ratio_vs_previous")
    prev = None
    for j in range(1, args.levels):
        a = dict((round(t, 12), v) for t, v in traces[j - 1][1])
        b = dict((round(t, 12), v) for t, v in traces[j][1])
        common = sorted(set(a) & set(b))
        d = max(abs(a[t] - b[t]) for t in common)
        ratio = "" if prev is None else f"{prev / d:.3f}"
        print(f"{j - 1}-{j},{traces[j][0]:.3e},{d:.6e},{ratio}")
        prev = d
    return 0


def _cmd_oracle(args):
    from .verification import oracle_report

    report = oracle_report()
    worst = 0.0
    for name, err in report.items():
        flag = "ok" if err <= args.tol else "FAIL"
        print(f"{name:28s} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"tolerance {args.tol:.1e}: "
          f"{'all kernels match' if worst <= args.tol else 'MISMATCH'}")
    return 0 if worst <= args.tol else 1


def main(argv=None):
    args = _build_parser().parse_args(argv)
    cmd = {
        "run": _cmd_run,
        "check-dt": _cmd_check_dt,
        "bench": _cmd_bench,
        "convergence": _cmd_convergence,
        "oracle": _cmd_oracle,
    }[args.cmd]
    return cmd(args)


if __name__ == "__main__":
    sys.exit(main())
