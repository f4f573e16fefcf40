"""Time integration: explicit scan phase, explicit/implicit cool-down.

The scan is integrated with lumped-capacity forward Euler at a step set
by the smaller of a spectral stability estimate and a beam-residency
accuracy bound.  Cool-down starts explicit and hands over to backward
Euler with a matrix-free Newton-Krylov solver once the fast transients
have decayed; the radiating/evaporating boundary term is frozen at the
step start so the implicit system stays symmetric apart from the small
conductivity-derivative coupling.
"""

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .physics import layer_beam_state, BeamState


class InstabilityError(RuntimeError):
    """Raised when the explicit integration diverges."""

    def __init__(self, step, t, dt, t_extreme):
        self.step = step
        self.t = t
        self.dt = dt
        self.t_extreme = t_extreme
        super().__init__(
            f"explicit step diverged at step {step} (t = {t:.6g} s, "
            f"dt = {dt:.3g} s): temperature reached {t_extreme:.3g} K; "
            f"dt exceeds the stability bound of the current mesh")


@dataclass
class StepCriteria:
    """Explicit step bounds; the step actually used applies the safety
    factor to the binding criterion."""

    dt_stability: float    # 2 / rho(Cinv K) at the stiffest admissible state
    dt_accuracy: float     # beam residency R / v
    safety: float

    @property
    def dt_used(self):
        return self.safety * min(self.dt_stability, self.dt_accuracy)


def estimate_spectral_radius(apply_fn, n, seed=0, tol=1e-9, max_iter=500):
    """Largest eigenvalue magnitude of a linear operator by power
    iteration.  Returns the larger of the last two Rayleigh quotients,
    which bounds the limit from above for the symmetric operators used
    here and keeps the stability estimate conservative."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    lam = 0.0
    for _ in range(max_iter):
        w = apply_fn(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam_prev, lam = lam, float(np.dot(v, w))
        v = w / nw
        if abs(lam - lam_prev) <= tol * abs(lam):
            break
    return max(abs(lam), abs(lam_prev))


def compute_step_criteria(op, settings=None) -> StepCriteria:
    """Stability and accuracy step bounds for the operator's mesh.

    The spectral radius is taken at the stiffest admissible material
    state: fully consolidated with the larger of the melt/solid
    conductivities, so the bound holds throughout the scan.
    """
    settings = settings or op.settings
    mat = op.params.material
    k_frozen = max(mat.k_m, mat.k_s)
    dm = op.dofmap
    cinv = op.capacity_inverse()

    def apply(v):
        vd = v.copy()
        dm.distribute(vd)
        vd[dm.is_dirichlet] = 0.0
        w = -op.evaluate_rhs(vd, None, None, faces=False, source=False,
                             frozen_k=k_frozen)
        w *= cinv
        w[dm.is_dirichlet] = 0.0
        w[dm.is_slave] = 0.0
        return w

    rho = estimate_spectral_radius(apply, dm.n_vertices)
    hs = op.params.laser
    return StepCriteria(dt_stability=2.0 / rho,
                        dt_accuracy=hs.radius / hs.scan_velocity,
                        safety=settings.safety_factor)


def krylov_solve(apply_fn, b, diag_inv=None, tol=1e-10, max_iter=2000, x0=None):
    """Preconditioned conjugate gradients for J x = b.

    diag_inv is the inverse preconditioner diagonal (or None for plain
    CG).  Returns (x, iterations, converged) with convergence measured
    against tol * ||b||.
    """
    n = len(b)
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - apply_fn(x) if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, True
    if np.linalg.norm(r) <= tol * bnorm:  # warm start already converged
        return x, 0, True
    z = r * diag_inv if diag_inv is not None else r.copy()
    p = z.copy()
    rz = float(np.dot(r, z))
    for it in range(1, max_iter + 1):
        Ap = apply_fn(p)
        alpha = rz / float(np.dot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it, True
        z = r * diag_inv if diag_inv is not None else r.copy()
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, False


def probed_ilu_preconditioner(op, T_lin, r_c, dt):
    """Column-probed sparse Jacobian factored with an incomplete LU.

    Reconstructing the matrix costs one operator application per
    unknown, so this is only admissible on small systems.
    """
    from scipy.sparse import csc_matrix
    from scipy.sparse.linalg import spilu

    n = op.dofmap.n_vertices
    if n > 2000:
        raise ValueError("probed preconditioner limited to 2000 vertices")
    tangent = op._tangent_fields(T_lin, r_c)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(op.apply_jacobian(e, T_lin, r_c, dt, tangent=tangent))
    A = csc_matrix(np.column_stack(cols))
    ilu = spilu(A, drop_tol=1e-6, fill_factor=10)
    return ilu.solve


@dataclass
class PhaseStats:
    """Bookkeeping of one integration phase."""

    n_steps: int = 0
    dt: float = 0.0
    wall_time: float = 0.0
    t_max_seen: float = 0.0
    newton_iters: int = 0
    krylov_iters: int = 0
    dt_retries: int = 0


@dataclass
class SimulationState:
    """Everything that evolves during a build."""

    forest: object
    dofmap: object
    op: object
    T: np.ndarray
    history: object
    time: float = 0.0
    phase_seconds: dict = field(default_factory=dict)

    def charge(self, phase, seconds):
        self.phase_seconds[phase] = self.phase_seconds.get(phase, 0.0) + seconds


_T_DIVERGED = 1.0e7  # far above any physical temperature in the model


def _check_stable(T, step, t, dt):
    m = float(np.max(np.abs(T)))
    if not np.isfinite(m) or m > _T_DIVERGED:
        raise InstabilityError(step, t, dt, m)


def run_scan_phase(state: SimulationState, layer_path, dt,
                   on_step=None) -> PhaseStats:
    """Integrate one layer's scan with forward Euler at the given step.

    The final step is clipped to land exactly on the scan end time.  The
    consolidation history advances after every accepted step from the
    new temperatures.  ``on_step(state, step)`` runs after each accepted
    step (snapshot hooks).
    """
    op = state.op
    stats = PhaseStats(dt=dt)
    t0 = _time.perf_counter()
    duration = layer_path.scan_duration()
    # step count fixed up front; elapsed time is step * dt (a single
    # rounding) so no dust accumulates over long phases
    n_steps = max(0, math.ceil(duration / dt - 1e-9))
    for step in range(1, n_steps + 1):
        tau = (step - 1) * dt
        dt_step = min(dt, duration - tau)
        beam = layer_beam_state(layer_path, tau)
        state.T = op.explicit_fused_step(state.T, dt_step, state.history.r_c,
                                         beam)
        _check_stable(state.T, step, state.time + tau, dt_step)
        op.update_history(state.history, state.T)
        stats.t_max_seen = max(stats.t_max_seen, float(state.T.max()))
        if on_step is not None:
            on_step(state, step, min(step * dt, duration))
    state.time += duration
    stats.n_steps = n_steps
    stats.wall_time = _time.perf_counter() - t0
    state.charge("scan", stats.wall_time)
    return stats


def _implicit_step(state, dt, settings):
    """One backward Euler step; returns (T_new, newton_iters, krylov_iters)
    or None when Newton failed to converge."""
    op = state.op
    dm = op.dofmap
    T_n = state.T
    r_c = state.history.r_c
    # boundary flux frozen at the step start
    f_re = op.evaluate_rhs(T_n, r_c, None, diffusion=False, source=False)

    T = T_n.copy()
    norm0 = None
    n_newton = 0
    n_krylov = 0
    for _ in range(settings.newton_max_iter):
        f = op.evaluate_rhs(T, r_c, None, faces=False, source=False) + f_re
        r = op.apply_mass(T - T_n) / dt - f
        r[dm.is_dirichlet] = 0.0
        r[dm.is_slave] = 0.0
        norm = float(np.linalg.norm(r))
        if norm0 is None:
            norm0 = norm
        if norm <= settings.newton_abs_tol or norm <= settings.newton_tol * norm0:
            return T, n_newton, n_krylov

        tangent = op._tangent_fields(T, r_c)
        if settings.preconditioner == "diagonal":
            di = 1.0 / op.jacobian_diagonal(T, r_c, dt, tangent=tangent)
            solve_pre = None
        elif settings.preconditioner == "probed_ilu":
            di = None
            solve_pre = probed_ilu_preconditioner(op, T, r_c, dt)
        else:
            di = None
            solve_pre = None

        def apply(v):
            return op.apply_jacobian(v, T, r_c, dt, tangent=tangent)

        if solve_pre is not None:
            # run CG with the ILU as a callable preconditioner
            delta, it, ok = _pcg_callable(apply, -r, solve_pre,
                                          settings.krylov_tol,
                                          settings.krylov_max_iter)
        else:
            delta, it, ok = krylov_solve(apply, -r, di,
                                         settings.krylov_tol,
                                         settings.krylov_max_iter)
        n_krylov += it
        if not ok:
            return None
        T = T + delta
        dm.distribute(T)
        n_newton += 1
    return None


def _pcg_callable(apply_fn, b, precond, tol, max_iter):
    """CG with a callable preconditioner (used by the probed ILU)."""
    x = np.zeros(len(b))
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0, True
    z = precond(r)
    p = z.copy()
    rz = float(np.dot(r, z))
    for it in range(1, max_iter + 1):
        Ap = apply_fn(p)
        alpha = rz / float(np.dot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it, True
        z = precond(r)
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, False


def run_cooldown_phase(state: SimulationState, layer_path, dt_explicit,
                       settings=None, on_step=None) -> PhaseStats:
    """Integrate one layer's cool-down window.

    A fixed number of explicit steps damps the stiff transients left by
    the scan, then backward Euler strides through the remaining dwell.
    A step whose Newton iteration stalls is retried with a halved step,
    at most three times; the last step is clipped to the window end.
    """
    op = state.op
    settings = settings or op.settings
    stats = PhaseStats(dt=settings.dt_implicit)
    t0 = _time.perf_counter()
    window = layer_path.cool_time
    step = 0

    # explicit pre-phase: elapsed = i * dt, never an accumulated sum, so
    # a long budget cannot dust the window with sub-roundoff remainders
    n_exp = min(settings.explicit_cooldown_steps,
                max(0, math.ceil(window / dt_explicit - 1e-9)))
    for i in range(n_exp):
        dt_step = min(dt_explicit, window - i * dt_explicit)
        state.T = op.explicit_fused_step(state.T, dt_step, state.history.r_c,
                                         None)
        step += 1
        _check_stable(state.T, step, state.time, dt_step)
        op.update_history(state.history, state.T)
        if on_step is not None:
            on_step(state, step, min((i + 1) * dt_explicit, window))

    elapsed = min(n_exp * dt_explicit, window)
    while window - elapsed > 1e-9 * max(settings.dt_implicit, dt_explicit):
        dt_step = min(settings.dt_implicit, window - elapsed)
        attempt = 0
        while True:
            out = _implicit_step(state, dt_step, settings)
            if out is not None:
                break
            attempt += 1
            stats.dt_retries += 1
            if attempt > 3:
                raise RuntimeError(
                    f"implicit cool-down failed to converge at dt = "
                    f"{dt_step:.3g} s after 3 step halvings")
            dt_step /= 2.0
        T_new, n_newton, n_krylov = out
        state.T = T_new
        state.T[op.dofmap.is_dirichlet] = op.params.boundary.T_inf
        elapsed += dt_step
        step += 1
        stats.newton_iters += n_newton
        stats.krylov_iters += n_krylov
        op.update_history(state.history, state.T)
        if on_step is not None:
            on_step(state, step, elapsed)

    state.time += layer_path.cool_time
    stats.n_steps = step
    stats.wall_time = _time.perf_counter() - t0
    state.charge("cooldown", stats.wall_time)
    return stats
