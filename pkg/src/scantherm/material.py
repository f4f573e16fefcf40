"""Phase-fraction material law with irreversible consolidation history.

The material point state is the pair (T, r_c) where r_c is the running
maximum of the liquid fraction g(T) over the point's thermal history
(1 for material that starts consolidated, e.g. the base plate).  The
effective conductivity interpolates the powder/melt/solid values with
the current phase fractions.

Everything here is written lane-wise: inputs are numpy arrays of
arbitrary shape ("lanes") and all conditionals go through masked
selection, never python branches.  The selection primitives are chosen
so that each lane reproduces the scalar branching evaluation bit for
bit, which the verification module checks against an independent scalar
reference.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "HistoryField",
    "masked_select",
    "liquid_fraction",
    "update_consolidated",
    "phase_fractions",
    "conductivity",
    "conductivity_derivative",
]


def masked_select(cmp, a, b, t, f):
    """Lane-wise ``t if a cmp b else f`` for cmp in {'<', '>'}.

    Strict comparisons only; lanes where the comparison fails get ``f``.
    Bit-exact to the scalar ternary because np.where copies the selected
    lane unchanged.
    """
    if cmp == "<":
        return np.where(a < b, t, f)
    if cmp == ">":
        return np.where(a > b, t, f)
    raise ValueError(f"unsupported comparison {cmp!r}")


def liquid_fraction(T, params):
    """Liquid fraction g(T): 0 below solidus, 1 above liquidus, linear ramp between.

    The interval masks are strict on both ends; at exactly T_s or T_l the
    ramp value is selected, which coincides with the adjacent constant
    branch (0 at T_s, 1 at T_l), so the function is continuous and
    value-identical to the branching definition.
    """
    T = np.asarray(T, dtype=np.float64)
    ramp = (T - params.T_s) / (params.T_l - params.T_s)
    return masked_select("<", T, params.T_s, 0.0,
                         masked_select(">", T, params.T_l, 1.0, ramp))


def update_consolidated(r_c_old, T, params):
    """Running maximum of the liquid fraction: r_c <- max(r_c, g(T)).

    Irreversible by construction; points that start at r_c = 1 stay there.
    """
    return np.maximum(r_c_old, liquid_fraction(T, params))


def phase_fractions(T, r_c, params):
    """Powder / melt / solid fractions (r_p, r_m, r_s) at the given state.

    r_p = 1 - r_c, r_m = g(T), r_s = r_c - g(T).  The solid fraction is
    clamped at zero lane-wise; with a consistently updated history
    (r_c >= g) the clamp only ever removes negative round-off.
    """
    g = liquid_fraction(T, params)
    r_p = 1.0 - np.asarray(r_c, dtype=np.float64)
    r_s = r_c - g
    r_s = np.where(r_s < 0.0, 0.0, r_s)
    return r_p, g, r_s


def conductivity(T, r_c, params):
    """Effective conductivity k = r_p k_p + r_m k_m + r_s k_s."""
    r_p, r_m, r_s = phase_fractions(T, r_c, params)
    return (r_p * params.k_p + r_m * params.k_m) + r_s * params.k_s


def conductivity_derivative(T, r_c, params):
    """dk/dT at frozen r_c: (k_m - k_s)/(T_l - T_s) strictly inside the
    mushy interval, 0 outside and at both kinks."""
    T = np.asarray(T, dtype=np.float64)
    slope = (params.k_m - params.k_s) / (params.T_l - params.T_s)
    inside = (T > params.T_s) & (T < params.T_l)
    return np.where(inside, slope, 0.0)


@dataclass
class HistoryField:
    """Per-cell, per-quadrature-point consolidation state r_c.

    Shape (n_active_cells, 2, 2, 2) matching the 2x2x2 tensor quadrature;
    epoch ties the layout to a specific mesh generation.
    """

    r_c: np.ndarray
    epoch: int

    def copy(self):
        return HistoryField(self.r_c.copy(), self.epoch)
