"""Moving cylindrical heat source and top-surface flux models.

The beam follows a time-parametrized polyline of straight tracks per
layer.  Repositioning between tracks is instantaneous with zero power;
during interlayer cool-down the beam is inactive.  The volumetric source
is a Gaussian in the scan plane, uniform over the depth of the current
powder layer.  Radiation and evaporation act on the exposed top surface
and are evaluated lane-wise, like the material law.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Segment",
    "LayerPath",
    "ScanPath",
    "BeamState",
    "beam_state",
    "layer_beam_state",
    "volumetric_source",
    "radiation_flux",
    "evaporation_flux",
]


class ScheduleError(ValueError):
    """Query outside the build schedule."""


@dataclass
class Segment:
    """One straight laser track in the scan plane."""

    x0: float
    y0: float
    x1: float
    y1: float
    v: float       # scan speed (m/s)
    power: float   # effective power W_eff (W)

    @property
    def length(self) -> float:
        return float(np.hypot(self.x1 - self.x0, self.y1 - self.y0))

    @property
    def duration(self) -> float:
        return self.length / self.v

    def validate(self):
        if self.v <= 0.0:
            raise ValueError("scan speed must be positive")
        if self.power < 0.0:
            raise ValueError("power must be nonnegative")


@dataclass
class LayerPath:
    """Scan tracks and dwell of one layer; z is the layer top height."""

    layer_index: int
    z: float
    segments: list = field(default_factory=list)
    cool_time: float = 0.0

    def scan_duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def duration(self) -> float:
        return self.scan_duration() + self.cool_time


@dataclass
class ScanPath:
    layers: list = field(default_factory=list)

    def validate(self):
        last = -1
        for lp in self.layers:
            if lp.layer_index <= last:
                raise ValueError("layer indices must be strictly increasing")
            last = lp.layer_index
            for s in lp.segments:
                s.validate()
        return self

    def total_duration(self) -> float:
        return sum(lp.duration() for lp in self.layers)

    def layer_start(self, i) -> float:
        """Absolute start time of the i-th entry of ``layers``."""
        return sum(lp.duration() for lp in self.layers[:i])


@dataclass
class BeamState:
    position: np.ndarray  # (2,) in-plane position (m)
    z_top: float          # top of the current layer (m)
    power: float
    active: bool

    @staticmethod
    def off(z_top=0.0):
        return BeamState(np.zeros(2), z_top, 0.0, False)


def beam_state(path: ScanPath, t: float) -> BeamState:
    """Beam position/power at absolute schedule time t.

    Segments own their full closed time window; a query exactly at a
    segment end returns the end point, and any later query falls into
    the next segment (or the cool-down, where the beam is off).
    """
    if t < 0.0:
        raise ScheduleError(f"t = {t} before schedule start")
    t_layer = 0.0
    for lp in path.layers:
        t_seg = t_layer
        for seg in lp.segments:
            d = seg.duration
            if t_seg <= t <= t_seg + d:
                s = (t - t_seg) * seg.v
                frac = s / seg.length if seg.length > 0.0 else 0.0
                pos = np.array([seg.x0 + frac * (seg.x1 - seg.x0),
                                seg.y0 + frac * (seg.y1 - seg.y0)])
                return BeamState(pos, lp.z, seg.power, seg.power > 0.0)
            t_seg += d
        t_layer += lp.duration()
        if t <= t_layer:
            return BeamState.off(lp.z)  # cool-down window
    raise ScheduleError(f"t = {t} beyond schedule end {path.total_duration()}")


def layer_beam_state(lp: LayerPath, tau: float) -> BeamState:
    """Beam state at time tau measured from the start of one layer's scan."""
    if tau < 0.0:
        raise ScheduleError(f"tau = {tau} before the layer starts")
    t_seg = 0.0
    for seg in lp.segments:
        d = seg.duration
        if t_seg <= tau <= t_seg + d:
            s = (tau - t_seg) * seg.v
            frac = s / seg.length if seg.length > 0.0 else 0.0
            pos = np.array([seg.x0 + frac * (seg.x1 - seg.x0),
                            seg.y0 + frac * (seg.y1 - seg.y0)])
            return BeamState(pos, lp.z, seg.power, seg.power > 0.0)
        t_seg += d
    if tau <= lp.duration():
        return BeamState.off(lp.z)
    raise ScheduleError(f"tau = {tau} beyond the layer duration {lp.duration()}")


def volumetric_source(points, beam: BeamState, hs) -> np.ndarray:
    """Gaussian-in-plane source (W/m^3) at the given (n, 3) points.

    Uniform over the depth interval [z_top - h_powder, z_top], zero
    outside and zero when the beam is inactive.
    """
    points = np.asarray(points, dtype=np.float64)
    out_shape = points.shape[:-1]
    if not beam.active:
        return np.zeros(out_shape)
    dx = points[..., 0] - beam.position[0]
    dy = points[..., 1] - beam.position[1]
    r2 = dx * dx + dy * dy
    z = points[..., 2]
    in_slab = (z >= beam.z_top - hs.h_powder) & (z <= beam.z_top)
    peak = 2.0 * beam.power / (np.pi * hs.radius * hs.radius * hs.h_powder)
    q = peak * np.exp(-2.0 * r2 / (hs.radius * hs.radius))
    return np.where(in_slab, q, 0.0)


def radiation_flux(T, bp) -> np.ndarray:
    """Outward gray-body flux eps * sigma * (T^4 - T_inf^4).

    Powers are multiplication chains, not np.power, so lane evaluation
    is bit-stable.
    """
    T = np.asarray(T, dtype=np.float64)
    T2 = T * T
    Ti2 = bp.T_inf * bp.T_inf
    return bp.emissivity * bp.sigma_s * (T2 * T2 - Ti2 * Ti2)


def evaporation_flux(T, bp, c) -> np.ndarray:
    """Outward evaporative heat flux, zero at and below boiling.

    The evaluation temperature is clamped at T_max = T_v + offset; the
    flux is the recoil-pressure mass flux times the carried enthalpy
    h_v + c ([T] - T_h0) with the constant specific heat c.
    """
    T = np.asarray(T, dtype=np.float64)
    Tc = np.minimum(T, bp.T_max)
    # the masked-out branch must stay finite even for garbage inputs
    # (e.g. while diagnosing a diverged run), so clamp below as well;
    # physical temperatures are far above 1 K and pass through exactly
    Tc = np.where(Tc < 1.0, 1.0, Tc)
    mdot = 0.82 * bp.C_P * np.exp(-bp.C_T * (1.0 / Tc - 1.0 / bp.T_v)) \
        * np.sqrt(bp.C_M / Tc)
    q = mdot * (bp.h_v + c * (Tc - bp.T_h0))
    return np.where(Tc > bp.T_v, q, 0.0)
