"""Parameter containers and validation for the thermal build simulator.

All quantities are SI (m, s, kg, K, W).  The containers are plain
dataclasses; validation happens once in ``validate()`` so that partially
constructed objects can still be built programmatically in tests.
"""

from dataclasses import dataclass, field, fields

STEFAN_BOLTZMANN = 5.670374419e-8  # W/m^2/K^4


class ConfigError(ValueError):
    """Raised when a parameter set violates a structural requirement."""


@dataclass
class MaterialParams:
    """Phase-wise constant material data of the consolidation model."""

    k_p: float = 0.2      # conductivity, powder (W/m/K)
    k_m: float = 20.0     # conductivity, melt
    k_s: float = 20.0     # conductivity, solid
    rho: float = 7430.0   # density (kg/m^3)
    c: float = 965.0      # specific heat (J/kg/K)
    T_s: float = 1500.0   # solidus (K)
    T_l: float = 1900.0   # liquidus (K)

    def validate(self):
        if not (self.T_s < self.T_l):
            raise ConfigError("solidus must lie below liquidus")
        for f in fields(self):
            if getattr(self, f.name) <= 0.0:
                raise ConfigError(f"material parameter {f.name} must be positive")


@dataclass
class BoundaryParams:
    """Radiation and evaporation constants for the exposed top surface."""

    emissivity: float = 0.7
    sigma_s: float = STEFAN_BOLTZMANN
    T_inf: float = 303.0       # ambient / base plate temperature (K)
    T_v: float = 3000.0        # boiling temperature (K)
    C_P: float = 54e3          # recoil pressure constant (Pa)
    C_T: float = 50e3          # recoil temperature constant (K)
    C_M: float = 1e-3          # mass flux constant (K s^2/m^2)
    h_v: float = 6.0e6         # latent heat of evaporation (J/kg)
    T_h0: float = 663.0        # enthalpy reference temperature (K)
    T_max_offset: float = 1000.0  # clamp [T] at T_v + offset

    @property
    def T_max(self) -> float:
        return self.T_v + self.T_max_offset

    def validate(self):
        if not (0.0 <= self.emissivity <= 1.0):
            raise ConfigError("emissivity must lie in [0, 1]")
        if self.T_max <= self.T_v:
            raise ConfigError("evaporation clamp must exceed boiling temperature")


@dataclass
class HeatSourceParams:
    """Effective cylindrical beam model."""

    radius: float = 50e-6     # effective beam radius R (m)
    h_powder: float = 40e-6   # powder layer thickness (m)
    power: float = 100.0      # default effective power W_eff (W)
    scan_velocity: float = 1.0  # default scan speed (m/s)
    cutoff_radii: float = 4.0   # skip cells farther than cutoff_radii * R

    def validate(self):
        if self.radius <= 0.0 or self.h_powder <= 0.0:
            raise ConfigError("beam radius and layer thickness must be positive")
        if self.power < 0.0:
            raise ConfigError("effective power must be nonnegative")


@dataclass
class MeshParams:
    """Voxel forest geometry controls.

    ``h_coarse`` must equal ``2**n_refine * h_powder`` exactly in floating
    point; the finest cells then match the powder layer height times
    ``1/cells_per_layer``.
    """

    h_coarse: float = 0.64e-3
    n_refine: int = 4
    h_powder: float = 40e-6
    cells_per_layer: int = 1
    dirichlet_bottom: bool = True

    @property
    def h_fine(self) -> float:
        return self.h_powder / self.cells_per_layer

    @property
    def total_depth(self) -> int:
        extra = self.cells_per_layer.bit_length() - 1
        return self.n_refine + extra

    def validate(self):
        if self.n_refine < 0:
            raise ConfigError("n_refine must be >= 0")
        cpl = self.cells_per_layer
        if cpl < 1 or (cpl & (cpl - 1)) != 0:
            raise ConfigError("cells_per_layer must be a power of two")
        if self.h_coarse != (2 ** self.n_refine) * self.h_powder:
            raise ConfigError(
                "h_coarse must equal 2^n_refine * h_powder exactly "
                f"(got {self.h_coarse!r} vs {(2 ** self.n_refine) * self.h_powder!r})"
            )


@dataclass
class SolverSettings:
    """Tolerances and schedule knobs for the two time integrators."""

    newton_tol: float = 1e-8
    newton_abs_tol: float = 1e-14
    newton_max_iter: int = 25
    krylov_tol: float = 1e-10
    krylov_max_iter: int = 2000
    preconditioner: str = "diagonal"  # none | diagonal | probed_ilu
    explicit_cooldown_steps: int = 1000
    dt_implicit: float = 2e-2
    safety_factor: float = 0.4
    n_lanes: int = 8
    threads: int = 1
    deterministic: bool = True

    def validate(self):
        if self.newton_tol <= 0.0 or self.krylov_tol <= 0.0:
            raise ConfigError("solver tolerances must be positive")
        if self.preconditioner not in ("none", "diagonal", "probed_ilu"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if self.n_lanes not in (1, 2, 4, 8):
            raise ConfigError("n_lanes must be one of 1, 2, 4, 8")
        if not (0.0 < self.safety_factor <= 1.0):
            raise ConfigError("safety_factor must lie in (0, 1]")
        if self.dt_implicit <= 0.0:
            raise ConfigError("dt_implicit must be positive")


@dataclass
class ProcessParams:
    """Everything the operators need, bundled."""

    material: MaterialParams = field(default_factory=MaterialParams)
    boundary: BoundaryParams = field(default_factory=BoundaryParams)
    laser: HeatSourceParams = field(default_factory=HeatSourceParams)
    mesh: MeshParams = field(default_factory=MeshParams)
    T_0: float = 303.0  # initial temperature of every new degree of freedom

    def validate(self):
        self.material.validate()
        self.boundary.validate()
        self.laser.validate()
        self.mesh.validate()
        if self.laser.h_powder != self.mesh.h_powder:
            raise ConfigError("beam slab thickness and mesh layer height disagree")
        return self
