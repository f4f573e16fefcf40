"""Scan-resolved thermal simulation of powder-bed fusion builds."""

__version__ = "0.1.0"

from .params import (
    MaterialParams,
    BoundaryParams,
    HeatSourceParams,
    MeshParams,
    SolverSettings,
    ProcessParams,
    ConfigError,
    STEFAN_BOLTZMANN,
)
from .material import HistoryField
from .physics import (Segment, LayerPath, ScanPath, BeamState,
                      ScheduleError, beam_state, layer_beam_state)
from .mesh import (
    PartGeometry,
    Forest,
    DofMap,
    NodalField,
    build_coarse_grid,
    build_dofmap,
    advance_layer,
    apply_update,
    initial_history,
    build_batches,
    interface_faces,
    sample_field,
)
from .operators import ThermalOperator, close_constraints
from .timestepping import (
    InstabilityError,
    StepCriteria,
    SimulationState,
    compute_step_criteria,
    krylov_solve,
    run_scan_phase,
    run_cooldown_phase,
)
from .driver import (
    BuildPlan,
    BuildResult,
    PartShape,
    generate_hatch,
    hatch_path,
    initialize_state,
    run_build,
    extract_part_shape,
    probe_temperature,
    single_track_plan,
)
