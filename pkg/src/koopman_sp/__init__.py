"""Koopman eigenfunctions of planar slow-fast oscillators and their singular limit."""

from .cycle import (CycleReport, LimitCycle, cycle_report, find_limit_cycle,
                    floquet_exponent_divergence, floquet_exponent_monodromy)
from .exceptions import (CycleNotFoundError, DivergenceError, DomainError, EvaluationError,
                         KoopmanSPError, NoEventError, ProjectionError, RangeError, StiffnessError)
from .fields import Field, GridSpec
from .grid_io import read_csv, sweep, write_csv, write_heatmap
from .model import (ConstrainedState, ManifoldBranch, Region, SlowFastSystem, State, TimeScale,
                    classify_region, eval_vector_field, gamma, project_pi, van_der_pol)
from .ode import IntegratorConfig, Trajectory, flow, flow_many, integrate, integrate_until_section
from .singular import (CONSTANTS, ObservableSample, SingularConstants, SingularPhaseEigenfunction,
                       constrained_flow, fast_subsystem_flow, observable_invariance_check,
                       singular_eigenfunction, singular_flow, slow_eigenfunction, spectrum_check,
                       varphi, varphi_inverse)
from .spectral import (AmplitudeEigenfunction, PhaseEigenfunction, amplitude_at, eigenfunction_grid,
                       finite_difference_field, generator_residual, phase_at)

__version__ = "0.1.0"

__all__ = [
    "AmplitudeEigenfunction", "CONSTANTS", "ConstrainedState", "CycleNotFoundError", "CycleReport",
    "DivergenceError", "DomainError", "EvaluationError", "Field", "GridSpec", "IntegratorConfig",
    "KoopmanSPError", "LimitCycle", "ManifoldBranch", "NoEventError", "ObservableSample",
    "PhaseEigenfunction", "ProjectionError", "RangeError", "Region", "SingularConstants",
    "SingularPhaseEigenfunction", "SlowFastSystem", "State", "StiffnessError", "TimeScale",
    "Trajectory", "amplitude_at", "classify_region", "constrained_flow", "cycle_report",
    "eigenfunction_grid", "eval_vector_field", "fast_subsystem_flow", "finite_difference_field",
    "find_limit_cycle", "floquet_exponent_divergence", "floquet_exponent_monodromy", "flow",
    "flow_many", "gamma", "generator_residual", "integrate", "integrate_until_section",
    "observable_invariance_check", "phase_at", "project_pi", "read_csv", "singular_eigenfunction",
    "singular_flow", "slow_eigenfunction", "spectrum_check", "sweep", "van_der_pol", "varphi",
    "varphi_inverse", "write_csv", "write_heatmap",
]
