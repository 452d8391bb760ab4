"""Spin-dynamics toolkit for long-lived singlet-pair states in AA'XX' systems."""

from .analysis import (
    DecayCurve,
    FitResult,
    contrast,
    eigenmode_rate,
    enhancement_factor,
    fit_buildup,
    fit_exponential,
    fit_inversion_recovery,
    thermal_polarization,
)
from .calibration import CalibrationError, calibrate_binding, calibrate_relaxation
from .relaxation import (
    BindingModel,
    RelaxationModel,
    assemble_liouvillian,
    decoherence_free_subspace,
    dipolar_redfield_superoperator,
    liouvillian,
    random_field_superoperator,
)
from .seqlang import Scenario, SourceError, parse_sequence, parse_system, read_curve, write_curve
from .sequences import (
    SequenceProgram,
    compute_m2s_timings,
    inversion_recovery_program,
    optimize_timings,
    run_sequence,
    singlet_locking_program,
)
from .spin import (
    DensityState,
    SpinSystem,
    coherent_hamiltonian,
    pcba_system,
    singlet_pair_state,
    thermal_state,
)

__version__ = "0.1.0"
