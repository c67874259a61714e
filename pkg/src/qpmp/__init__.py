"""Pontryagin-style optimal control for Lindblad open quantum systems.

Switching functions (terminal-cost gradients) from deterministic
density-matrix propagation or from correlated quantum-jump trajectories,
plus a projected, TV-filtered gradient optimizer over piecewise-constant
controls.
"""

from .problems import (
    ControlSchedule,
    ProblemSpec,
    bloch_vector,
    constant_control,
    control_to_csv,
    load_problem,
    make_preparation_problem,
    make_retention_problem,
    read_control_csv,
    save_problem,
    step_control,
    zero_control,
)
from .lindblad import (
    OperatorPath,
    SwitchingCurve,
    bang_from_phi,
    c_hamiltonian,
    conserved_pairing,
    cost_of_control,
    finite_difference_curve,
    finite_difference_gradient,
    liouvillian,
    propagate_costate,
    propagate_rho,
    switching_function,
    terminal_cost,
)
from .trajectories import (
    EnsembleStats,
    JumpRealization,
    PathEstimate,
    StatePath,
    SwitchingEstimate,
    TrajectoryPair,
    backward_pi,
    bilinear_average,
    correlated_estimates,
    correlated_pair,
    estimate_lambda,
    estimate_rho,
    forward_psi,
    realization_from_string,
    realization_to_string,
    sample_initial_state,
    sample_jump_process,
    stochastic_cost,
    switching_procedure1,
    switching_procedure2,
)
from .optimizer import (
    FilterParams,
    IterationRecord,
    SampleSchedule,
    deterministic_provider,
    gradient_step,
    optimize,
    polish_control,
    project_controls,
    reference_control,
    refine_control,
    stochastic_provider,
    tv_denoise,
)

__version__ = "0.1.0"
