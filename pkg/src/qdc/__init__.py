"""Sampling-based optimal control of open quantum systems."""

from .qcore import (
    DensityMatrix,
    NoiseMatrix,
    OperatorMatrix,
    OperatorSet,
    QuantumState,
    basis_state,
    dissipator_apply,
    fidelity,
    integrate_lindblad,
    pauli_operator,
    tensor_chain,
    trace_distance,
)
from .gauge import (
    GaugeTransform,
    UnravelingSpec,
    dissipator_invariance_gap,
    nmr_transform,
    spin_chain_transform,
    transform_dissipators,
)
from .sse import (
    LinearSSE,
    NoisePath,
    TimeGrid,
    Trajectory,
    TrajectoryBatch,
    batch_noise,
    make_linear_sse,
    sample_noise,
    simulate_batch,
    simulate_batch_nonlinear,
    simulate_trajectory,
    step_linear,
    step_nonlinear,
)
from .picontrol import (
    AnnealSchedule,
    BasisSet,
    ControlSchedule,
    CostSpec,
    ISConfig,
    ISRun,
    NumericalAbort,
    anneal_value,
    batch_evaluate,
    cost_to_go_estimate,
    fluence,
    is_update_basis,
    is_update_piecewise,
    optimize,
    path_cost,
    pi_lambda,
    robustness_probe,
    smooth_window,
    spline_smooth,
    weights_and_ess,
)
from .grape import (
    GrapeState,
    BENCHMARK_SEED_FAMILIES,
    deterministic_cost_fn,
    forward_backward,
    grape_gradient,
    grape_optimize,
    lindblad_cost,
    seed_schedules,
)
from .problems import (
    NmrParams,
    ProblemBundle,
    build_nmr,
    build_noisy_qubit,
    build_spin_chain,
    ghz_state,
    ghz_target_rotating,
    haar_random_state,
    plus_state,
    rotating_frame_controls,
    unitary_transfer_eval,
    y_state,
)

__version__ = "0.1.0"
