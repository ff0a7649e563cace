"""Seedable simulator and bound toolkit for decentralized federated learning
over unreliable wireless links.

The update loop alternates local gradient steps with gossip averaging over a
device graph; channels inject packet erasures or analog receiver noise; the
analysis layer evaluates the closed-form optimality-gap bounds and verifies
them by Monte Carlo against the simulator.
"""
from .allocator import (
    AllocationResult,
    Budget,
    EmpiricalAllocation,
    GridSearchResult,
    allocate_budget,
    empirical_allocate,
    grid_search_allocate,
)
from .analysis import (
    BoundInputs,
    BoundReport,
    analog_gap_bound,
    check_digital_gap_bound_empirical,
    check_masked_product_deviation,
    check_masked_product_norm,
    check_noise_norm,
    compare_transports,
    communication_complexity,
    convergence_probability,
    digital_gap_bound,
    fading_penalty_bound,
    max_tolerable_noise,
    min_correct_probability,
    min_rounds_for_convergence,
    mixing_frob2_from,
)
from .channels import (
    AnalogChannel,
    DeepFadeError,
    DigitalChannel,
    Fading,
    analog_pack,
    analog_transmit,
    analog_unpack,
    gossip_analog,
    gossip_digital,
    gossip_ideal,
    mask_digital,
    sigma_n_from_dbm,
)
from .engine import (
    ConvergenceStats,
    GraphSpec,
    InfeasibleConfigError,
    MonteCarloResult,
    RunConfig,
    RunMetrics,
    Stopping,
    budget_rounds,
    materialize,
    rounds_to_threshold,
    run_dfl,
    run_monte_carlo,
    sweep,
)
from .learners import (
    ConstantEstimates,
    DivergenceError,
    LearningSchedule,
    NoCertificateError,
    OptimumCertificate,
    Problem,
    ProblemKind,
    ProblemSpec,
    ScheduleRule,
    SeparableDataError,
    estimate_constants,
    global_gradient,
    global_loss,
    local_gradient,
    local_loss,
    local_train,
    make_isotropic_quadratic,
    make_logistic,
    make_mlp_softmax,
    make_quadratic,
    partition_data,
    solve_optimum,
)
from .topology import (
    Graph,
    MixingMatrix,
    MixingScheme,
    PowerIterationError,
    SpectralReport,
    Topology,
    beta_bar,
    build_graph,
    build_mixing_matrix,
    lambda2,
    mixing_power,
    spectral_report,
)

__version__ = "0.1.0"
