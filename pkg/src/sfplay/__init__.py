"""Stochastic fictitious play in supermodular games.

Normal-form games and the tail-sum order (``games``), logit best responses
(``response``), the deterministic flow and its equilibria (``flow``),
stochastic approximation simulators (``stochastic``) and Monte-Carlo
experiments (``analysis``).
"""

from .errors import (
    ContractViolation,
    DivergenceError,
    DomainError,
    ExperimentError,
    InsufficientSamplesError,
    NonConvergenceError,
    PreconditionError,
    SfplayError,
    StructuralError,
    TimeRangeError,
)
from .games import (
    Game,
    MixedProfile,
    TImage,
    coordination_game,
    expected_payoff,
    is_supermodular,
    marginal_payoff_vector,
    matching_pennies,
    t_inverse,
    t_leq,
    t_operator,
)
from .response import BestResponseField, CustomChoice, Logit, logit
from .flow import (
    EquilibriumReport,
    FieldHandle,
    FlowOptions,
    Stability,
    check_cooperative_irreducible,
    check_strong_monotonicity,
    classify_stability,
    enumerate_pne,
    find_pne,
    flow,
)
from .stochastic import (
    NoiseRecord,
    OmegaRate,
    StepSchedule,
    Trajectory,
    apt_distance,
    interpolate,
    noise_stats,
    omega_bound,
    run_diffusion,
    run_robbins_monro,
    run_sfp,
)
from .analysis import (
    ExperimentConfig,
    RunVerdict,
    convergence_experiment,
    detect_limit,
    nonconvergence_experiment,
    order_experiment,
)

__version__ = "0.1.0"
