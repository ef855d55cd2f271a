"""Token pseudo-markets for one-sided assignment.

Unit-demand VCG with weighted utilities, a strictly concave regularized
variant, equilibrium search and certification for pseudo-market prices, and a
repeated-game simulator with token budgets and regret auditing.
"""

from .assignment import (
    Assignment,
    AssignmentError,
    DualCertificate,
    VcgOutcome,
    birkhoff_decompose,
    check_bistochastic,
    externality_payments,
    normalize_rows,
    opt_with_capacities,
    permutation_matrix,
    reconstruct,
    solve_assignment,
    vcg_outcome,
    vcg_prices,
)
from .equilibrium import (
    EnvyReport,
    EquilibriumCertificate,
    HzSolution,
    InfeasibleBudget,
    SmoothedEvaluation,
    best_affordable_bundle,
    certify_solution,
    envy_check,
    expected_vcg_payments,
    find_hz_equilibrium,
    lambda_max,
    psi_step,
    verify_ce,
)
from .regularized import (
    ConvergenceError,
    EtaBound,
    RegularizationError,
    RegularizedOptimum,
    RegularizerParams,
    best_response,
    eta_bound,
    minimize_eta,
    quadratic_price,
    regularized_optimum,
    regularized_payment,
    regularized_payments,
)
from .simulation import (
    EXACT,
    REGULARIZED,
    AggregateReport,
    ConfigError,
    RegretReport,
    RoundRecord,
    ScenarioConfig,
    SimulationTrace,
    StrategySpec,
    aggregate_and_verify,
    audit_strong_regret,
    counterfactual_round,
    mutual_best_responses,
    run_simulation,
)

__version__ = "0.1.0"
