"""Feature-based belief aggregation with rollout for POMDPs."""

from .aggregation import (
    AggregateMdp,
    BasePolicyBundle,
    EpsilonReport,
    FeatureSpace,
    OracleCost,
    RepresentativeBeliefSet,
    base_policy_and_cost,
    belief_grid_2,
    build_aggregate_mdp,
    disaggregate,
    enumerate_representatives,
    epsilon_and_bound,
    feature_belief,
    oracle_cost_function,
    partition_diameters,
    phi_map,
    solve_aggregation,
    value_iteration,
)
from .errors import (
    AggRolloutError,
    BudgetExceeded,
    CapacityExceeded,
    ConfigError,
    MetricUndefined,
    NonConvergence,
    ZeroLikelihood,
)
from .experiments import AdaptationRecord, ExperimentConfig, adaptation_metric
from .particle import ParticleFilter, ParticleSet, pf_belief, pf_init, pf_update, systematic_resample
from .pomdp import (
    DenseModel,
    PomdpModel,
    belief_update_exact,
    load_model,
    point_belief,
    save_model,
    simulate_policy,
    uniform_belief,
    validate_belief,
)
from .recovery import (
    RecoveryModel,
    RecoveryParams,
    ScenarioSwitch,
    SwitchedModels,
    apply_scenario_switch,
    betabin_pmf,
    build_recovery_pomdp,
    zone_feature_space,
)
from .rollout import (
    DecisionReport,
    RolloutConfig,
    RolloutPlanner,
    rollout_control,
    rollout_cost_to_go,
    rollout_decision,
    run_episodes,
    verify_policy_improvement,
)
from .simplex import composition_count, enumerate_compositions, nearest_compositions

__version__ = "0.1.0"
