"""Event-triggered multi-agent Q-policy toolkit.

Train a joint pursuit policy, measure how far the joint state may drift
before the greedy action goes stale, fit a cheap regression model of that
radius, certify its miss probability from samples, and run the game with
agents that only broadcast their position when the drift exceeds the radius.
"""

from .env import (
    ACTION_DELTAS,
    ACTION_NAMES,
    N_ACTIONS,
    BlockMap,
    EnvConfig,
    EnvError,
    PursuitEnv,
    block_distance,
    sup_distance,
)
from .planner import (
    ArtifactError,
    ConvergenceError,
    PlannerError,
    PolicyTable,
    QTable,
    TrainConfig,
    TrainResult,
    bellman_residual,
    greedy_policy,
    load_qtable,
    pi_star,
    q_learning,
    save_qtable,
    state_values,
    suboptimality_gap,
    train,
    v_star,
    value_iteration,
)
from .risk import RiskBounds, RiskBoundsError, epsilon_bounds
from .rollout import (
    BatchResult,
    BatchSummary,
    BoundReport,
    EpisodeRecord,
    ExactTrigger,
    FullCommTrigger,
    LearnedTrigger,
    NeverTrigger,
    RolloutError,
    audit_trace,
    bound_report,
    exact_trigger_floor,
    geometric_tail,
    geometric_total,
    learned_trigger_delta,
    run_batch,
    run_episode,
)
from .surrogate import (
    RadiusCalculator,
    SampleSet,
    SurrogateError,
    load_samples,
    sample_radii,
    save_samples,
    shell_indices,
)
from .svr import (
    SvrConvergenceError,
    SvrError,
    SvrFit,
    SvrModel,
    count_outliers,
    fit_svr,
    load_svr_model,
    predict,
    predict_one,
    primal_objective,
    save_svr_model,
)

__version__ = "0.1.0"
