"""Budget-constrained incentive allocation with monotone uplift models.

Pipeline: a monotonic, smooth multi-treatment uplift network predicts
per-user revenue and cost lifts; an exact multi-choice knapsack solver
assigns at most one incentive per user under a global budget; a custom
backward pass through the solver lets both be trained jointly; metrics
quantify ranking quality and realized policy value on randomized-trial
data.
"""

__version__ = "0.1.0"

from .data import (
    DataSchema,
    Dataset,
    Sample,
    SplitSpec,
    TrueCurves,
    generate_synthetic,
    hillstrom_schema,
    load_csv,
    minibatches,
    split,
    standardize,
    synthetic_schema,
    write_csv,
)
from .ilp_layer import GradientPacket, build_basis, ilp_backward
from .knapsack import (
    AllocationProblem,
    AllocationSolution,
    LagrangianResult,
    brute_force_oracle,
    lagrangian_policy,
    solve_binary_knapsack,
    solve_mckp,
)
from .metrics import CurvePoints, aucc, auuc, eom, kendall_bins, mt_aucc, qini
from .model import (
    PredictionBundle,
    UpliftMatrices,
    UpliftNetwork,
    load_model,
    prediction_loss,
    save_model,
    uplift_loss,
)
from .training import (
    EvaluationReport,
    TrainConfig,
    TrainReport,
    allocation_loss,
    evaluate,
    train_e3ir,
    train_two_stage,
)

__all__ = [
    "__version__",
    "DataSchema",
    "Dataset",
    "Sample",
    "SplitSpec",
    "TrueCurves",
    "generate_synthetic",
    "hillstrom_schema",
    "load_csv",
    "minibatches",
    "split",
    "standardize",
    "synthetic_schema",
    "write_csv",
    "GradientPacket",
    "build_basis",
    "ilp_backward",
    "AllocationProblem",
    "AllocationSolution",
    "LagrangianResult",
    "brute_force_oracle",
    "lagrangian_policy",
    "solve_binary_knapsack",
    "solve_mckp",
    "CurvePoints",
    "aucc",
    "auuc",
    "eom",
    "kendall_bins",
    "mt_aucc",
    "qini",
    "PredictionBundle",
    "UpliftMatrices",
    "UpliftNetwork",
    "load_model",
    "prediction_loss",
    "save_model",
    "uplift_loss",
    "EvaluationReport",
    "TrainConfig",
    "TrainReport",
    "allocation_loss",
    "evaluate",
    "train_e3ir",
    "train_two_stage",
]
