"""Flatness-aware optimization toolkit: objectives, optimizers, flatness
estimators, a covariate-shift benchmark protocol, and the ``flatmin`` CLI."""

from .errors import (
    BatchSizeError,
    BudgetError,
    ConfigError,
    DegenerateDirectionError,
    DimensionError,
    FlatminError,
    InsufficientDataError,
    NumericalError,
    ProtocolError,
)
from .flatness import (
    FlatnessBudget,
    FlatnessReport,
    build_flatness_report,
    fad_regularizer,
    first_order_flatness,
    hutchinson_trace,
    lambda_max_from_fad,
    power_iteration_lambda_max,
    total_objective,
    zeroth_order_flatness,
)
from .objectives import (
    Batch,
    Dataset,
    DoubleWellObjective,
    MLPObjective,
    Objective,
    QuadraticObjective,
    RosenbrockObjective,
    eval_grad,
    eval_loss,
    hvp_fd,
    load_dataset,
    make_objective,
    random_spd_matrix,
    sample_batch,
    save_dataset,
)
from .optimizers import (
    ConvergenceReport,
    OptimizerConfig,
    OptimizerState,
    RunRecord,
    StepTrace,
    adam_step,
    adamw_step,
    convergence_check,
    fad_step,
    gam_step,
    momentum_sgd_step,
    run_training,
    sam_step,
    schedule_value,
    sgd_step,
    step,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
