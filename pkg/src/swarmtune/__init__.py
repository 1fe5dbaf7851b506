"""Swarm search over a constrained integer encoding of CNN hyperparameters."""

__version__ = "0.1.0"

from .shapes import (
    Aspect,
    ImageShape,
    InfeasibleShape,
    ShapeTrace,
    classify_aspect,
    layer_output_size,
    parameter_count,
    propagate_shapes,
)
from .space import (
    HyperparamVector,
    SearchSpace,
    VariableBounds,
    baseline_vector,
    bounds_for,
    sample_vector,
    validate,
)
from .evaluation import (
    DATASETS,
    CachedEvaluator,
    EvaluatorFailure,
    FitnessRecord,
    SurrogateParamTarget,
    SurrogateSeparable,
    TrainSpec,
    accuracy,
)
from .sso import PRESETS, RunResult, SsoConfig, preset, run_sso
