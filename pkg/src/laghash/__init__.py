"""Hybrid Eulerian/Lagrangian multi-resolution hash encoding for neural fields."""

from laghash.hashfield import (
    FieldConfig,
    LevelTable,
    ParameterStore,
    QueryBatch,
    count_params,
    encode,
    field_eval,
    init_params,
)
from laghash.losses import LossWeights
from laghash.optim import TrainState, adam_step, sigma_schedule

__all__ = [
    "FieldConfig",
    "LevelTable",
    "LossWeights",
    "ParameterStore",
    "QueryBatch",
    "TrainState",
    "adam_step",
    "count_params",
    "encode",
    "field_eval",
    "init_params",
    "sigma_schedule",
]

__version__ = "0.1.0"
