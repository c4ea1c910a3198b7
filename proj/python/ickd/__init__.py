"""Inter-channel correlation knowledge distillation (C++ core)."""

from ._ickd import (
    ConfigError,
    Error,
    FormatError,
    GridIndivisibleError,
    NonFiniteError,
    ShapeError,
    config_help,
    distill,
    grid_partition,
    icc_matrix,
    loss_cc,
    loss_cc_grid,
    loss_kd,
    synth_cls,
    synth_seg,
    train_teacher,
    verify,
)

__all__ = [
    "ConfigError",
    "Error",
    "FormatError",
    "GridIndivisibleError",
    "NonFiniteError",
    "ShapeError",
    "config_help",
    "distill",
    "grid_partition",
    "icc_matrix",
    "loss_cc",
    "loss_cc_grid",
    "loss_kd",
    "synth_cls",
    "synth_seg",
    "train_teacher",
    "verify",
]
