"""Multi-task opinion-score prediction with confidence-interval ranking."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    Model,
    ParseError,
    ScoreLabel,
    ShapeError,
    UndefinedCorrelation,
    average_ranks,
    binary_accuracy,
    ci_difference,
    ci_mean,
    compare,
    default_config,
    gate,
    generate_synthetic,
    label_from_votes,
    loss_ci,
    model_grad_check,
    pcc,
    read_tensor_file,
    scc,
    sigma_of_difference,
    significantly_different,
    write_dataset,
    write_tensor_file,
)

__all__ = [name for name in dir() if not name.startswith("_")]
