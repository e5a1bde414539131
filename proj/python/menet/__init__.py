"""Python bindings for the MEnet saliency toolkit."""

from ._core import (
    ContractError,
    FormatError,
    Model,
    NumericalError,
    __version__,
    adaptive_threshold,
    awgn,
    dct_quant,
    evaluate,
    f_beta,
    f_measure,
    generate_synthetic,
    gradcheck,
    load_dataset,
    mae,
    metric_losses,
    pr_curve,
)

__all__ = [
    "ContractError",
    "FormatError",
    "Model",
    "NumericalError",
    "__version__",
    "adaptive_threshold",
    "awgn",
    "dct_quant",
    "evaluate",
    "f_beta",
    "f_measure",
    "generate_synthetic",
    "gradcheck",
    "load_dataset",
    "mae",
    "metric_losses",
    "pr_curve",
]
