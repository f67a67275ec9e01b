"""Learnable explicit feature-map expansion and its segmentation pipeline."""

__version__ = "0.1.0"

from .errors import ConfigurationError, DataError, LefmError, NumericError
from .expansion import (
    ExponentTable,
    LefmLayer,
    enumerate_exponents,
    label_terms,
    lefm_backward,
    lefm_forward,
    monomials,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "DataError",
    "LefmError",
    "NumericError",
    "ExponentTable",
    "LefmLayer",
    "enumerate_exponents",
    "label_terms",
    "lefm_backward",
    "lefm_forward",
    "monomials",
]


def __getattr__(name):
    # lazily re-export the torch-backed and pipeline layers so that pure
    # numpy use of the expansion does not pay the torch import
    if name in ("MiniUNet", "LefmExpansion", "SegmentationModel", "dice_loss",
                "adam_step", "AdamState", "plateau_scheduler", "build_model"):
        from . import network

        return getattr(network, name)
    if name in ("TrainConfig", "train_one", "run_experiment", "report_coefficients"):
        from . import train

        return getattr(train, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
