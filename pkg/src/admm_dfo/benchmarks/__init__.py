"""Benchmark problems and the monolithic baseline."""

from .functions import (
    ArwheadLayout,
    RosenbrockLayout,
    arwhead_eval,
    decompose_arwhead,
    decompose_rosenbrock,
    rosenbrock_eval,
)
from .nelder_mead import NelderMeadResult, nelder_mead
from .nn import (
    BanknoteSplit,
    DataFormatError,
    decompose_nn,
    load_banknote,
    nn_local_loss,
    predict,
    synthetic_banknote,
    unpack_weights,
    validation_accuracy,
)

__all__ = [
    "ArwheadLayout",
    "RosenbrockLayout",
    "arwhead_eval",
    "rosenbrock_eval",
    "decompose_arwhead",
    "decompose_rosenbrock",
    "NelderMeadResult",
    "nelder_mead",
    "BanknoteSplit",
    "DataFormatError",
    "decompose_nn",
    "load_banknote",
    "nn_local_loss",
    "predict",
    "synthetic_banknote",
    "unpack_weights",
    "validation_accuracy",
]
