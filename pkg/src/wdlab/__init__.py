"""Weight decay, low-rank structure and model merging in homogeneous networks."""
from .errors import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InvalidInputError,
    InvalidRegimeError,
    KinkError,
    UnsupportedOperationError,
)
from .linalg import spectral_norm, stable_rank, top2_singular_values
from .model import IDENTITY, RELU, Activation, Architecture, Dataset, Params, ShallowConfig

__version__ = "0.1.0"
