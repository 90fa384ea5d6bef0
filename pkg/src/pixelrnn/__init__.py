"""Autoregressive image density models built on a small numpy autodiff core."""

from .errors import ConfigurationError, DataError, FormatError, NumericError, PixelRNNError
from .network import MultiScaleModel, MultiScaleSpec, Network, NetworkSpec
from .training import RunConfig

__all__ = [
    "ConfigurationError",
    "DataError",
    "FormatError",
    "MultiScaleModel",
    "MultiScaleSpec",
    "Network",
    "NetworkSpec",
    "NumericError",
    "PixelRNNError",
    "RunConfig",
]
__version__ = "0.1.0"
