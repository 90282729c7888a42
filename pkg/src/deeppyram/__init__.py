"""DeepPyram segmentation network on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DeepPyramError,
    DimensionError,
    DomainError,
    NumericalError,
    UsageError,
)
from .model import DeepPyram, ModelConfig, ModelOutput, count_parameters  # noqa: E402
