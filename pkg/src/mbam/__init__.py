"""Mixed-bandwidth acoustic modeling on a NumPy autodiff engine.

Feature front end, a small reverse-mode engine, the acoustic CNN and BWE
networks, bandwidth mixing strategies, synchronous data-parallel training
and an experiment harness with a synthetic two-band corpus.
"""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    FreezeError,
    MbamError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "FreezeError",
    "MbamError",
    "NumericalError",
    "__version__",
]
