"""Koopman mode decomposition of masked raster time series.

Decomposes monthly sea-pixel snapshot matrices into discrete eigenvalues and
spatial modes, labels mean / annual / long-term decay modes, and reconstructs
or forecasts the field from the modal sum.
"""

from kmdtool.errors import DataError, IncomparableError, KmdError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "IncomparableError",
    "KmdError",
    "NumericalError",
    "__version__",
]
