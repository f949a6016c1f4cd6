"""Lambda-coalescent speed of coming down from infinity, lookdown genealogies
with Brownian motion, and Monte Carlo checks of the extremal limit laws."""

from cdilab.errors import (
    CDILabError,
    ConfigError,
    ConsistencyError,
    DomainError,
    UnsupportedMeasureError,
)
from cdilab.measure import LambdaMeasure, BetaDensity, TabulatedDensity, parse_measure

__version__ = "0.1.0"

__all__ = [
    "BetaDensity",
    "CDILabError",
    "ConfigError",
    "ConsistencyError",
    "DomainError",
    "LambdaMeasure",
    "TabulatedDensity",
    "UnsupportedMeasureError",
    "parse_measure",
]
