"""Exact steady-state moments of time-triggered stochastic hybrid systems."""

from importlib.metadata import PackageNotFoundError, version

from .errors import TtshsError
from .model import ResetMap, StabilityVerdict, TtshsModel, validate_model
from .timing import EventTimeDistribution

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "EventTimeDistribution",
    "ResetMap",
    "StabilityVerdict",
    "TtshsError",
    "TtshsModel",
    "validate_model",
]
