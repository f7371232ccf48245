"""Privacy-preserving aggregation gateway for IoT sensor data, built on additive secret sharing."""

from .config import Settings, configure_logging
from .datarequest import AggregateKind, DataRequest, TimeWindow, sign_request
from .errors import SmcError
from .scenario import Deployment, Scenario

__version__ = "1.0.0"

__all__ = [
    "AggregateKind",
    "DataRequest",
    "Deployment",
    "Scenario",
    "Settings",
    "SmcError",
    "TimeWindow",
    "configure_logging",
    "sign_request",
]
