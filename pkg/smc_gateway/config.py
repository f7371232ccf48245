"""
Runtime configuration for the gateway, the sources and the scenario runner.

Every field of Settings can be overridden from the environment (or a .env
file) as SMC_<FIELD_NAME>, e.g. SMC_MIN_PARTICIPANTS=4.
"""

import logging
import os
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

# Load environment variables from .env file if it exists
load_dotenv()

MERSENNE_61 = (1 << 61) - 1

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

ENV_PREFIX = "SMC_"


class Settings(BaseModel):
    """Tunables shared by every node of a deployment."""

    # field / codec
    modulus: int = MERSENNE_61
    fraction_bits: int = 16
    half_range: int = 1 << 40
    max_participants: int = 16

    # sessions
    min_participants: int = 3
    max_restarts: int = 2

    # timing, in seconds (virtual seconds on the simulator)
    heartbeat_interval: float = 1.0
    liveness_intervals: int = 3
    announce_interval: float = 1.0
    setup_timeout: float = 1.0
    commit_timeout: float = 2.0
    exchange_timeout: float = 2.0
    partial_grace: float = 1.0

    # simulated network
    latency: float = 0.01
    jitter: float = 0.0
    max_time: float = 600.0
    settle_time: float = 3.0
    time_scale: float = Field(default=1.0, gt=0)

    log_level: str = "INFO"

    @model_validator(mode="after")
    def _check_ranges(self) -> "Settings":
        if self.min_participants < 2:
            raise ValueError("min_participants must be at least 2")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must not be negative")
        if self.heartbeat_interval <= 0 or self.announce_interval <= 0:
            raise ValueError("intervals must be positive")
        return self

    @property
    def liveness_timeout(self) -> float:
        return self.heartbeat_interval * self.liveness_intervals

    @property
    def partial_timeout(self) -> float:
        """How long the gateway waits for partial sums after signalling Exchange."""
        return self.exchange_timeout + self.partial_grace

    @classmethod
    def from_env(cls, **overrides: Any) -> "Settings":
        """Build settings from SMC_* environment variables, then apply overrides."""
        values: dict[str, Any] = {}
        for name in cls.model_fields:
            raw = os.getenv(ENV_PREFIX + name.upper())
            if raw is not None:
                values[name] = raw
        values.update(overrides)
        return cls.model_validate(values)

    def with_parameters(self, parameters: Optional[dict[str, Any]]) -> "Settings":
        """Layer scenario parameters over these settings."""
        if not parameters:
            return self
        merged = self.model_dump()
        merged.update(parameters)
        return Settings.model_validate(merged)


def configure_logging(level: Optional[str] = None) -> None:
    """Configure process-wide logging once."""
    level = level or os.getenv("SMC_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
